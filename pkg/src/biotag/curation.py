"""Curation service: specialists validate auto-annotations and export IOB corpora.

State is an append-only decision log over immutable annotation input; every
item carries a version that increments on each decision, and writers must
present the version they based their decision on (optimistic concurrency).
Items are leased to one annotator at a time with a TTL so abandoned batches
resurface. Replaying the log over the original annotations reconstructs the
exact state, which makes crash recovery a snapshot plus a replay.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .kb import EntityClass
from .corpus import TYPED, UNTYPED, Mention, TaggedSentence, to_iob
from .textprep import Sentence

PENDING = "pending"
ACCEPTED = "accepted"
REJECTED = "rejected"

ACTIONS = ("accept", "reject", "add", "retract")


class CurationError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


class StaleVersionError(CurationError):
    def __init__(self, message: str, current_version: int):
        super().__init__("stale_version", message)
        self.current_version = current_version


@dataclass
class Candidate:
    candidate_id: str
    start: int
    end: int
    cui: str
    tuis: tuple[str, ...]
    score: float
    entity_class: EntityClass | None


@dataclass
class Addition:
    start: int
    end: int
    entity_class: EntityClass
    annotator: str


@dataclass
class CurationItem:
    item_id: str
    doc_id: str
    sentence_index: int
    text: str
    candidates: list[Candidate]
    status: dict[str, str]
    additions: list[Addition] = field(default_factory=list)
    version: int = 0
    lease_annotator: str | None = None
    lease_expires: float = 0.0
    decided_by: dict[str, str] = field(default_factory=dict)
    conflicts: int = 0

    def pending_candidates(self) -> list[Candidate]:
        return [c for c in self.candidates if self.status[c.candidate_id] == PENDING]

    def accepted_spans(self) -> list[tuple[int, int]]:
        spans = [
            (c.start, c.end) for c in self.candidates if self.status[c.candidate_id] == ACCEPTED
        ]
        spans.extend((a.start, a.end) for a in self.additions)
        return spans


@dataclass(frozen=True)
class DecisionRecord:
    item_id: str
    action: str
    annotator: str
    base_version: int
    timestamp: float
    candidate_id: str | None = None
    span: tuple[int, int] | None = None
    entity_class: EntityClass | None = None

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "action": self.action,
            "annotator": self.annotator,
            "base_version": self.base_version,
            "timestamp": self.timestamp,
            "candidate_id": self.candidate_id,
            "span": list(self.span) if self.span else None,
            "class": self.entity_class.value if self.entity_class else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DecisionRecord":
        cls_name = data.get("class")
        entity_class = None
        if cls_name:
            entity_class = next(c for c in EntityClass if c.value == cls_name)
        span = data.get("span")
        return cls(
            item_id=data["item_id"],
            action=data["action"],
            annotator=data["annotator"],
            base_version=int(data["base_version"]),
            timestamp=float(data.get("timestamp", 0.0)),
            candidate_id=data.get("candidate_id"),
            span=(int(span[0]), int(span[1])) if span else None,
            entity_class=entity_class,
        )


@dataclass
class ExportResult:
    aggregated: list[TaggedSentence]
    per_class: dict[EntityClass, list[TaggedSentence]]
    warnings: list[str]
    pending_treated_rejected: int


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


class CurationSession:
    """In-memory curation state for one annotated corpus."""

    def __init__(self, session_id: str, annotations: list[dict], lease_ttl: float = 300.0):
        self.session_id = session_id
        self.lease_ttl = lease_ttl
        self.annotations = annotations
        self.items: dict[str, CurationItem] = {}
        self.item_order: list[str] = []
        self.log: list[DecisionRecord] = []
        self._lock = threading.Lock()
        for obj in annotations:
            self._ingest(obj)
        if not self.items:
            raise CurationError("empty_input", "no sentences with candidates in input")

    def _ingest(self, obj: dict) -> None:
        try:
            doc_id = obj["doc_id"]
            sentence_index = int(obj["sentence_index"])
            text = obj["text"]
            matches = obj["matches"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CurationError("malformed_input", f"bad annotation object: {exc}") from None
        if not matches:
            return
        item_id = f"{doc_id}:{sentence_index}"
        candidates = []
        for i, m in enumerate(matches):
            cls_name = m.get("class")
            entity_class = None
            if cls_name:
                entity_class = next((c for c in EntityClass if c.value == cls_name), None)
            try:
                candidates.append(
                    Candidate(
                        candidate_id=f"{item_id}#{i}",
                        start=int(m["start"]),
                        end=int(m["end"]),
                        cui=m["cui"],
                        tuis=tuple(m.get("tui_set", ())),
                        score=float(m["score"]),
                        entity_class=entity_class,
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise CurationError("malformed_input", f"bad match in {item_id}: {exc}") from None
        self.items[item_id] = CurationItem(
            item_id=item_id,
            doc_id=doc_id,
            sentence_index=sentence_index,
            text=text,
            candidates=candidates,
            status={c.candidate_id: PENDING for c in candidates},
        )
        self.item_order.append(item_id)

    # -- decisions ----------------------------------------------------------

    def decide(self, record: DecisionRecord) -> int:
        """Apply one decision; returns the item's new version. Raises
        StaleVersionError when the record's base version is behind."""
        with self._lock:
            return self._apply(record)

    def _apply(self, record: DecisionRecord) -> int:
        item = self.items.get(record.item_id)
        if item is None:
            raise CurationError("unknown_item", f"no item {record.item_id!r}")
        if record.base_version != item.version:
            raise StaleVersionError(
                f"decision based on version {record.base_version}, item is at {item.version}",
                current_version=item.version,
            )
        if record.action not in ACTIONS:
            raise CurationError("unknown_action", f"unknown action {record.action!r}")
        if record.action in ("accept", "reject"):
            self._apply_candidate_decision(item, record)
        elif record.action == "add":
            self._apply_add(item, record)
        else:
            self._apply_retract(item, record)
        item.version += 1
        self.log.append(record)
        return item.version

    def _apply_candidate_decision(self, item: CurationItem, record: DecisionRecord) -> None:
        cid = record.candidate_id
        if cid is None or cid not in item.status:
            raise CurationError("unknown_candidate", f"no candidate {cid!r} in {item.item_id}")
        if record.action == "accept":
            cand = next(c for c in item.candidates if c.candidate_id == cid)
            others = [
                (c.start, c.end)
                for c in item.candidates
                if c.candidate_id != cid and item.status[c.candidate_id] == ACCEPTED
            ]
            others.extend((a.start, a.end) for a in item.additions)
            if any(_overlaps((cand.start, cand.end), span) for span in others):
                raise CurationError(
                    "overlap", f"candidate {cid} overlaps an accepted span in {item.item_id}"
                )
        previous = item.decided_by.get(cid)
        if previous is not None and previous != record.annotator:
            item.conflicts += 1
        item.decided_by[cid] = record.annotator
        item.status[cid] = ACCEPTED if record.action == "accept" else REJECTED

    def _apply_add(self, item: CurationItem, record: DecisionRecord) -> None:
        if record.span is None or record.entity_class is None:
            raise CurationError("malformed_decision", "add requires a span and a class")
        start, end = record.span
        if not (0 <= start < end <= len(item.text)):
            raise CurationError("bad_span", f"span {record.span} out of bounds for {item.item_id}")
        if any(_overlaps((start, end), span) for span in item.accepted_spans()):
            raise CurationError("overlap", f"span {record.span} overlaps an accepted span")
        item.additions.append(
            Addition(start=start, end=end, entity_class=record.entity_class, annotator=record.annotator)
        )

    def _apply_retract(self, item: CurationItem, record: DecisionRecord) -> None:
        if record.candidate_id is not None:
            if record.candidate_id not in item.status:
                raise CurationError("unknown_candidate", f"no candidate {record.candidate_id!r}")
            item.status[record.candidate_id] = PENDING
            return
        if record.span is not None:
            for i, addition in enumerate(item.additions):
                if (addition.start, addition.end) == record.span:
                    del item.additions[i]
                    return
            raise CurationError("unknown_target", f"no addition at {record.span} in {item.item_id}")
        raise CurationError("malformed_decision", "retract requires a candidate id or a span")

    # -- leases --------------------------------------------------------------

    def next_batch(self, annotator: str, k: int, now: float | None = None) -> list[CurationItem]:
        """Up to k items with pending candidates, leased to the annotator."""
        now = time.time() if now is None else now
        with self._lock:
            batch: list[CurationItem] = []
            for item_id in self.item_order:
                if len(batch) >= k:
                    break
                item = self.items[item_id]
                if not item.pending_candidates():
                    continue
                leased = item.lease_annotator is not None and item.lease_expires > now
                if leased and item.lease_annotator != annotator:
                    continue
                item.lease_annotator = annotator
                item.lease_expires = now + self.lease_ttl
                batch.append(item)
            return batch

    # -- progress & export ---------------------------------------------------

    def progress(self) -> dict:
        counts = {PENDING: 0, ACCEPTED: 0, REJECTED: 0}
        pending_items = 0
        additions = 0
        conflicts = 0
        for item in self.items.values():
            statuses = list(item.status.values())
            for s in statuses:
                counts[s] += 1
            if PENDING in statuses:
                pending_items += 1
            additions += len(item.additions)
            conflicts += item.conflicts
        return {
            "items": len(self.items),
            "pending_items": pending_items,
            "candidates": counts,
            "additions": additions,
            "conflicts": conflicts,
            "decisions": len(self.log),
        }

    def export(self) -> ExportResult:
        """Curated corpora: accepted + added mentions per sentence, encoded as
        IOB; pending candidates count as rejected; empty sentences dropped."""
        aggregated: list[TaggedSentence] = []
        per_class: dict[EntityClass, list[TaggedSentence]] = {cls: [] for cls in EntityClass}
        pending = 0
        for item_id in self.item_order:
            item = self.items[item_id]
            pending += len(item.pending_candidates())
            mentions: list[Mention] = []
            for cand in item.candidates:
                if item.status[cand.candidate_id] == ACCEPTED:
                    mentions.append(((cand.start, cand.end), cand.entity_class))
            for addition in item.additions:
                mentions.append(((addition.start, addition.end), addition.entity_class))
            if not mentions:
                continue
            sentence = Sentence(
                doc_id=item.doc_id,
                sentence_index=item.sentence_index,
                text=item.text,
                source_span=(0, len(item.text)),
            )
            aggregated.append(to_iob(sentence, mentions, scheme=TYPED))
            for cls in EntityClass:
                cls_mentions = [(span, None) for span, mcls in mentions if mcls is cls]
                if cls_mentions:
                    per_class[cls].append(to_iob(sentence, cls_mentions, scheme=UNTYPED))
        warnings = []
        if pending:
            warnings.append(f"{pending} pending candidates treated as rejected at export")
        return ExportResult(
            aggregated=aggregated,
            per_class=per_class,
            warnings=warnings,
            pending_treated_rejected=pending,
        )

    # -- replay ---------------------------------------------------------------

    @classmethod
    def replay(
        cls, session_id: str, annotations: list[dict], log: list[DecisionRecord], lease_ttl: float = 300.0
    ) -> "CurationSession":
        """Reconstruct a session by replaying its decision log."""
        session = cls(session_id, annotations, lease_ttl=lease_ttl)
        for record in log:
            session.decide(record)
        return session


class SessionStore:
    """Holds sessions and persists them as annotations + decision log + snapshot."""

    def __init__(self, root: str | Path | None = None, lease_ttl: float = 300.0):
        self.root = Path(root) if root is not None else None
        self.lease_ttl = lease_ttl
        self.sessions: dict[str, CurationSession] = {}
        self._lock = threading.Lock()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            for session_dir in sorted(self.root.iterdir()):
                if (session_dir / "annotations.jsonl").exists():
                    self._recover(session_dir.name)

    def _dir(self, session_id: str) -> Path:
        assert self.root is not None
        return self.root / session_id

    def create(self, annotations: list[dict], session_id: str | None = None) -> CurationSession:
        session_id = session_id or uuid.uuid4().hex[:12]
        session = CurationSession(session_id, annotations, lease_ttl=self.lease_ttl)
        with self._lock:
            self.sessions[session_id] = session
        if self.root is not None:
            directory = self._dir(session_id)
            directory.mkdir(parents=True, exist_ok=True)
            with (directory / "annotations.jsonl").open("w", encoding="utf-8") as fh:
                for obj in annotations:
                    fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
            (directory / "decisions.jsonl").write_text("", encoding="utf-8")
        return session

    def get(self, session_id: str) -> CurationSession:
        session = self.sessions.get(session_id)
        if session is None:
            raise CurationError("unknown_session", f"no session {session_id!r}")
        return session

    def decide(self, session_id: str, record: DecisionRecord) -> int:
        session = self.get(session_id)
        version = session.decide(record)
        if self.root is not None:
            with (self._dir(session_id) / "decisions.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
        return version

    def snapshot(self, session_id: str) -> None:
        if self.root is None:
            return
        session = self.get(session_id)
        payload = {"session_id": session_id, "log_length": len(session.log)}
        (self._dir(session_id) / "snapshot.json").write_text(
            json.dumps(payload), encoding="utf-8"
        )

    def _recover(self, session_id: str) -> None:
        directory = self._dir(session_id)
        annotations = [
            json.loads(line)
            for line in (directory / "annotations.jsonl").read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        log_path = directory / "decisions.jsonl"
        log: list[DecisionRecord] = []
        if log_path.exists():
            for line in log_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    log.append(DecisionRecord.from_dict(json.loads(line)))
        self.sessions[session_id] = CurationSession.replay(
            session_id, annotations, log, lease_ttl=self.lease_ttl
        )


def load_annotations_jsonl(text: str) -> list[dict]:
    """Parse the `annotate` output format: one JSON object per line."""
    objects = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            objects.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CurationError("malformed_input", f"line {lineno}: {exc}") from None
    if not objects:
        raise CurationError("empty_input", "no annotation rows")
    return objects
