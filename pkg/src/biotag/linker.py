"""Prediction pipeline: combine per-class taggers, link spans to the KB, and
assign final entity classes from semantic groups.

Three settings are supported: dictionary matching alone (`umls_only`),
per-class sequence taggers alone (`ner_only`), and taggers followed by
entity linking (`ner_umls`), where spans the KB does not know are discarded
and the final class comes from the linked concept's semantic type.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .kb import EntityClass, class_of, mapped_tuis
from .matcher import Match, MatcherConfig, NGramIndex, lookup, scan_sentence
from .tagger import CRFModel, DecodeResult, decode, span_confidence
from .textprep import Glossary, Sentence, Token, expand_abbreviations, tokenize

MODES = ("umls_only", "ner_only", "ner_umls")

#: deterministic tie order; also the fallback priority when a linked concept
#: maps to several classes and none matches the proposing model
CLASS_PRIORITY = (EntityClass.DISEASE, EntityClass.PROCEDURE, EntityClass.DRUG)


class TokenizationMismatch(ValueError):
    """Per-class decodes disagree on the tokenization."""


@dataclass(frozen=True)
class LinkedEntity:
    start: int
    end: int
    text: str
    cui: str | None
    tui: str | None
    entity_class: EntityClass | None
    similarity: float | None
    confidence: float
    source: str

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "end": self.end,
            "text": self.text,
            "cui": self.cui,
            "tui": self.tui,
            "class": self.entity_class.value if self.entity_class else None,
            "similarity": self.similarity,
            "confidence": self.confidence,
            "source": self.source,
        }


@dataclass(frozen=True)
class CandidateSpan:
    start: int
    end: int
    text: str
    entity_class: EntityClass
    confidence: float
    source: str


@dataclass(frozen=True)
class LinkConfig:
    threshold: float = 0.9

    def __post_init__(self) -> None:
        if not 0 < self.threshold <= 1:
            raise ValueError("link threshold must be in (0, 1]")


@dataclass
class PipelineAssets:
    """Everything predict() needs; models may be absent for umls_only runs."""

    index: NGramIndex
    matcher_cfg: MatcherConfig
    groups: dict[str, EntityClass]
    glossary: Glossary
    models: dict[EntityClass, CRFModel] | None = None
    link_cfg: LinkConfig = LinkConfig()


def _class_rank(cls: EntityClass) -> int:
    return CLASS_PRIORITY.index(cls)


def merge_predictions(
    tokens: list[Token], decodes: dict[EntityClass, DecodeResult], text: str
) -> list[CandidateSpan]:
    """Pool per-class decodes into non-overlapping candidate spans.

    Overlaps are resolved by highest confidence, then longer span, then
    smaller start offset (then class priority, for full determinism).
    """
    candidates: list[CandidateSpan] = []
    for cls, result in decodes.items():
        if len(result.path) != len(tokens):
            raise TokenizationMismatch(
                f"{cls} decode has {len(result.path)} tags for {len(tokens)} tokens"
            )
        first: int | None = None
        for pos in range(len(result.path) + 1):
            tag = result.path[pos] if pos < len(result.path) else "O"
            if tag != "I" and first is not None:
                span = (tokens[first].start, tokens[pos - 1].end)
                candidates.append(
                    CandidateSpan(
                        start=span[0],
                        end=span[1],
                        text=text[span[0] : span[1]],
                        entity_class=cls,
                        confidence=span_confidence(result, (first, pos)),
                        source=cls.value,
                    )
                )
                first = None
            if tag == "B":
                first = pos
    candidates.sort(
        key=lambda c: (-c.confidence, -(c.end - c.start), c.start, _class_rank(c.entity_class))
    )
    chosen: list[CandidateSpan] = []
    for cand in candidates:
        if all(cand.end <= c.start or cand.start >= c.end for c in chosen):
            chosen.append(cand)
    chosen.sort(key=lambda c: c.start)
    return chosen


def _expand_text(text: str, glossary: Glossary) -> str:
    dummy = Sentence(doc_id="", sentence_index=0, text=text, source_span=(0, len(text)))
    return expand_abbreviations(dummy, glossary).text


def link(
    candidate: CandidateSpan, assets: PipelineAssets
) -> LinkedEntity | None:
    """Look the candidate's text up in the KB at the link threshold.

    Unknown spans are discarded (None). The final class comes from the best
    hit's semantic type; among several mapped TUIs the one matching the
    proposing model's class wins, else the highest-priority class.
    """
    query = _expand_text(candidate.text, assets.glossary)
    cfg = replace(assets.matcher_cfg, alpha=assets.link_cfg.threshold)
    hits = lookup(assets.index, query, cfg)
    if not hits:
        return None
    top = hits[0]
    by_class: dict[EntityClass, str] = {}
    for tui in sorted(top.tuis):
        cls = class_of(tui, assets.groups)
        if cls is not None and cls not in by_class:
            by_class[cls] = tui
    if not by_class:
        return None
    if candidate.entity_class in by_class:
        cls = candidate.entity_class
    else:
        cls = next(c for c in CLASS_PRIORITY if c in by_class)
    return LinkedEntity(
        start=candidate.start,
        end=candidate.end,
        text=candidate.text,
        cui=top.cui,
        tui=by_class[cls],
        entity_class=cls,
        similarity=top.score,
        confidence=candidate.confidence,
        source=candidate.source,
    )


def _match_to_entity(match: Match, groups: dict[str, EntityClass]) -> LinkedEntity | None:
    by_class: dict[EntityClass, str] = {}
    for tui in sorted(match.tuis):
        cls = class_of(tui, groups)
        if cls is not None and cls not in by_class:
            by_class[cls] = tui
    if not by_class:
        return None
    cls = next(c for c in CLASS_PRIORITY if c in by_class)
    return LinkedEntity(
        start=match.start,
        end=match.end,
        text=match.window_text,
        cui=match.cui,
        tui=by_class[cls],
        entity_class=cls,
        similarity=match.score,
        confidence=match.score,
        source="umls",
    )


def _ner_candidates(sentence: Sentence, assets: PipelineAssets) -> list[CandidateSpan]:
    if not assets.models:
        raise ValueError("NER modes require per-class models")
    tokens = tokenize(sentence.text)
    texts = [t.text for t in tokens]
    decodes = {cls: decode(model, texts) for cls, model in sorted(assets.models.items(), key=lambda kv: kv[0].value)}
    return merge_predictions(tokens, decodes, sentence.text)


def predict(sentence: Sentence, mode: str, assets: PipelineAssets) -> list[LinkedEntity]:
    """Entities for one sentence under one of the three model settings."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not sentence.text.strip():
        return []
    if mode == "umls_only":
        normalized = expand_abbreviations(sentence, assets.glossary)
        cfg = assets.matcher_cfg
        if cfg.tui_filter is None:
            cfg = replace(cfg, tui_filter=frozenset(mapped_tuis(assets.groups)))
        matches = scan_sentence(normalized, assets.index, cfg)
        entities = [_match_to_entity(m, assets.groups) for m in matches]
        return [e for e in entities if e is not None]
    candidates = _ner_candidates(sentence, assets)
    if mode == "ner_only":
        return [
            LinkedEntity(
                start=c.start,
                end=c.end,
                text=c.text,
                cui=None,
                tui=None,
                entity_class=c.entity_class,
                similarity=None,
                confidence=c.confidence,
                source=c.source,
            )
            for c in candidates
        ]
    linked = [link(c, assets) for c in candidates]
    return [e for e in linked if e is not None]


def predict_text(text: str, mode: str, assets: PipelineAssets, doc_id: str = "input", sentence_index: int = 0) -> list[LinkedEntity]:
    sentence = Sentence(doc_id=doc_id, sentence_index=sentence_index, text=text, source_span=(0, len(text)))
    return predict(sentence, mode, assets)


def annotate_sentences(
    sentences: list[Sentence],
    index: NGramIndex,
    cfg: MatcherConfig,
    groups: dict[str, EntityClass],
    glossary: Glossary,
) -> list[dict]:
    """High-recall auto-annotation: one JSON-ready record per sentence with
    its dictionary matches (possibly empty)."""
    from .matcher import match_class

    records = []
    for sentence in sentences:
        normalized = expand_abbreviations(sentence, glossary)
        matches = scan_sentence(normalized, index, cfg)
        records.append(
            {
                "doc_id": sentence.doc_id,
                "sentence_index": sentence.sentence_index,
                "text": sentence.text,
                "matches": [
                    {
                        "start": m.start,
                        "end": m.end,
                        "cui": m.cui,
                        "tui_set": sorted(m.tuis),
                        "score": m.score,
                        "class": (lambda c: c.value if c else None)(match_class(m, groups)),
                    }
                    for m in matches
                ],
            }
        )
    return records
