"""Document preprocessing: sentence segmentation, deduplication, abbreviation expansion.

All downstream stages share the tokenizer defined here: whitespace split,
then leading/trailing punctuation peeled off as single-character tokens,
internal hyphens/slashes kept (so "120/80" is one token).

Offsets are the currency of the whole pipeline. Sentences carry spans into
their source document, and abbreviation expansion produces a normalized text
together with a map back to original character positions, so matches found
on expanded text are always reported against what the clinician wrote.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path

SENTENCE_TERMINATORS = ".!?;"


class GlossaryError(ValueError):
    """Malformed glossary file or entry."""


class DocumentError(ValueError):
    """Malformed document or sidecar metadata."""


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class NoteHeader:
    date: str
    context: str
    span: tuple[int, int]


@dataclass(frozen=True)
class RawDocument:
    doc_id: str
    text: str
    notes: tuple[NoteHeader, ...] = ()

    def __post_init__(self) -> None:
        prev_end = 0
        for note in self.notes:
            start, end = note.span
            if not (prev_end <= start <= end <= len(self.text)):
                raise DocumentError(f"{self.doc_id}: note span {note.span} out of order or out of bounds")
            prev_end = end


@dataclass(frozen=True)
class Sentence:
    doc_id: str
    sentence_index: int
    text: str
    source_span: tuple[int, int]


@dataclass(frozen=True)
class NormalizedSentence:
    """Sentence text after glossary expansion, with per-character origin spans.

    ``starts[i]``/``ends[i]`` give the original-character span that produced
    normalized character i: identity for untouched characters, the whole
    abbreviation span for every character of an expansion.
    """

    text: str
    starts: tuple[int, ...]
    ends: tuple[int, ...]
    source: Sentence

    def offset_map(self, pos: int) -> int:
        """Original position of normalized character ``pos``."""
        return self.starts[pos]

    def map_span(self, start: int, end: int) -> tuple[int, int]:
        """Map a non-empty normalized [start, end) span to original offsets."""
        if not (0 <= start < end <= len(self.text)):
            raise ValueError(f"bad span ({start}, {end}) for text of length {len(self.text)}")
        return self.starts[start], self.ends[end - 1]


def nfkc(s: str) -> str:
    return unicodedata.normalize("NFKC", s)


def _is_punct_char(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def is_punct_token(text: str) -> bool:
    return bool(text) and all(_is_punct_char(ch) for ch in text)


def tokenize(text: str) -> list[Token]:
    """Split on whitespace, then peel leading/trailing punctuation characters
    off each chunk as single-character tokens."""
    tokens: list[Token] = []
    for m in re.finditer(r"\S+", text):
        chunk, base = m.group(), m.start()
        left, right = 0, len(chunk)
        while left < right and _is_punct_char(chunk[left]):
            left += 1
        while right > left and _is_punct_char(chunk[right - 1]):
            right -= 1
        for i in range(left):
            tokens.append(Token(chunk[i], base + i, base + i + 1))
        if left < right:
            tokens.append(Token(chunk[left:right], base + left, base + right))
        for i in range(right, len(chunk)):
            tokens.append(Token(chunk[i], base + i, base + i + 1))
    return tokens


_BULLET_RE = re.compile(r"(?:[-*]|\d{1,3}[).])(?=\s)")


def _line_boundaries(text: str, start: int, end: int) -> list[int]:
    """Split points strictly inside [start, end), per the frozen rules."""
    cuts: set[int] = set()
    line = text[start:end]

    # sentence-final punctuation followed by whitespace + uppercase/digit
    for m in re.finditer(r"[.!?;]", line):
        p = m.start()
        after = line[p + 1 :]
        stripped = after.lstrip()
        if stripped is after or not stripped:
            continue  # no whitespace after, or nothing follows
        nxt = stripped[0]
        if not (nxt.isupper() or nxt.isdigit()):
            continue
        if line[p] == ".":
            before = line[:p]
            token = re.search(r"(\S+)$", before)
            word = token.group(1) if token else ""
            # single-letter abbreviation ("F. Silva")
            if len(word) == 1 and word.isalpha():
                continue
            # line-leading item number ("1. Primeiro item")
            if word.isdigit() and before[: len(before) - len(word)].strip() == "":
                continue
        cut = p + 1 + (len(after) - len(stripped))
        cuts.add(cut)

    # bullet / item markers preceded by whitespace
    for m in _BULLET_RE.finditer(line):
        p = m.start()
        if p > 0 and line[p - 1].isspace():
            cuts.add(p)

    return sorted(start + c for c in cuts if 0 < c < end - start)


def segment(doc: RawDocument) -> list[Sentence]:
    """Split a document into sentences at newlines, sentence-final punctuation
    followed by whitespace and an uppercase letter or digit, and bullet/item
    markers. Returns trimmed, non-empty sentences with source spans."""
    sentences: list[Sentence] = []
    text = doc.text
    offset = 0
    for line in text.split("\n"):
        ls, le = offset, offset + len(line)
        offset = le + 1
        bounds = [ls] + _line_boundaries(text, ls, le) + [le]
        for a, b in zip(bounds, bounds[1:]):
            piece = text[a:b]
            lead = len(piece) - len(piece.lstrip())
            trail = len(piece) - len(piece.rstrip())
            s, e = a + lead, b - trail
            if s >= e:
                continue
            sentences.append(
                Sentence(
                    doc_id=doc.doc_id,
                    sentence_index=len(sentences),
                    text=text[s:e],
                    source_span=(s, e),
                )
            )
    return sentences


def _dedupe_key(text: str) -> str:
    return " ".join(text.split())


def dedupe(sentences: list[Sentence]) -> list[Sentence]:
    """Drop repeated sentences, keeping first occurrences in order. Equality
    ignores leading/trailing whitespace and collapses internal runs."""
    seen: set[str] = set()
    out: list[Sentence] = []
    for s in sentences:
        key = _dedupe_key(s.text)
        if key not in seen:
            seen.add(key)
            out.append(s)
    return out


class Glossary:
    """Case-sensitive abbreviation -> expansion map, applied on token boundaries."""

    def __init__(self, entries: dict[str, str]):
        normalized: dict[str, str] = {}
        for key, expansion in entries.items():
            if not key or not key.strip():
                raise GlossaryError("empty glossary key")
            if not expansion or not expansion.strip():
                raise GlossaryError(f"empty expansion for {key!r}")
            if key == expansion:
                raise GlossaryError(f"glossary key {key!r} equals its expansion")
            if any(ch in SENTENCE_TERMINATORS for ch in expansion):
                raise GlossaryError(f"expansion for {key!r} contains a sentence terminator")
            normalized[nfkc(key)] = expansion
        self.entries = normalized

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, token: str) -> str | None:
        return self.entries.get(token)


def load_glossary(path: str | Path) -> Glossary:
    """Load ``ABBREV\\texpansion`` rows."""
    path = Path(path)
    entries: dict[str, str] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise GlossaryError(f"{path}: line {lineno}: expected 2 tab-separated columns, got {len(cols)}")
            entries[cols[0]] = cols[1]
    return Glossary(entries)


def expand_abbreviations(sentence: Sentence, glossary: Glossary) -> NormalizedSentence:
    """Replace every token exactly matching a glossary key by its expansion.

    Every character of an expansion maps back to the span of the abbreviation
    it replaced; all other characters map to themselves.
    """
    text = sentence.text
    chars: list[str] = []
    starts: list[int] = []
    ends: list[int] = []
    cursor = 0
    replacements = [
        (tok, glossary.get(nfkc(tok.text)))
        for tok in tokenize(text)
        if glossary.get(nfkc(tok.text)) is not None
    ]
    for tok, expansion in replacements:
        for i in range(cursor, tok.start):
            chars.append(text[i])
            starts.append(i)
            ends.append(i + 1)
        assert expansion is not None
        for ch in expansion:
            chars.append(ch)
            starts.append(tok.start)
            ends.append(tok.end)
        cursor = tok.end
    for i in range(cursor, len(text)):
        chars.append(text[i])
        starts.append(i)
        ends.append(i + 1)
    return NormalizedSentence(
        text="".join(chars), starts=tuple(starts), ends=tuple(ends), source=sentence
    )


def load_document(path: str | Path, doc_id: str | None = None) -> RawDocument:
    """Read a plain-text document; a ``<path>.meta`` sidecar with
    ``offset\\tdate\\tcontext`` rows, when present, supplies note headers."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    doc_id = doc_id if doc_id is not None else path.stem
    notes: list[NoteHeader] = []
    sidecar = path.with_name(path.name + ".meta")
    if sidecar.exists():
        offsets: list[tuple[int, str, str]] = []
        with sidecar.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                cols = line.split("\t")
                if len(cols) != 3:
                    raise DocumentError(f"{sidecar}: line {lineno}: expected 3 columns")
                try:
                    offsets.append((int(cols[0]), cols[1], cols[2]))
                except ValueError as exc:
                    raise DocumentError(f"{sidecar}: line {lineno}: bad offset {cols[0]!r}") from exc
        offsets.sort()
        for i, (off, date, context) in enumerate(offsets):
            end = offsets[i + 1][0] if i + 1 < len(offsets) else len(text)
            notes.append(NoteHeader(date=date, context=context, span=(off, end)))
    return RawDocument(doc_id=doc_id, text=text, notes=tuple(notes))
