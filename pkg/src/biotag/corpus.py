"""IOB corpus handling: tag encoding/decoding, splitting, statistics, CoNLL files.

Two tag schemes are supported: untyped {B, I, O} for the per-class corpora
and typed {B-X, I-X, O} for the aggregated corpus. A mention is a contiguous
character span aligned to token boundaries, optionally carrying an entity
class.
"""

from __future__ import annotations

import math
import random
import warnings
from dataclasses import dataclass
from pathlib import Path

from .kb import EntityClass
from .textprep import Sentence, Token, tokenize

#: (char span, class) pair; class is None in untyped corpora.
Mention = tuple[tuple[int, int], EntityClass | None]

UNTYPED = "untyped"
TYPED = "typed"


class IOBSchemeError(ValueError):
    """Tag sequence violating the IOB scheme, with the offending position."""


class CorpusFormatError(ValueError):
    """Malformed corpus file."""


@dataclass(frozen=True)
class TaggedSentence:
    doc_id: str
    sentence_index: int
    tokens: tuple[Token, ...]
    tags: tuple[str, ...]
    scheme: str

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.tags):
            raise IOBSchemeError(
                f"{self.doc_id}[{self.sentence_index}]: {len(self.tokens)} tokens vs {len(self.tags)} tags"
            )
        validate_tags(self.tags, self.scheme)

    @property
    def sentence_id(self) -> str:
        return f"{self.doc_id}:{self.sentence_index}"


@dataclass(frozen=True)
class CorpusStats:
    sentences: int
    b_tokens: int
    i_tokens: int
    o_tokens: int

    @property
    def total_tokens(self) -> int:
        return self.b_tokens + self.i_tokens + self.o_tokens


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.20
    val_fraction_of_remainder: float = 0.20
    seed: int = 0

    def __post_init__(self) -> None:
        for frac in (self.test_fraction, self.val_fraction_of_remainder):
            if not 0 < frac < 1:
                raise ValueError("split fractions must be in (0, 1)")


@dataclass(frozen=True)
class Split:
    train: list[TaggedSentence]
    validation: list[TaggedSentence]
    test: list[TaggedSentence]

    def parts(self) -> dict[str, list[TaggedSentence]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


def _parse_tag(tag: str, scheme: str) -> tuple[str, EntityClass | None]:
    if scheme == UNTYPED:
        if tag not in ("B", "I", "O"):
            raise IOBSchemeError(f"bad untyped tag {tag!r}")
        return tag, None
    if tag == "O":
        return "O", None
    if "-" in tag:
        head, _, name = tag.partition("-")
        if head in ("B", "I"):
            for cls in EntityClass:
                if cls.value == name:
                    return head, cls
    raise IOBSchemeError(f"bad typed tag {tag!r}")


def validate_tags(tags: tuple[str, ...] | list[str], scheme: str) -> None:
    """Check the IOB invariants: no I at position 0, no I after O, and for the
    typed scheme no I-X after a different class. Raises naming the position."""
    prev_head, prev_cls = "O", None
    for pos, tag in enumerate(tags):
        try:
            head, cls = _parse_tag(tag, scheme)
        except IOBSchemeError as exc:
            raise IOBSchemeError(f"position {pos}: {exc}") from None
        if head == "I":
            if pos == 0:
                raise IOBSchemeError(f"position {pos}: I tag at sentence start")
            if prev_head == "O":
                raise IOBSchemeError(f"position {pos}: I tag after O")
            if scheme == TYPED and cls is not prev_cls:
                raise IOBSchemeError(f"position {pos}: I-{cls} after {prev_cls}")
        prev_head, prev_cls = head, cls


def tags_for_mentions(
    tokens: tuple[Token, ...] | list[Token],
    mentions: list[Mention],
    scheme: str,
) -> tuple[str, ...]:
    """IOB tags for token-aligned mentions over the given tokens.

    A mention not aligned to token boundaries is expanded to the smallest
    covering token span, with a warning. Overlapping mentions (including
    after expansion) are an error.
    """
    ordered = sorted(mentions, key=lambda m: m[0])
    for (span_a, _), (span_b, _) in zip(ordered, ordered[1:]):
        if span_b[0] < span_a[1]:
            raise ValueError(f"overlapping mentions {span_a} and {span_b}")
    tags = ["O"] * len(tokens)
    last_covered = -1
    for (start, end), cls in ordered:
        if scheme == TYPED and cls is None:
            raise ValueError(f"mention {(start, end)} without a class in a typed corpus")
        cover = [k for k, t in enumerate(tokens) if t.start < end and t.end > start]
        if not cover:
            raise ValueError(f"mention {(start, end)} covers no tokens")
        first, last = cover[0], cover[-1]
        if tokens[first].start != start or tokens[last].end != end:
            warnings.warn(
                f"mention {(start, end)} not aligned to token boundaries; "
                f"expanded to ({tokens[first].start}, {tokens[last].end})",
                stacklevel=2,
            )
        if first <= last_covered:
            raise ValueError(f"mention {(start, end)} overlaps the previous mention after expansion")
        suffix = f"-{cls.value}" if scheme == TYPED else ""
        tags[first] = "B" + suffix
        for k in range(first + 1, last + 1):
            tags[k] = "I" + suffix
        last_covered = last
    return tuple(tags)


def to_iob(sentence: Sentence, mentions: list[Mention], scheme: str = TYPED) -> TaggedSentence:
    """Tokenize a sentence and encode its mentions as IOB tags."""
    tokens = tuple(tokenize(sentence.text))
    for (start, end), _ in mentions:
        if not (0 <= start < end <= len(sentence.text)):
            raise ValueError(f"mention span ({start}, {end}) out of bounds")
    tags = tags_for_mentions(tokens, mentions, scheme)
    return TaggedSentence(
        doc_id=sentence.doc_id,
        sentence_index=sentence.sentence_index,
        tokens=tokens,
        tags=tags,
        scheme=scheme,
    )


def from_iob(tagged: TaggedSentence) -> list[Mention]:
    """Decode IOB tags back into (char span, class) mentions, start-ordered."""
    validate_tags(tagged.tags, tagged.scheme)
    mentions: list[Mention] = []
    open_first: int | None = None
    open_cls: EntityClass | None = None
    for pos, tag in enumerate(tagged.tags):
        head, cls = _parse_tag(tag, tagged.scheme)
        if head != "I" and open_first is not None:
            last = pos - 1
            mentions.append(((tagged.tokens[open_first].start, tagged.tokens[last].end), open_cls))
            open_first = None
        if head == "B":
            open_first, open_cls = pos, cls
    if open_first is not None:
        mentions.append(((tagged.tokens[open_first].start, tagged.tokens[-1].end), open_cls))
    return mentions


def mentions_of_class(tagged: TaggedSentence, cls: EntityClass) -> list[Mention]:
    return [m for m in from_iob(tagged) if m[1] is cls]


def project_to_class(tagged: TaggedSentence, cls: EntityClass) -> TaggedSentence | None:
    """Untyped view of a typed sentence keeping only one class's mentions;
    None when the sentence has no mention of that class."""
    kept = [(span, None) for span, mcls in from_iob(tagged) if mcls is cls]
    if not kept:
        return None
    tags = tags_for_mentions(tagged.tokens, kept, UNTYPED)
    return TaggedSentence(
        doc_id=tagged.doc_id,
        sentence_index=tagged.sentence_index,
        tokens=tagged.tokens,
        tags=tags,
        scheme=UNTYPED,
    )


def _floor(value: float) -> int:
    # guard against float products landing a hair under an integer
    return math.floor(value + 1e-9)


def split_corpus(corpus: list[TaggedSentence], spec: SplitSpec) -> Split:
    """Seeded sentence-level shuffle split: the test fraction is set aside
    first, then the remainder is divided into train and validation."""
    if len(corpus) < 3:
        raise ValueError("corpus must have at least 3 sentences to split")
    shuffled = list(corpus)
    random.Random(spec.seed).shuffle(shuffled)
    n_test = _floor(len(shuffled) * spec.test_fraction)
    test = shuffled[:n_test]
    remainder = shuffled[n_test:]
    n_train = _floor(len(remainder) * (1 - spec.val_fraction_of_remainder))
    train = remainder[:n_train]
    validation = remainder[n_train:]
    return Split(train=train, validation=validation, test=test)


def per_class_split(split: Split, cls: EntityClass) -> Split:
    """Class-specific sub-corpus inheriting the aggregated split, so a
    sentence never lands in different partitions across classes."""

    def project(part: list[TaggedSentence]) -> list[TaggedSentence]:
        out = []
        for s in part:
            projected = project_to_class(s, cls)
            if projected is not None:
                out.append(projected)
        return out

    return Split(train=project(split.train), validation=project(split.validation), test=project(split.test))


def stats(corpus: list[TaggedSentence]) -> CorpusStats:
    """Sentence and B/I/O token counts for one corpus."""
    b = i = o = 0
    for s in corpus:
        for tag in s.tags:
            head, _ = _parse_tag(tag, s.scheme)
            if head == "B":
                b += 1
            elif head == "I":
                i += 1
            else:
                o += 1
    return CorpusStats(sentences=len(corpus), b_tokens=b, i_tokens=i, o_tokens=o)


def write_corpus(path: str | Path, corpus: list[TaggedSentence]) -> None:
    """CoNLL-style output: `# doc_id sentence_index` comment, one
    `TOKEN\\tTAG` per line, blank line between sentences."""
    lines: list[str] = []
    for s in corpus:
        lines.append(f"# {s.doc_id} {s.sentence_index}")
        for token, tag in zip(s.tokens, s.tags):
            lines.append(f"{token.text}\t{tag}")
        lines.append("")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_corpus(path: str | Path) -> list[TaggedSentence]:
    """Read a CoNLL-style corpus file.

    Char offsets are reconstructed by joining tokens with single spaces; the
    resulting spans index the detokenized sentence text.
    """
    path = Path(path)
    sentences: list[TaggedSentence] = []
    doc_id, sent_idx = "", 0
    words: list[str] = []
    tags: list[str] = []

    def flush() -> None:
        nonlocal words, tags
        if not words:
            return
        tokens: list[Token] = []
        cursor = 0
        for w in words:
            tokens.append(Token(w, cursor, cursor + len(w)))
            cursor += len(w) + 1
        scheme = TYPED if any("-" in t for t in tags) else UNTYPED
        try:
            sentences.append(
                TaggedSentence(
                    doc_id=doc_id,
                    sentence_index=sent_idx,
                    tokens=tuple(tokens),
                    tags=tuple(tags),
                    scheme=scheme,
                )
            )
        except IOBSchemeError as exc:
            raise CorpusFormatError(f"{path}: sentence {doc_id}[{sent_idx}]: {exc}") from None
        words, tags = [], []

    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) >= 2 and parts[-1].lstrip("-").isdigit():
                    doc_id, sent_idx = " ".join(parts[:-1]), int(parts[-1])
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise CorpusFormatError(f"{path}: line {lineno}: expected TOKEN\\tTAG")
            words.append(cols[0])
            tags.append(cols[1])
    flush()
    return sentences


def detokenized_text(tagged: TaggedSentence) -> str:
    """Sentence text consistent with the sentence's token spans."""
    if not tagged.tokens:
        return ""
    chars = [" "] * tagged.tokens[-1].end
    for t in tagged.tokens:
        chars[t.start : t.end] = t.text
    return "".join(chars)
