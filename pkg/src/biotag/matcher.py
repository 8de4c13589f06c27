"""Fast approximate dictionary matching over character n-grams.

Terms are indexed by their padded character n-gram sets. Lookups prune
candidates with size bounds and a minimum-overlap count, then verify the
exact similarity, so pruning can only speed things up, never change results.
Sentence scanning slides token windows over the text, queries each window,
and resolves overlapping hits (longer span, then higher score, then smaller
start offset).
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from collections import Counter
from dataclasses import dataclass, replace

from .kb import EntityClass, KnowledgeBase, class_of
from .textprep import NormalizedSentence, Token, is_punct_token, nfkc, tokenize

MEASURES = ("jaccard", "cosine", "dice", "overlap")

# slack applied before ceil/floor so float noise can only widen bounds
_EPS = 1e-9


@dataclass(frozen=True)
class MatcherConfig:
    n: int = 3
    measure: str = "jaccard"
    alpha: float = 0.7
    max_window: int = 7
    tui_filter: frozenset[str] | None = None
    language: str | None = "POR"

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n-gram size must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.max_window < 1:
            raise ValueError("max_window must be >= 1")
        if self.measure not in MEASURES:
            raise ValueError(f"unknown measure {self.measure!r}")


@dataclass(frozen=True)
class IndexedTerm:
    term: str
    grams: frozenset[str]
    size: int
    cui: str
    tuis: frozenset[str]


@dataclass(frozen=True)
class LookupHit:
    term: str
    cui: str
    tuis: frozenset[str]
    score: float


@dataclass(frozen=True)
class Match:
    """A dictionary hit inside a sentence, in original-text offsets."""

    start: int
    end: int
    window_text: str
    matched_term: str
    cui: str
    tuis: frozenset[str]
    score: float


def ngrams(s: str, n: int) -> set[str]:
    """Character n-grams of s padded with n-1 boundary markers on each side."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not s:
        return set()
    padded = "#" * (n - 1) + s + "#" * (n - 1)
    return {padded[i : i + n] for i in range(len(padded) - n + 1)}


def similarity(a: set[str] | frozenset[str], b: set[str] | frozenset[str], measure: str = "jaccard") -> float:
    """Set similarity in [0, 1]; two empty sets score 1.0 by convention."""
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    c = len(a & b)
    x, y = len(a), len(b)
    if measure == "jaccard":
        return c / (x + y - c)
    if measure == "cosine":
        return c / math.sqrt(x * y)
    if measure == "dice":
        return 2 * c / (x + y)
    if measure == "overlap":
        return c / min(x, y)
    raise ValueError(f"unknown measure {measure!r}")


def normalize_term(s: str) -> str:
    """Shared query/term normalization: NFKC, lowercase, collapsed whitespace."""
    return " ".join(nfkc(s).lower().split())


class NGramIndex:
    """Immutable n-gram inverted index over normalized dictionary terms."""

    def __init__(self, terms: list[IndexedTerm], n: int, measure: str):
        self.n = n
        self.measure = measure
        self.terms = terms
        self.max_size = max((t.size for t in terms), default=0)
        postings: dict[str, list[tuple[int, int]]] = {}
        for tid, t in enumerate(terms):
            for gram in t.grams:
                postings.setdefault(gram, []).append((t.size, tid))
        for plist in postings.values():
            plist.sort()
        self.postings = postings
        self._sizes = {gram: [size for size, _ in plist] for gram, plist in postings.items()}

    def __len__(self) -> int:
        return len(self.terms)


def build_index(kb: KnowledgeBase, cfg: MatcherConfig) -> NGramIndex:
    """Index all KB terms matching the config's language and TUI filter.

    One entry per distinct (normalized term, cui); when a TUI filter is set,
    concepts without a relevant TUI are skipped and stored TUI sets are
    restricted to the filter.
    """
    if len(kb) == 0:
        raise ValueError("empty knowledge base")
    terms: list[IndexedTerm] = []
    seen: set[tuple[str, str]] = set()
    for surface, _lang, concept in kb.iter_terms(language=cfg.language):
        tuis = concept.tuis
        if cfg.tui_filter is not None:
            tuis = tuis & cfg.tui_filter
            if not tuis:
                continue
        norm = normalize_term(surface)
        if not norm or (norm, concept.cui) in seen:
            continue
        seen.add((norm, concept.cui))
        grams = frozenset(ngrams(norm, cfg.n))
        terms.append(IndexedTerm(term=norm, grams=grams, size=len(grams), cui=concept.cui, tuis=tuis))
    return NGramIndex(terms, n=cfg.n, measure=cfg.measure)


def _size_bounds(measure: str, alpha: float, x: int, max_size: int) -> tuple[int, int]:
    if measure == "jaccard":
        lo, hi = alpha * x, x / alpha
    elif measure == "cosine":
        lo, hi = alpha * alpha * x, x / (alpha * alpha)
    elif measure == "dice":
        lo, hi = alpha * x / (2 - alpha), (2 - alpha) * x / alpha
    else:  # overlap: candidate size is unbounded
        return 1, max_size
    return max(1, math.ceil(lo - _EPS)), min(max_size, math.floor(hi + _EPS))


def _min_overlap(measure: str, alpha: float, x: int, y: int) -> int:
    if measure == "jaccard":
        tau = alpha * (x + y) / (1 + alpha)
    elif measure == "cosine":
        tau = alpha * math.sqrt(x * y)
    elif measure == "dice":
        tau = alpha * (x + y) / 2
    else:
        tau = alpha * min(x, y)
    return max(1, math.ceil(tau - _EPS))


def lookup(index: NGramIndex, query: str, cfg: MatcherConfig) -> list[LookupHit]:
    """All indexed terms with similarity(query, term) >= alpha, best first.

    Candidate generation prunes by term-size bounds and the minimum-overlap
    count for the configured measure; every candidate is then verified
    against the exact similarity, so the result equals a brute-force scan.
    """
    if cfg.n != index.n or cfg.measure != index.measure:
        raise ValueError(
            f"index built with n={index.n}/{index.measure}, queried with n={cfg.n}/{cfg.measure}"
        )
    q = frozenset(ngrams(normalize_term(query), cfg.n))
    x = len(q)
    if x == 0:
        return []
    lo, hi = _size_bounds(cfg.measure, cfg.alpha, x, index.max_size)
    if lo > hi:
        return []
    counts: Counter[int] = Counter()
    for gram in q:
        plist = index.postings.get(gram)
        if not plist:
            continue
        sizes = index._sizes[gram]
        a = bisect_left(sizes, lo)
        b = bisect_right(sizes, hi)
        for _, tid in plist[a:b]:
            counts[tid] += 1
    hits: list[LookupHit] = []
    for tid, shared in counts.items():
        t = index.terms[tid]
        if shared < _min_overlap(cfg.measure, cfg.alpha, x, t.size):
            continue
        score = similarity(q, t.grams, cfg.measure)
        if score >= cfg.alpha:
            hits.append(LookupHit(term=t.term, cui=t.cui, tuis=t.tuis, score=score))
    hits.sort(key=lambda h: (-h.score, h.term, h.cui))
    return hits


def brute_force_lookup(index: NGramIndex, query: str, cfg: MatcherConfig) -> list[LookupHit]:
    """Reference scan over every indexed term; the oracle `lookup` must equal."""
    if cfg.n != index.n or cfg.measure != index.measure:
        raise ValueError("index/config mismatch")
    q = frozenset(ngrams(normalize_term(query), cfg.n))
    hits = [
        LookupHit(term=t.term, cui=t.cui, tuis=t.tuis, score=similarity(q, t.grams, cfg.measure))
        for t in index.terms
    ]
    hits = [h for h in hits if h.score >= cfg.alpha]
    hits.sort(key=lambda h: (-h.score, h.term, h.cui))
    return hits


def _trim_window(tokens: list[Token]) -> list[Token]:
    a, b = 0, len(tokens)
    while a < b and is_punct_token(tokens[a].text):
        a += 1
    while b > a and is_punct_token(tokens[b - 1].text):
        b -= 1
    return tokens[a:b]


def scan_sentence(sentence: NormalizedSentence, index: NGramIndex, cfg: MatcherConfig) -> list[Match]:
    """Dictionary matches for all token windows of length 1..max_window.

    Windows are trimmed of boundary punctuation before querying; overlapping
    hits are resolved longest-span first, then highest score, then smallest
    start offset. Spans are reported in original-text offsets.
    """
    tokens = tokenize(sentence.text)
    best: dict[tuple[int, int], Match] = {}
    queried: set[tuple[int, int]] = set()
    for i in range(len(tokens)):
        for w in range(1, cfg.max_window + 1):
            j = i + w
            if j > len(tokens):
                break
            window = _trim_window(tokens[i:j])
            if not window:
                continue
            span = (window[0].start, window[-1].end)
            if span in queried:
                continue
            queried.add(span)
            query = " ".join(normalize_term(t.text) for t in window)
            hits = lookup(index, query, cfg)
            if cfg.tui_filter is not None:
                hits = [
                    replace(h, tuis=h.tuis & cfg.tui_filter) for h in hits if h.tuis & cfg.tui_filter
                ]
            if not hits:
                continue
            top = hits[0]
            ostart, oend = sentence.map_span(*span)
            match = Match(
                start=ostart,
                end=oend,
                window_text=sentence.source.text[ostart:oend],
                matched_term=top.term,
                cui=top.cui,
                tuis=top.tuis,
                score=top.score,
            )
            key = (ostart, oend)
            if key not in best or match.score > best[key].score:
                best[key] = match
    candidates = sorted(best.values(), key=lambda m: (-(m.end - m.start), -m.score, m.start))
    chosen: list[Match] = []
    for cand in candidates:
        if all(cand.end <= c.start or cand.start >= c.end for c in chosen):
            chosen.append(cand)
    chosen.sort(key=lambda m: m.start)
    return chosen


def match_class(match: Match, groups: dict[str, EntityClass]) -> EntityClass | None:
    """Entity class of a match: the highest-priority class among its mapped TUIs
    (Disease > Procedure > Drug), None when no TUI is mapped."""
    classes = {class_of(t, groups) for t in match.tuis}
    classes.discard(None)
    for cls in (EntityClass.DISEASE, EntityClass.PROCEDURE, EntityClass.DRUG):
        if cls in classes:
            return cls
    return None
