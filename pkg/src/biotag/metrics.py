"""Mention-level strict and relaxed precision/recall/F1.

Strict scoring counts exact (span, class) matches. Relaxed scoring counts a
prediction as matched when it overlaps at least one gold mention of the same
class, and a gold mention as recalled when at least one same-class
prediction overlaps it; there is no one-to-one constraint. When a side is
empty, 0/0 ratios resolve to 1 if the other side is also empty, else 0.
"""

from __future__ import annotations

from dataclasses import dataclass

from .kb import EntityClass
from .corpus import Mention

#: sentence id -> non-overlapping mention list
MentionSet = dict[str, list[Mention]]


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    counts: dict[str, int]


def _ratio(num: int, den: int, other_empty: bool) -> float:
    if den == 0:
        return 1.0 if other_empty else 0.0
    return num / den


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def strict_prf(gold: MentionSet, pred: MentionSet) -> PRF:
    """Exact span+class matching."""
    tp = 0
    n_gold = sum(len(v) for v in gold.values())
    n_pred = sum(len(v) for v in pred.values())
    for sid, pmentions in pred.items():
        gset = set(gold.get(sid, []))
        tp += sum(1 for m in pmentions if m in gset)
    p = _ratio(tp, n_pred, n_gold == 0)
    r = _ratio(tp, n_gold, n_pred == 0)
    return PRF(p, r, _f1(p, r), {"tp": tp, "fp": n_pred - tp, "fn": n_gold - tp})


def relaxed_prf(gold: MentionSet, pred: MentionSet) -> PRF:
    """Same-class overlap matching, counted per mention on each side."""
    matched_pred = 0
    recalled_gold = 0
    n_gold = sum(len(v) for v in gold.values())
    n_pred = sum(len(v) for v in pred.values())
    ids = set(gold) | set(pred)
    for sid in ids:
        gmentions = gold.get(sid, [])
        pmentions = pred.get(sid, [])
        for pspan, pcls in pmentions:
            if any(gcls == pcls and _overlaps(pspan, gspan) for gspan, gcls in gmentions):
                matched_pred += 1
        for gspan, gcls in gmentions:
            if any(pcls == gcls and _overlaps(gspan, pspan) for pspan, pcls in pmentions):
                recalled_gold += 1
    p = _ratio(matched_pred, n_pred, n_gold == 0)
    r = _ratio(recalled_gold, n_gold, n_pred == 0)
    return PRF(
        p,
        r,
        _f1(p, r),
        {
            "matched_pred": matched_pred,
            "unmatched_pred": n_pred - matched_pred,
            "recalled_gold": recalled_gold,
            "missed_gold": n_gold - recalled_gold,
        },
    )


def restrict_to_class(mentions: MentionSet, cls: EntityClass) -> MentionSet:
    out: MentionSet = {}
    for sid, lst in mentions.items():
        kept = [m for m in lst if m[1] is cls]
        if kept:
            out[sid] = kept
    return out


#: report row order, matching the result-table layout
ROW_ORDER = ("Procedures", "Drugs", "Diseases", "Aggregated")

_ROW_CLASS = {
    "Procedures": EntityClass.PROCEDURE,
    "Drugs": EntityClass.DRUG,
    "Diseases": EntityClass.DISEASE,
}


@dataclass(frozen=True)
class EvaluationReport:
    """Strict+relaxed PRF per class row and model setting (mode)."""

    modes: tuple[str, ...]
    cells: dict[tuple[str, str], dict[str, PRF]]  # (row, mode) -> {"strict": .., "relaxed": ..}
    footer: str = "Aggregated row pools mentions across classes (micro)."


def evaluate_run(gold: MentionSet, predictions: dict[str, MentionSet]) -> EvaluationReport:
    """Score one or more prediction runs against a typed gold mention set.

    ``predictions`` maps a model-setting name to its mention set; ids absent
    from a side count as empty sentences.
    """
    pred_ids = {sid for mset in predictions.values() for sid in mset}
    unknown = pred_ids - set(gold)
    if unknown:
        raise ValueError(f"predictions reference unknown sentence ids: {sorted(unknown)[:5]}")
    cells: dict[tuple[str, str], dict[str, PRF]] = {}
    for row in ROW_ORDER:
        if row == "Aggregated":
            gold_view = gold
        else:
            gold_view = restrict_to_class(gold, _ROW_CLASS[row])
        for mode, pred in predictions.items():
            pred_view = pred if row == "Aggregated" else restrict_to_class(pred, _ROW_CLASS[row])
            cells[(row, mode)] = {
                "strict": strict_prf(gold_view, pred_view),
                "relaxed": relaxed_prf(gold_view, pred_view),
            }
    return EvaluationReport(modes=tuple(predictions), cells=cells)
