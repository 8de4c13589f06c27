import random

import pytest

from biotag.kb import EntityClass
from biotag.metrics import evaluate_run, relaxed_prf, restrict_to_class, strict_prf

P, D, Z = EntityClass.PROCEDURE, EntityClass.DRUG, EntityClass.DISEASE


def ms(**kwargs):
    """MentionSet shorthand: ms(s0=[((0, 5), D)])"""
    return dict(kwargs)


class TestStrict:
    def test_perfect(self):
        gold = ms(s0=[((0, 5), D), ((8, 12), Z)])
        prf = strict_prf(gold, dict(gold))
        assert (prf.precision, prf.recall, prf.f1) == (1.0, 1.0, 1.0)

    def test_shifted_span_scores_zero(self):
        gold = ms(s0=[((0, 5), D)])
        pred = ms(s0=[((1, 6), D)])
        prf = strict_prf(gold, pred)
        assert (prf.precision, prf.recall, prf.f1) == (0.0, 0.0, 0.0)

    def test_two_of_three(self):
        a, b, c, d = ((0, 1), D), ((2, 3), D), ((4, 5), D), ((6, 7), D)
        prf = strict_prf(ms(s0=[a, b, c]), ms(s0=[a, b, d]))
        assert prf.precision == pytest.approx(2 / 3)
        assert prf.recall == pytest.approx(2 / 3)
        assert prf.f1 == pytest.approx(2 / 3)
        assert prf.counts == {"tp": 2, "fp": 1, "fn": 1}

    def test_class_must_match(self):
        prf = strict_prf(ms(s0=[((0, 5), D)]), ms(s0=[((0, 5), Z)]))
        assert prf.f1 == 0.0

    def test_empty_both_sides(self):
        prf = strict_prf({}, {})
        assert (prf.precision, prf.recall) == (1.0, 1.0)

    def test_empty_pred_nonempty_gold(self):
        prf = strict_prf(ms(s0=[((0, 5), D)]), {})
        assert (prf.precision, prf.recall) == (0.0, 0.0)

    def test_empty_gold_nonempty_pred(self):
        prf = strict_prf({}, ms(s0=[((0, 5), D)]))
        assert (prf.precision, prf.recall) == (0.0, 0.0)


class TestRelaxed:
    def test_partial_overlap_counts(self):
        gold = ms(s0=[((0, 10), Z)])
        pred = ms(s0=[((4, 8), Z)])
        relaxed = relaxed_prf(gold, pred)
        strict = strict_prf(gold, pred)
        assert (relaxed.precision, relaxed.recall, relaxed.f1) == (1.0, 1.0, 1.0)
        assert strict.f1 == 0.0

    def test_wide_pred_covering_two_gold(self):
        gold = ms(s0=[((0, 5), Z), ((8, 12), Z)])
        pred = ms(s0=[((0, 12), Z)])
        prf = relaxed_prf(gold, pred)
        assert prf.precision == 1.0
        assert prf.recall == 1.0
        assert prf.counts == {
            "matched_pred": 1,
            "unmatched_pred": 0,
            "recalled_gold": 2,
            "missed_gold": 0,
        }

    def test_overlap_with_wrong_class_not_matched(self):
        prf = relaxed_prf(ms(s0=[((0, 10), Z)]), ms(s0=[((4, 8), D)]))
        assert prf.f1 == 0.0

    def test_adjacent_spans_do_not_overlap(self):
        prf = relaxed_prf(ms(s0=[((0, 5), Z)]), ms(s0=[((5, 9), Z)]))
        assert prf.f1 == 0.0


def random_mention_sets(rng, n_sentences=6):
    classes = [P, D, Z]

    def one_side():
        out = {}
        for i in range(n_sentences):
            mentions = []
            pos = 0
            while pos < 30 and rng.random() < 0.6:
                start = pos + rng.randint(0, 3)
                end = start + rng.randint(1, 5)
                mentions.append(((start, end), rng.choice(classes)))
                pos = end + rng.randint(0, 2)
            if mentions:
                out[f"s{i}"] = mentions
        return out

    return one_side(), one_side()


class TestProperties:
    def test_relaxed_dominates_strict(self):
        rng = random.Random(3)
        for _ in range(300):
            gold, pred = random_mention_sets(rng)
            s, r = strict_prf(gold, pred), relaxed_prf(gold, pred)
            assert r.precision >= s.precision
            assert r.recall >= s.recall

    def test_swap_symmetry(self):
        rng = random.Random(4)
        for _ in range(200):
            gold, pred = random_mention_sets(rng)
            for fn in (strict_prf, relaxed_prf):
                fwd, back = fn(gold, pred), fn(pred, gold)
                assert fwd.precision == pytest.approx(back.recall)
                assert fwd.recall == pytest.approx(back.precision)

    def test_sentence_reordering_invariant(self):
        rng = random.Random(5)
        gold, pred = random_mention_sets(rng, n_sentences=8)
        renamed_gold = {f"z{k}": v for k, v in gold.items()}
        renamed_pred = {f"z{k}": v for k, v in pred.items()}
        assert strict_prf(gold, pred) == strict_prf(renamed_gold, renamed_pred)
        assert relaxed_prf(gold, pred) == relaxed_prf(renamed_gold, renamed_pred)


class TestEvaluateRun:
    def test_perfect_run_all_hundred(self):
        gold = ms(s0=[((0, 5), P)], s1=[((0, 4), D)], s2=[((2, 8), Z)])
        report = evaluate_run(gold, {"ner_umls": dict(gold)})
        for row in ("Procedures", "Drugs", "Diseases", "Aggregated"):
            cell = report.cells[(row, "ner_umls")]
            assert cell["strict"].f1 == 1.0
            assert cell["relaxed"].f1 == 1.0

    def test_empty_predictions_zero_recall(self):
        gold = ms(s0=[((0, 5), P)], s1=[((0, 4), D)])
        report = evaluate_run(gold, {"ner_only": {}})
        assert report.cells[("Aggregated", "ner_only")]["strict"].recall == 0.0

    def test_unknown_ids_rejected(self):
        gold = ms(s0=[((0, 5), P)])
        with pytest.raises(ValueError, match="unknown sentence ids"):
            evaluate_run(gold, {"m": ms(zz=[((0, 5), P)])})

    def test_restrict_to_class(self):
        both = ms(s0=[((0, 5), P), ((6, 9), D)])
        only_p = restrict_to_class(both, P)
        assert only_p == ms(s0=[((0, 5), P)])

    def test_percent_rendering(self):
        from biotag.report import format_report_text

        gold = ms(**{f"s{i}": [((0, 5), D)] for i in range(20)})
        pred = {f"s{i}": [((0, 5), D)] for i in range(19)}
        pred["s19"] = [((1, 5), D)]
        report = evaluate_run(gold, {"ner_umls": pred})
        text = format_report_text(report)
        assert "95.0" in text  # 19/20 rendered to one decimal
