import itertools
import math
import random

import numpy as np
import pytest

from biotag.corpus import TaggedSentence
from biotag.tagger import (
    LABELS,
    DecodeResult,
    FeatureEncoder,
    ModelFormatError,
    TrainConfig,
    decode,
    extract_features,
    load_model,
    marginals,
    new_model,
    nll_and_gradient,
    random_search,
    save_model,
    span_confidence,
    train,
    viterbi,
    word_shape,
)
from biotag.textprep import Token


def tagged(words, tags, doc="d0", idx=0):
    tokens = []
    cursor = 0
    for w in words:
        tokens.append(Token(w, cursor, cursor + len(w)))
        cursor += len(w) + 1
    return TaggedSentence(
        doc_id=doc, sentence_index=idx, tokens=tuple(tokens), tags=tuple(tags), scheme="untyped"
    )


# ---------------------------------------------------------------------------
# independent oracle: score paths by direct summation, enumerate exhaustively


def emissions_of(model, tokens):
    """Re-derive per-token emission scores from the documented model layout."""
    em = np.zeros((len(tokens), 3))
    for pos in range(len(tokens)):
        for feat in extract_features(tokens, pos):
            idx = model.feature_index.get(feat)
            if idx is not None:
                em[pos] += model.weights[idx]
    return em


def oracle_path_score(model, em, path):
    score = model.start[path[0]] + em[0, path[0]]
    for t in range(1, len(path)):
        score += model.transitions[path[t - 1], path[t]] + em[t, path[t]]
    score += model.end[path[-1]]
    return score


def enumerate_paths(length):
    return list(itertools.product(range(3), repeat=length))


def oracle_decode(model, tokens):
    """Exhaustive argmax + enumeration posteriors."""
    em = emissions_of(model, tokens)
    paths = enumerate_paths(len(tokens))
    scores = np.array([oracle_path_score(model, em, p) for p in paths])
    finite = np.isfinite(scores)
    best_score = scores[finite].max()
    argmax_paths = [p for p, s in zip(paths, scores) if np.isfinite(s) and s == best_score]
    shift = scores[finite].max()
    weights = np.where(finite, np.exp(scores - shift), 0.0)
    z = weights.sum()
    log_z = math.log(z) + shift
    post = np.zeros((len(tokens), 3))
    for p, w in zip(paths, weights):
        for t, label in enumerate(p):
            post[t, label] += w
    post /= z
    return best_score, argmax_paths, log_z, post


def random_model(rng, vocab):
    sentences = [tagged(vocab, ["O"] * len(vocab))]
    encoder = FeatureEncoder.build(sentences)
    model = new_model(encoder.feature_index)
    np_rng = np.random.default_rng(rng.randrange(2**31))
    model.weights = np_rng.normal(0, 1.0, size=model.weights.shape)
    trans = np_rng.normal(0, 1.0, size=(3, 3))
    trans[2, 1] = -np.inf  # O -> I stays forbidden
    model.transitions = trans
    start = np_rng.normal(0, 1.0, size=3)
    start[1] = -np.inf
    model.start = start
    model.end = np_rng.normal(0, 1.0, size=3)
    return model


class TestFeatures:
    def test_shape(self):
        assert word_shape("HTA") == "AAA"
        assert word_shape("120/80") == "ddd/dd"
        assert word_shape("Dor") == "Aaa"

    def test_hta_at_start(self):
        feats = extract_features(["HTA", "controlada"], 0)
        assert "[+0]shape=AAA" in feats
        assert "[-1]<bos>" in feats
        assert "bias" in feats

    def test_digit_like_token(self):
        feats = extract_features(["120/80"], 0)
        assert "[+0]shape=ddd/dd" in feats

    def test_deterministic(self):
        tokens = ["dor", "lombar", "hoje"]
        assert extract_features(tokens, 1) == extract_features(list(tokens), 1)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            extract_features(["a"], 5)


class TestNLL:
    def test_zero_weights_loss_counts_valid_paths(self):
        # length 2: valid paths BB BI BO OB OO -> loss = log 5
        sent = tagged(["a", "b"], ["B", "I"])
        model = new_model(FeatureEncoder.build([sent]).feature_index)
        loss, _ = nll_and_gradient(model, [sent])
        assert loss == pytest.approx(math.log(5), abs=1e-12)

    def test_dominant_gold_weights_drive_loss_to_zero(self):
        sent = tagged(["dor"], ["B"])
        model = new_model(FeatureEncoder.build([sent]).feature_index)
        model.weights[:, 0] = 50.0  # every feature votes B
        loss, _ = nll_and_gradient(model, [sent])
        assert loss < 1e-9

    def test_loss_non_negative_without_l2(self):
        rng = random.Random(0)
        for _ in range(20):
            model = random_model(rng, ["a", "b", "c", "d"])
            words = [rng.choice(["a", "b", "c", "d"]) for _ in range(rng.randint(1, 5))]
            tags = ["B"] + [rng.choice(["B", "I", "O"]) for _ in words[1:]]
            # repair scheme violations
            for i in range(1, len(tags)):
                if tags[i] == "I" and tags[i - 1] == "O":
                    tags[i] = "O"
            sent = tagged(words, tags)
            loss, _ = nll_and_gradient(model, [sent])
            assert loss >= -1e-10

    def test_empty_batch_rejected(self):
        model = new_model({"bias": 0})
        with pytest.raises(ValueError):
            nll_and_gradient(model, [])


class TestGradient:
    def finite_difference_check(self, model, batch, n_weight_probes, rng, eps=1e-5):
        l2 = float(model.meta.get("l2", 0.0))
        loss, grads = nll_and_gradient(model, batch)

        def loss_at():
            return nll_and_gradient(model, batch)[0]

        checks = []
        coords = [(r, c) for r in range(model.weights.shape[0]) for c in range(3)]
        rng.shuffle(coords)
        for r, c in coords[:n_weight_probes]:
            model.weights[r, c] += eps
            up = loss_at()
            model.weights[r, c] -= 2 * eps
            down = loss_at()
            model.weights[r, c] += eps
            checks.append((grads.weights[r, c], (up - down) / (2 * eps)))
        for r in range(3):
            for c in range(3):
                if not np.isfinite(model.transitions[r, c]):
                    continue
                model.transitions[r, c] += eps
                up = loss_at()
                model.transitions[r, c] -= 2 * eps
                down = loss_at()
                model.transitions[r, c] += eps
                checks.append((grads.transitions[r, c], (up - down) / (2 * eps)))
        for vec, gvec in ((model.start, grads.start), (model.end, grads.end)):
            for r in range(3):
                if not np.isfinite(vec[r]):
                    continue
                vec[r] += eps
                up = loss_at()
                vec[r] -= 2 * eps
                down = loss_at()
                vec[r] += eps
                checks.append((gvec[r], (up - down) / (2 * eps)))
        worst = 0.0
        for analytic, numeric in checks:
            denom = max(abs(analytic), abs(numeric))
            if denom < 1e-4:
                # round-off in the difference quotient dominates near zero
                assert abs(analytic - numeric) < 1e-8
                continue
            worst = max(worst, abs(analytic - numeric) / denom)
        return worst

    def test_gradient_matches_finite_differences(self):
        rng = random.Random(123)
        vocab = ["a", "b", "c", "dd", "e5"]
        for _ in range(15):
            model = random_model(rng, vocab)
            model.meta["l2"] = rng.choice([0.0, 0.01])
            words = [rng.choice(vocab) for _ in range(rng.randint(1, 6))]
            tags = ["B" if rng.random() < 0.5 else "O"]
            for _ in words[1:]:
                prev = tags[-1]
                options = ["B", "O"] if prev == "O" else ["B", "I", "O"]
                tags.append(rng.choice(options))
            batch = [tagged(words, tags)]
            worst = self.finite_difference_check(model, batch, n_weight_probes=20, rng=rng)
            assert worst < 1e-4


class TestViterbi:
    def test_zero_weights_single_token_is_b(self):
        sent_words = ["dor"]
        model = new_model(FeatureEncoder.build([tagged(sent_words, ["O"])]).feature_index)
        result = viterbi(model, sent_words)
        assert result.path == ("B",)  # tie broken by label order B < I < O

    def test_empty_sentence(self):
        model = new_model({"bias": 0})
        result = decode(model, [])
        assert result.path == ()
        assert result.log_z == 0.0

    def test_matches_exhaustive_argmax(self):
        rng = random.Random(7)
        vocab = ["a", "b", "c", "d", "e"]
        for _ in range(60):
            model = random_model(rng, vocab)
            words = [rng.choice(vocab) for _ in range(rng.randint(1, 5))]
            result = decode(model, words)
            best_score, argmax_paths, log_z, post = oracle_decode(model, words)
            got = tuple(LABELS.index(l) for l in result.path)
            assert result.score == pytest.approx(best_score, abs=1e-9)
            assert got in argmax_paths
            if len(argmax_paths) == 1:
                assert got == argmax_paths[0]
            assert result.log_z == pytest.approx(log_z, abs=1e-9)
            assert result.score <= result.log_z + 1e-12

    def test_hard_constraints_never_violated(self):
        rng = random.Random(11)
        vocab = ["a", "b", "c"]
        for _ in range(100):
            model = random_model(rng, vocab)
            words = [rng.choice(vocab) for _ in range(rng.randint(1, 6))]
            path = decode(model, words).path
            assert path[0] != "I"
            for prev, cur in zip(path, path[1:]):
                assert not (prev == "O" and cur == "I")


class TestMarginals:
    def test_zero_weights_single_token_uniform_over_allowed(self):
        model = new_model(FeatureEncoder.build([tagged(["x"], ["O"])]).feature_index)
        m = marginals(model, ["x"])
        assert m[0, 0] == pytest.approx(0.5, abs=1e-12)  # B
        assert m[0, 1] == pytest.approx(0.0, abs=1e-12)  # I unreachable
        assert m[0, 2] == pytest.approx(0.5, abs=1e-12)  # O

    def test_rows_sum_to_one(self):
        rng = random.Random(13)
        vocab = ["a", "b", "c"]
        for _ in range(50):
            model = random_model(rng, vocab)
            words = [rng.choice(vocab) for _ in range(rng.randint(1, 6))]
            m = marginals(model, words)
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-9)

    def test_matches_enumeration(self):
        rng = random.Random(17)
        vocab = ["a", "b", "c", "d"]
        for _ in range(50):
            model = random_model(rng, vocab)
            words = [rng.choice(vocab) for _ in range(rng.randint(1, 5))]
            _, _, _, post = oracle_decode(model, words)
            np.testing.assert_allclose(marginals(model, words), post, atol=1e-9)

    def test_strong_weights_concentrate(self):
        sent = tagged(["dor", "lombar"], ["B", "I"])
        model = new_model(FeatureEncoder.build([sent]).feature_index)
        model.weights[:, 0] = 0.0
        for pos, label in ((0, 0), (1, 1)):
            for feat in extract_features(["dor", "lombar"], pos):
                model.weights[model.feature_index[feat], label] += 10.0
        m = marginals(model, ["dor", "lombar"])
        assert m[0, 0] > 0.999
        assert m[1, 1] > 0.999

    def test_decoded_path_probability_in_unit_interval(self):
        rng = random.Random(19)
        model = random_model(rng, ["a", "b"])
        result = decode(model, ["a", "b", "a"])
        p = math.exp(result.score - result.log_z)
        assert 0.0 < p <= 1.0


class TestSpanConfidence:
    def test_single_token_equals_marginal(self):
        rng = random.Random(23)
        model = random_model(rng, ["a", "b"])
        result = decode(model, ["a", "b"])
        idx = LABELS.index(result.path[0])
        assert span_confidence(result, (0, 1)) == pytest.approx(result.marginals[0, idx])

    def test_two_token_mean(self):
        result = DecodeResult(
            path=("B", "I"),
            score=0.0,
            log_z=0.0,
            marginals=np.array([[0.8, 0.1, 0.1], [0.2, 0.6, 0.2]]),
        )
        assert span_confidence(result, (0, 2)) == pytest.approx(0.7)

    def test_certain_model_scores_one(self):
        result = DecodeResult(
            path=("B",), score=0.0, log_z=0.0, marginals=np.array([[1.0, 0.0, 0.0]])
        )
        assert span_confidence(result, (0, 1)) == 1.0

    def test_bad_range(self):
        result = DecodeResult(path=("B",), score=0.0, log_z=0.0, marginals=np.ones((1, 3)) / 3)
        with pytest.raises(ValueError):
            span_confidence(result, (0, 2))


def separable_corpus():
    """Trigger tokens make the tagging decision locally unambiguous."""
    drugs = ["morfina", "tramadol", "omeprazol", "cisplatina"]
    fillers = ["doente", "iniciou", "hoje", "mantém", "plano", "sem"]
    train_set, val_set = [], []
    idx = 0
    for rep in range(6):
        for d_i, drug in enumerate(drugs):
            for f_i in range(3):
                words = [fillers[(rep + f_i) % len(fillers)], drug, fillers[(rep + f_i + 1) % len(fillers)], f"x{idx % 7}"]
                tags = ["O", "B", "O", "O"]
                sent = tagged(words, tags, idx=idx)
                idx += 1
                (val_set if (rep == 5) else train_set).append(sent)
    return train_set, val_set


class TestTrain:
    def test_separable_corpus_reaches_perfect_f1(self):
        train_set, val_set = separable_corpus()
        cfg = TrainConfig(learning_rate=0.1, batch_size=8, epochs=30, seed=1)
        model, history = train(train_set, val_set, cfg)
        assert model.meta["best_val_f1"] == 1.0
        assert any(h.val_f1 == 1.0 for h in history)

    def test_best_epoch_is_argmax_of_history(self):
        train_set, val_set = separable_corpus()
        cfg = TrainConfig(learning_rate=0.03, batch_size=16, epochs=8, seed=2)
        model, history = train(train_set, val_set, cfg)
        f1s = [h.val_f1 for h in history]
        assert f1s[model.meta["best_epoch"]] == max(f1s)
        assert model.meta["best_epoch"] == f1s.index(max(f1s))

    def test_deterministic_given_seed(self):
        train_set, val_set = separable_corpus()
        cfg = TrainConfig(learning_rate=0.05, batch_size=4, epochs=3, seed=5)
        model_a, _ = train(train_set, val_set, cfg)
        model_b, _ = train(train_set, val_set, cfg)
        assert np.array_equal(model_a.weights, model_b.weights)
        assert np.array_equal(model_a.transitions, model_b.transitions)

    def test_nll_strictly_decreases_over_first_epoch(self):
        train_set, val_set = separable_corpus()
        model0 = new_model(FeatureEncoder.build(train_set).feature_index)
        before, _ = nll_and_gradient(model0, train_set)
        cfg = TrainConfig(learning_rate=0.01, batch_size=32, epochs=1, seed=0)
        model1, _ = train(train_set, val_set, cfg)
        model1.meta["l2"] = 0.0
        after, _ = nll_and_gradient(model1, train_set)
        assert after < before

    def test_typed_corpus_rejected(self):
        bad = TaggedSentence(
            doc_id="d",
            sentence_index=0,
            tokens=(Token("a", 0, 1),),
            tags=("B-Drug",),
            scheme="typed",
        )
        with pytest.raises(ValueError, match="untyped"):
            train([bad], [bad], TrainConfig())


class TestRandomSearch:
    def test_same_seed_same_configs(self):
        train_set, val_set = separable_corpus()
        space = {"learning_rate": (0.05, 0.1), "batch_size": (8, 16), "l2": (0.0, 0.001)}
        a = random_search(train_set, val_set, k=3, seed=9, space=space, epochs=2)
        b = random_search(train_set, val_set, k=3, seed=9, space=space, epochs=2)
        assert [t.config for t in a.trials] == [t.config for t in b.trials]

    def test_k_exceeding_space_samples_whole_space(self):
        train_set, val_set = separable_corpus()
        space = {"learning_rate": (0.1,), "batch_size": (8, 16), "l2": (0.0,)}
        result = random_search(train_set, val_set, k=50, space=space, seed=0, epochs=1)
        assert len(result.trials) == 2

    def test_best_is_max_over_trials(self):
        train_set, val_set = separable_corpus()
        space = {"learning_rate": (0.001, 0.1), "batch_size": (8,), "l2": (0.0, 1.0)}
        result = random_search(train_set, val_set, k=4, space=space, seed=3, epochs=3)
        best_f1 = max(t.val_f1 for t in result.trials)
        assert result.trials[result.best_index].val_f1 == best_f1
        assert result.best_config == result.trials[result.best_index].config

    def test_k1_single_trial(self):
        train_set, val_set = separable_corpus()
        result = random_search(train_set, val_set, k=1, seed=0, epochs=1)
        assert len(result.trials) == 1


class TestPersistence:
    def test_round_trip(self, tmp_path):
        train_set, val_set = separable_corpus()
        cfg = TrainConfig(learning_rate=0.1, batch_size=8, epochs=2, seed=1)
        model, _ = train(train_set, val_set, cfg)
        path = tmp_path / "model.json"
        save_model(model, path)
        back = load_model(path)
        assert np.array_equal(back.weights, model.weights)
        assert np.array_equal(back.transitions, model.transitions)
        assert back.feature_index == model.feature_index
        assert back.meta["best_epoch"] == model.meta["best_epoch"]
        words = ["doente", "morfina", "hoje"]
        assert decode(back, words).path == decode(model, words).path

    def test_unknown_version_fails_loudly(self, tmp_path):
        train_set, val_set = separable_corpus()
        model, _ = train(train_set, val_set, TrainConfig(epochs=1))
        path = tmp_path / "model.json"
        save_model(model, path)
        import json

        payload = json.loads(path.read_text())
        payload["version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_not_a_model_file(self, tmp_path):
        path = tmp_path / "nope.json"
        path.write_text("{}")
        with pytest.raises(ModelFormatError):
            load_model(path)
