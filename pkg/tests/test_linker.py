import numpy as np
import pytest

from biotag.kb import DEFAULT_SEMANTIC_GROUPS, Concept, EntityClass, KnowledgeBase, class_of
from biotag.linker import (
    CLASS_PRIORITY,
    CandidateSpan,
    LinkConfig,
    PipelineAssets,
    TokenizationMismatch,
    link,
    merge_predictions,
    predict,
    predict_text,
)
from biotag.matcher import MatcherConfig, build_index
from biotag.tagger import DecodeResult, TrainConfig, train
from biotag.corpus import to_iob
from biotag.textprep import Glossary, Sentence, Token, tokenize

P, D, Z = EntityClass.PROCEDURE, EntityClass.DRUG, EntityClass.DISEASE


def make_kb(entries):
    concepts = {}
    for cui, terms, tuis in entries:
        if isinstance(terms, str):
            terms = [terms]
        concepts[cui] = Concept(
            cui=cui, terms=tuple((t, "POR") for t in terms), tuis=frozenset(tuis)
        )
    return KnowledgeBase(concepts=concepts)


TOY_KB = make_kb(
    [
        ("C0000001", "paracetamol", {"T121"}),
        ("C0000002", "morfina", {"T121"}),
        ("C0000003", "colonoscopia", {"T060"}),
        ("C0000004", "anemia", {"T047"}),
        ("C0000005", "ambivalente", {"T121", "T047"}),  # maps to two classes
    ]
)


def assets_without_models(alpha=0.7, threshold=0.9):
    cfg = MatcherConfig(alpha=alpha, tui_filter=frozenset(DEFAULT_SEMANTIC_GROUPS))
    return PipelineAssets(
        index=build_index(TOY_KB, cfg),
        matcher_cfg=cfg,
        groups=dict(DEFAULT_SEMANTIC_GROUPS),
        glossary=Glossary({}),
        models=None,
        link_cfg=LinkConfig(threshold=threshold),
    )


def result_for(path, confidence=0.9):
    marg = np.full((len(path), 3), 0.01)
    for t, label in enumerate(path):
        marg[t, {"B": 0, "I": 1, "O": 2}[label]] = confidence
    return DecodeResult(path=tuple(path), score=0.0, log_z=0.0, marginals=marg)


class TestMergePredictions:
    def test_disjoint_mentions_kept(self):
        text = "morfina e anemia"
        tokens = tokenize(text)
        decodes = {
            D: result_for(["B", "O", "O"]),
            Z: result_for(["O", "O", "B"]),
        }
        merged = merge_predictions(tokens, decodes, text)
        assert [(c.start, c.end, c.entity_class) for c in merged] == [
            (0, 7, D),
            (10, 16, Z),
        ]

    def test_same_span_highest_confidence_wins(self):
        text = "morfina hoje"
        tokens = tokenize(text)
        decodes = {
            D: result_for(["B", "O"], confidence=0.9),
            Z: result_for(["B", "O"], confidence=0.7),
        }
        merged = merge_predictions(tokens, decodes, text)
        assert len(merged) == 1
        assert merged[0].entity_class is D
        assert merged[0].confidence == pytest.approx(0.9)

    def test_nested_equal_confidence_longer_wins(self):
        text = "dor lombar"
        tokens = tokenize(text)
        decodes = {
            Z: result_for(["B", "I"], confidence=0.8),
            P: result_for(["B", "O"], confidence=0.8),
        }
        merged = merge_predictions(tokens, decodes, text)
        assert len(merged) == 1
        assert (merged[0].start, merged[0].end) == (0, 10)
        assert merged[0].entity_class is Z

    def test_tokenization_mismatch(self):
        text = "a b"
        tokens = tokenize(text)
        with pytest.raises(TokenizationMismatch):
            merge_predictions(tokens, {D: result_for(["B"])}, text)

    def test_output_non_overlapping(self):
        text = "a b c d"
        tokens = tokenize(text)
        decodes = {
            D: result_for(["B", "I", "O", "O"], confidence=0.6),
            Z: result_for(["O", "B", "I", "O"], confidence=0.8),
            P: result_for(["O", "O", "O", "B"], confidence=0.5),
        }
        merged = merge_predictions(tokens, decodes, text)
        for a, b in zip(merged, merged[1:]):
            assert a.end <= b.start


class TestLink:
    def cand(self, text, cls=D, confidence=0.8):
        return CandidateSpan(
            start=0, end=len(text), text=text, entity_class=cls, confidence=confidence, source=cls.value
        )

    def test_unknown_span_discarded(self):
        assert link(self.cand("quimioterapia"), assets_without_models()) is None

    def test_toy_drug_linked(self):
        entity = link(self.cand("paracetamol"), assets_without_models())
        assert entity is not None
        assert entity.cui == "C0000001"
        assert entity.tui == "T121"
        assert entity.entity_class is D
        assert entity.similarity == 1.0

    def test_multi_tui_source_match_rule(self):
        entity = link(self.cand("ambivalente", cls=D), assets_without_models())
        assert entity.entity_class is D
        assert entity.tui == "T121"

    def test_multi_tui_priority_fallback(self):
        entity = link(self.cand("ambivalente", cls=P), assets_without_models())
        # no Procedure TUI on the concept: highest-priority class wins
        assert entity.entity_class is Z
        assert entity.tui == "T047"

    def test_threshold_respected(self):
        loose = link(self.cand("paracetamol"), assets_without_models(threshold=0.5))
        assert loose is not None
        padded = self.cand("paracetamol x y z extra")
        assert link(padded, assets_without_models(threshold=0.9)) is None

    def test_glossary_applied_before_lookup(self):
        cfg = MatcherConfig(alpha=0.7, tui_filter=frozenset(DEFAULT_SEMANTIC_GROUPS))
        kb = make_kb([("C0000009", "hipertensão arterial", {"T047"})])
        assets = PipelineAssets(
            index=build_index(kb, cfg),
            matcher_cfg=cfg,
            groups=dict(DEFAULT_SEMANTIC_GROUPS),
            glossary=Glossary({"HTA": "hipertensão arterial"}),
            link_cfg=LinkConfig(threshold=0.9),
        )
        entity = link(self.cand("HTA", cls=Z), assets)
        assert entity is not None
        assert entity.entity_class is Z


@pytest.fixture(scope="module")
def trained_assets():
    """Tiny per-class models trained on sentences built from the toy KB."""
    fillers = ["doente", "iniciou", "hoje", "mantém", "sem", "plano"]
    surfaces = {
        D: ["paracetamol", "morfina"],
        P: ["colonoscopia"],
        Z: ["anemia"],
    }
    models = {}
    for cls, terms in surfaces.items():
        train_set, val_set = [], []
        idx = 0
        for rep in range(8):
            for term in terms:
                words = [fillers[rep % 6], term, fillers[(rep + 1) % 6]]
                text = " ".join(words)
                sent = Sentence(doc_id="t", sentence_index=idx, text=text, source_span=(0, len(text)))
                pos = len(words[0]) + 1
                t = to_iob(sent, [((pos, pos + len(term)), None)], scheme="untyped")
                idx += 1
                (val_set if rep >= 6 else train_set).append(t)
        model, _ = train(train_set, val_set, TrainConfig(learning_rate=0.1, batch_size=4, epochs=12, seed=0))
        models[cls] = model
    cfg = MatcherConfig(alpha=0.7, tui_filter=frozenset(DEFAULT_SEMANTIC_GROUPS))
    return PipelineAssets(
        index=build_index(TOY_KB, cfg),
        matcher_cfg=cfg,
        groups=dict(DEFAULT_SEMANTIC_GROUPS),
        glossary=Glossary({}),
        models=models,
        link_cfg=LinkConfig(threshold=0.9),
    )


class TestPredict:
    def test_verbatim_term_found_in_all_modes(self, trained_assets):
        text = "doente iniciou paracetamol hoje"
        for mode in ("umls_only", "ner_only", "ner_umls"):
            entities = predict_text(text, mode, trained_assets)
            spans = [(e.start, e.end) for e in entities]
            assert (15, 26) in spans, mode
        linked = predict_text(text, "ner_umls", trained_assets)
        assert linked[0].entity_class is D
        assert linked[0].cui == "C0000001"

    def test_empty_sentence_all_modes(self, trained_assets):
        for mode in ("umls_only", "ner_only", "ner_umls"):
            assert predict_text("", mode, trained_assets) == []
            assert predict_text("   ", mode, trained_assets) == []

    def test_hallucinated_span_dropped_by_linking(self, trained_assets):
        # "anemia" context pushes the disease tagger to label an unknown token
        text = "doente iniciou anemia hoje"
        replaced = text.replace("anemia", "zumbral")
        ner = predict_text(replaced, "ner_only", trained_assets)
        linked = predict_text(replaced, "ner_umls", trained_assets)
        hallucinated = [e for e in ner if replaced[e.start : e.end] == "zumbral"]
        if hallucinated:  # tagger fell for the context, linking must drop it
            assert all(replaced[e.start : e.end] != "zumbral" for e in linked)

    def test_subset_property(self, trained_assets):
        texts = [
            "doente iniciou paracetamol hoje",
            "mantém anemia sem plano",
            "colonoscopia hoje",
            "doente zumbral hoje",
            "morfina e anemia",
        ]
        for text in texts:
            ner_spans = {(e.start, e.end) for e in predict_text(text, "ner_only", trained_assets)}
            linked_spans = {(e.start, e.end) for e in predict_text(text, "ner_umls", trained_assets)}
            assert linked_spans <= ner_spans

    def test_class_consistent_with_tui(self, trained_assets):
        texts = ["doente iniciou paracetamol hoje", "mantém anemia sem plano"]
        for text in texts:
            for entity in predict_text(text, "ner_umls", trained_assets):
                assert class_of(entity.tui, trained_assets.groups) is entity.entity_class

    def test_umls_only_classes(self, trained_assets):
        entities = predict_text("morfina e anemia", "umls_only", trained_assets)
        by_text = {e.text: e.entity_class for e in entities}
        assert by_text == {"morfina": D, "anemia": Z}

    def test_unknown_mode(self, trained_assets):
        with pytest.raises(ValueError, match="unknown mode"):
            predict_text("x", "both", trained_assets)

    def test_ner_mode_without_models(self):
        with pytest.raises(ValueError, match="models"):
            predict_text("x", "ner_only", assets_without_models())

    def test_priority_order_constant(self):
        assert CLASS_PRIORITY == (Z, P, D)
