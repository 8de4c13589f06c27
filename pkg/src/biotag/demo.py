"""Synthetic end-to-end demonstration: toy knowledge base, generated clinical
notes, auto-annotation, simulated curation, per-class tagger search, and the
three-setting evaluation.

Everything is driven by one master seed; per-stage RNGs are derived with
fixed labels so re-running with the same seed reproduces every artifact.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .corpus import Split, SplitSpec, from_iob, per_class_split, split_corpus, write_corpus
from .curation import CurationSession, DecisionRecord, SessionStore
from .kb import (
    DEFAULT_SEMANTIC_GROUPS,
    Concept,
    EntityClass,
    KnowledgeBase,
    save_kb,
    save_semantic_groups,
)
from .linker import LinkConfig, PipelineAssets, annotate_sentences, predict
from .matcher import MatcherConfig, build_index, ngrams, similarity
from .metrics import EvaluationReport, MentionSet, evaluate_run
from .tagger import SearchResult, random_search, save_model
from .textprep import Glossary, RawDocument, Sentence, dedupe, segment

# (surface, tui); abbreviations are separate glossary entries
_PROCEDURES = [
    "radioterapia", "quimioterapia", "colonoscopia", "hemograma",
    "mastectomia", "histerectomia", "broncoscopia", "gastrectomia",
    "laringoscopia", "ecografia abdominal", "cintigrafia óssea",
    "endoscopia digestiva", "ressonância magnética", "punção lombar",
    "transfusão de plaquetas", "biópsia hepática", "prova de esforço",
]
_DRUGS = [
    "paracetamol", "morfina", "cisplatina", "tramadol", "omeprazol",
    "metoclopramida", "dexametasona", "ciclofosfamida", "tamoxifeno",
    "enoxaparina", "amoxicilina", "ceftriaxona", "furosemida",
    "ondansetrom", "capecitabina", "docetaxel", "insulina",
]
_DISEASES = [
    "hipertensão arterial", "diabetes mellitus", "anemia", "pneumonia",
    "mucosite", "neutropenia febril", "trombose venosa", "disfagia",
    "obstipação", "carcinoma gástrico", "neoplasia da mama",
    "insuficiência renal", "metástases hepáticas", "derrame pleural",
    "dor lombar", "epistáxis", "hiperglicemia",
]

_TUI_CYCLE = {
    EntityClass.PROCEDURE: ("T058", "T059", "T060", "T061"),
    EntityClass.DRUG: ("T121", "T122", "T195", "T200"),
    EntityClass.DISEASE: ("T047", "T191", "T184", "T046", "T033", "T037"),
}

_ABBREVIATIONS = {
    "HTA": "hipertensão arterial",
    "DM": "diabetes mellitus",
    "TVP": "trombose venosa",
}

_NOISE = [
    "doente", "mantém", "plano", "estável", "hoje", "consulta", "refere",
    "queixas", "iniciou", "suspendeu", "avaliação", "internamento", "alta",
    "melhoria", "ciclo", "terapêutica", "seguimento", "vigilância",
    "analgesia", "tolerou", "agendada", "controlo", "estadiamento",
    "intercorrências", "ontem", "toxicidade", "medicado", "pedido",
    "sinais", "revelou", "aguarda", "confirmou", "apirético", "entretanto",
]

_P, _D, _Z = EntityClass.PROCEDURE, EntityClass.DRUG, EntityClass.DISEASE

# sentence templates: literal words or a class slot
_TEMPLATES: list[list] = [
    ["doente", "iniciou", _D, "por", _Z],
    ["realizou", _P, "sem", "intercorrências"],
    ["mantém", _D, "e", "vigilância", "apertada"],
    [_Z, "controlada", "com", _D],
    ["agendada", _P, "para", "estadiamento"],
    ["refere", _Z, "desde", "ontem"],
    ["fez", _P, "que", "confirmou", _Z],
    ["suspendeu", _D, "por", "toxicidade"],
    ["doente", "com", _Z, "medicado", "com", _D],
    ["pedido", _P, "para", "controlo"],
    ["sem", "sinais", "de", _Z],
    ["ciclo", "de", _D, "bem", "tolerado"],
    [_P, "revelou", _Z],
    ["aguarda", _P, "com", "urgência"],
    ["alta", "com", _D, "em", "ambulatório"],
    ["internamento", "por", _Z],
    ["tolerou", _D, "sem", "queixas"],
    [_P, "marcada", "para", "amanhã"],
]


def build_toy_kb() -> tuple[KnowledgeBase, Glossary, dict[str, EntityClass]]:
    """~50 concepts across the three classes plus a small abbreviation glossary."""
    concepts: dict[str, Concept] = {}
    counter = 1
    for cls, surfaces in ((_P, _PROCEDURES), (_D, _DRUGS), (_Z, _DISEASES)):
        cycle = _TUI_CYCLE[cls]
        for i, surface in enumerate(surfaces):
            cui = f"C{counter:07d}"
            counter += 1
            concepts[cui] = Concept(
                cui=cui, terms=((surface, "POR"),), tuis=frozenset({cycle[i % len(cycle)]})
            )
    kb = KnowledgeBase(concepts=concepts)
    return kb, Glossary(dict(_ABBREVIATIONS)), dict(DEFAULT_SEMANTIC_GROUPS)


def _surfaces_by_class(kb: KnowledgeBase) -> dict[EntityClass, list[tuple[str, EntityClass]]]:
    out: dict[EntityClass, list[tuple[str, EntityClass]]] = {cls: [] for cls in EntityClass}
    abbrev_of = {v: k for k, v in _ABBREVIATIONS.items()}
    for surface, _lang, concept in kb.iter_terms():
        tui = sorted(concept.tuis)[0]
        cls = DEFAULT_SEMANTIC_GROUPS[tui]
        out[cls].append((surface, cls))
        if surface in abbrev_of:
            out[cls].append((abbrev_of[surface], cls))
    return out


@dataclass
class GeneratedCorpus:
    documents: list[RawDocument]
    gold: dict[str, list]  # sentence_id -> [(span, class)]
    sentences: list[Sentence]


def _render(pieces: list, rng: random.Random, surfaces: dict) -> tuple[str, list]:
    words: list[str] = []
    mentions: list[tuple[int, int, EntityClass]] = []
    cursor = 0
    for piece in pieces:
        if cursor > 0:
            cursor += 1  # joining space
        if isinstance(piece, EntityClass):
            surface, cls = rng.choice(surfaces[piece])
            words.append(surface)
            mentions.append((cursor, cursor + len(surface), cls))
            cursor += len(surface)
        else:
            words.append(piece)
            cursor += len(piece)
    text = " ".join(words)
    if rng.random() < 0.5:
        text += " ."
    text = text[0].upper() + text[1:]
    return text, [((a, b), cls) for a, b, cls in mentions]


def generate_corpus(seed: int, n_sentences: int = 500, n_docs: int = 10) -> GeneratedCorpus:
    """Seeded clinical-note generator; every sentence has >= 1 mention and all
    sentence texts are unique, so segmentation and dedup keep them intact."""
    rng = random.Random(seed)
    kb, _, _ = build_toy_kb()
    surfaces = _surfaces_by_class(kb)

    lines: list[tuple[str, list]] = []
    seen: set[str] = set()

    def push(text: str, mentions: list) -> bool:
        key = " ".join(text.split())
        if key in seen:
            return False
        seen.add(key)
        lines.append((text, mentions))
        return True

    def generate_one(must_contain: tuple[str, EntityClass] | None = None) -> None:
        for attempt in range(80):
            if must_contain is not None:
                surface, cls = must_contain
                options = [t for t in _TEMPLATES if cls in t]
                pieces = list(rng.choice(options))
                slot_positions = [i for i, p in enumerate(pieces) if p is cls]
                fixed = rng.choice(slot_positions)
                rendered: list = []
                for i, p in enumerate(pieces):
                    rendered.append((surface, cls) if i == fixed else p)
                text, mentions = _render_fixed(rendered, rng, surfaces)
            else:
                text, mentions = _render(list(rng.choice(_TEMPLATES)), rng, surfaces)
            for _ in range(attempt % 3):
                extra = rng.choice(_NOISE)
                text = text + " " + extra
            if push(text, mentions):
                return
        raise RuntimeError("could not generate a unique sentence")

    # coverage pass: each surface (terms and abbreviations) appears a few times
    for cls in (EntityClass.PROCEDURE, EntityClass.DRUG, EntityClass.DISEASE):
        for surface_cls in surfaces[cls]:
            for _ in range(3):
                generate_one(must_contain=surface_cls)
    while len(lines) < n_sentences:
        generate_one()
    rng.shuffle(lines)

    documents: list[RawDocument] = []
    gold: dict[str, list] = {}
    sentences: list[Sentence] = []
    per_doc = (len(lines) + n_docs - 1) // n_docs
    for d in range(n_docs):
        chunk = lines[d * per_doc : (d + 1) * per_doc]
        if not chunk:
            continue
        doc_id = f"diario-{d:02d}"
        doc = RawDocument(doc_id=doc_id, text="\n".join(text for text, _ in chunk))
        segmented = segment(doc)
        if len(segmented) != len(chunk):
            raise RuntimeError("generated line split unexpectedly")
        documents.append(doc)
        for idx, ((text, mentions), sentence) in enumerate(zip(chunk, segmented)):
            if sentence.text != text:
                raise RuntimeError("generated sentence text drifted")
            gold[f"{doc_id}:{idx}"] = list(mentions)
            sentences.append(sentence)
    return GeneratedCorpus(documents=documents, gold=gold, sentences=sentences)


def _render_fixed(pieces: list, rng: random.Random, surfaces: dict) -> tuple[str, list]:
    words: list[str] = []
    mentions: list[tuple[int, int, EntityClass]] = []
    cursor = 0
    for piece in pieces:
        if cursor > 0:
            cursor += 1
        if isinstance(piece, EntityClass):
            surface, cls = rng.choice(surfaces[piece])
        elif isinstance(piece, tuple):
            surface, cls = piece
        else:
            words.append(piece)
            cursor += len(piece)
            continue
        words.append(surface)
        mentions.append((cursor, cursor + len(surface), cls))
        cursor += len(surface)
    text = " ".join(words)
    if rng.random() < 0.5:
        text += " ."
    text = text[0].upper() + text[1:]
    return text, [((a, b), cls) for a, b, cls in mentions]


# ---------------------------------------------------------------------------
# high-recall acceptance corpus

_SYLLABLES = ["ba", "co", "du", "fe", "gi", "lo", "mu", "ne", "pa", "re", "si", "ta", "vi", "za"]


def _pseudo_word(rng: random.Random, length: int) -> str:
    word = ""
    while len(word) < length:
        word += rng.choice(_SYLLABLES)
    return word[:length]


def high_recall_corpus(
    seed: int, n_sentences: int = 120, min_alpha: float = 0.5, n: int = 3
) -> tuple[KnowledgeBase, list[Sentence], dict[str, list]]:
    """Sentences whose every mention is a verbatim KB term, built so that no
    window longer than a mention reaches ``min_alpha`` similarity against any
    term (otherwise the longest-span overlap rule could displace the exact
    match). Neighbor words are padded to length >= len(term) - 4 and each
    sentence is verified against the whole term list before acceptance."""
    rng = random.Random(seed)
    kb, _, _ = build_toy_kb()
    term_grams = [
        (frozenset(ngrams(" ".join(surface.lower().split()), n)), surface)
        for surface, _lang, _c in kb.iter_terms()
    ]
    surfaces_all = [
        (surface, DEFAULT_SEMANTIC_GROUPS[sorted(concept.tuis)[0]])
        for surface, _lang, concept in kb.iter_terms()
    ]

    def window_safe(tokens: list[str], gold_spans: list[tuple[int, int]]) -> bool:
        text = " ".join(tokens)
        spans = []
        cursor = 0
        for tok in tokens:
            spans.append((cursor, cursor + len(tok)))
            cursor += len(tok) + 1
        for i in range(len(tokens)):
            for j in range(i + 1, min(i + 8, len(tokens) + 1)):
                span = (spans[i][0], spans[j - 1][1])
                window = text[span[0] : span[1]].lower()
                grams = frozenset(ngrams(" ".join(window.split()), n))
                for gspan in gold_spans:
                    if span == gspan:
                        break
                    overlaps = span[0] < gspan[1] and gspan[0] < span[1]
                    longer = (span[1] - span[0]) > (gspan[1] - gspan[0])
                    if overlaps and longer:
                        if any(similarity(grams, tg, "jaccard") >= min_alpha for tg, _ in term_grams):
                            return False
        return True

    sentences: list[Sentence] = []
    gold: dict[str, list] = {}
    seen: set[str] = set()
    idx = 0
    while len(sentences) < n_sentences:
        surface, cls = rng.choice(surfaces_all)
        need = max(4, len(surface) - 4)
        left = [_pseudo_word(rng, need + rng.randrange(3)) for _ in range(rng.randrange(3))]
        right = [_pseudo_word(rng, need + rng.randrange(3)) for _ in range(rng.randrange(3))]
        tokens = left + surface.split(" ") + right
        prefix_len = sum(len(w) + 1 for w in left)
        span = (prefix_len, prefix_len + len(surface))
        if not window_safe(tokens, [span]):
            continue
        text = " ".join(tokens)
        if rng.random() < 0.4:
            text += " ."
        key = " ".join(text.split())
        if key in seen:
            continue
        seen.add(key)
        sentences.append(
            Sentence(doc_id="hr", sentence_index=idx, text=text, source_span=(0, len(text)))
        )
        gold[f"hr:{idx}"] = [(span, cls)]
        idx += 1
    return kb, sentences, gold


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass
class DemoResult:
    report: EvaluationReport
    report_text: str
    predictions: dict[str, MentionSet]
    gold: MentionSet
    search_results: dict[EntityClass, SearchResult]
    split: Split
    outdir: Path | None


def _oracle_curation(
    session: CurationSession, gold: dict[str, list], decide: Callable[[DecisionRecord], int]
) -> None:
    """Accept candidates matching the generator's gold exactly, reject the
    rest, and add gold mentions the matcher did not propose verbatim."""
    timestamp = 0.0
    for item_id in session.item_order:
        item = session.items[item_id]
        gold_mentions = {(tuple(span), cls) for span, cls in gold.get(item_id, [])}
        accepted_spans: set[tuple[int, int]] = set()
        for cand in item.candidates:
            key = ((cand.start, cand.end), cand.entity_class)
            action = "accept" if key in gold_mentions else "reject"
            if action == "accept":
                accepted_spans.add((cand.start, cand.end))
            decide(
                DecisionRecord(
                    item_id=item_id,
                    action=action,
                    annotator="oracle",
                    base_version=item.version,
                    timestamp=timestamp,
                    candidate_id=cand.candidate_id,
                )
            )
            timestamp += 1.0
        for span, cls in sorted(gold.get(item_id, [])):
            if tuple(span) in accepted_spans:
                continue
            decide(
                DecisionRecord(
                    item_id=item_id,
                    action="add",
                    annotator="oracle",
                    base_version=item.version,
                    timestamp=timestamp,
                    span=tuple(span),
                    entity_class=cls,
                )
            )
            timestamp += 1.0


def run_demo(
    seed: int = 7,
    outdir: str | Path | None = None,
    n_sentences: int = 500,
    k: int = 20,
    epochs: int = 30,
    alpha: float = 0.7,
    link_threshold: float = 0.9,
    log=None,
) -> DemoResult:
    """Generate the toy data, run annotate -> curate -> split -> search ->
    predict -> evaluate in all three settings, and render the report."""

    def say(msg: str) -> None:
        if log is not None:
            log(msg)

    out = Path(outdir) if outdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    kb, glossary, groups = build_toy_kb()
    say(f"toy KB: {len(kb)} concepts")
    generated = generate_corpus(seed=seed * 100003 + 1, n_sentences=n_sentences)
    sentences = dedupe(generated.sentences)
    say(f"generated {len(sentences)} unique sentences in {len(generated.documents)} documents")

    matcher_cfg = MatcherConfig(alpha=alpha, tui_filter=frozenset(groups))
    index = build_index(kb, matcher_cfg)
    annotations = annotate_sentences(sentences, index, matcher_cfg, groups, glossary)
    n_with = sum(1 for a in annotations if a["matches"])
    say(f"auto-annotation found candidates in {n_with} sentences")

    store = SessionStore(out / "curation" if out is not None else None)
    session = store.create(annotations, session_id="demo")
    _oracle_curation(session, generated.gold, lambda record: store.decide("demo", record))
    if out is not None:
        store.snapshot("demo")
    exported = session.export()
    say(f"curated corpus: {len(exported.aggregated)} sentences")

    split = split_corpus(exported.aggregated, SplitSpec(seed=seed * 100003 + 2))
    texts = {item_id: session.items[item_id].text for item_id in session.item_order}

    search_results: dict[EntityClass, SearchResult] = {}
    for i, cls in enumerate((EntityClass.PROCEDURE, EntityClass.DRUG, EntityClass.DISEASE)):
        sub = per_class_split(split, cls)
        say(
            f"searching {cls.value}: {len(sub.train)}/{len(sub.validation)}/{len(sub.test)} "
            f"train/val/test sentences, {k} trials"
        )
        result = random_search(
            sub.train, sub.validation, k=k, seed=seed * 100003 + 10 + i, epochs=epochs
        )
        search_results[cls] = result
        say(
            f"  best: lr={result.best_config.learning_rate} bs={result.best_config.batch_size} "
            f"l2={result.best_config.l2} val F1={result.trials[result.best_index].val_f1:.3f}"
        )

    assets = PipelineAssets(
        index=index,
        matcher_cfg=matcher_cfg,
        groups=groups,
        glossary=glossary,
        models={cls: sr.best_model for cls, sr in search_results.items()},
        link_cfg=LinkConfig(threshold=link_threshold),
    )

    gold: MentionSet = {}
    predictions: dict[str, MentionSet] = {m: {} for m in ("umls_only", "ner_only", "ner_umls")}
    for tagged in split.test:
        sid = tagged.sentence_id
        gold[sid] = from_iob(tagged)
        sentence = Sentence(
            doc_id=tagged.doc_id,
            sentence_index=tagged.sentence_index,
            text=texts[sid],
            source_span=(0, len(texts[sid])),
        )
        for mode in predictions:
            entities = predict(sentence, mode, assets)
            predictions[mode][sid] = [((e.start, e.end), e.entity_class) for e in entities]

    report = evaluate_run(gold, predictions)
    from .report import (
        format_report_csv,
        format_report_text,
        format_split_stats,
        render_report_figures,
        render_training_figure,
    )

    report_text = format_report_text(report)

    if out is not None:
        save_kb(kb, out / "concepts.tsv")
        save_semantic_groups(groups, out / "semantic_groups.tsv")
        (out / "glossary.tsv").write_text(
            "\n".join(f"{k_}\t{v}" for k_, v in _ABBREVIATIONS.items()) + "\n", encoding="utf-8"
        )
        docs_dir = out / "documents"
        docs_dir.mkdir(exist_ok=True)
        for doc in generated.documents:
            (docs_dir / f"{doc.doc_id}.txt").write_text(doc.text + "\n", encoding="utf-8")
        with (out / "annotations.jsonl").open("w", encoding="utf-8") as fh:
            for record in annotations:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        corpora = out / "corpora"
        (corpora / "aggregated").mkdir(parents=True, exist_ok=True)
        for part, sents in split.parts().items():
            write_corpus(corpora / "aggregated" / f"{part}.conll", sents)
        for cls in EntityClass:
            sub = per_class_split(split, cls)
            cls_dir = corpora / cls.value.lower()
            cls_dir.mkdir(parents=True, exist_ok=True)
            for part, sents in sub.parts().items():
                write_corpus(cls_dir / f"{part}.conll", sents)
        (out / "corpus_stats.txt").write_text(format_split_stats(split), encoding="utf-8")
        models_dir = out / "models"
        models_dir.mkdir(exist_ok=True)
        trial_lines = []
        for cls, sr in search_results.items():
            save_model(sr.best_model, models_dir / f"{cls.value.lower()}.json")
            trial_lines.append(f"== {cls.value}")
            for t in sr.trials:
                marker = " *" if t.index == sr.best_index else ""
                trial_lines.append(
                    f"trial {t.index:02d}: lr={t.config.learning_rate} bs={t.config.batch_size} "
                    f"l2={t.config.l2} val_f1={t.val_f1:.4f} best_epoch={t.best_epoch}{marker}"
                )
        (out / "search_trials.txt").write_text("\n".join(trial_lines) + "\n", encoding="utf-8")
        preds_dir = out / "predictions"
        preds_dir.mkdir(exist_ok=True)
        for mode, by_sentence in predictions.items():
            with (preds_dir / f"{mode}.jsonl").open("w", encoding="utf-8") as fh:
                for sid in sorted(by_sentence):
                    fh.write(
                        json.dumps(
                            {
                                "sentence_id": sid,
                                "mentions": [
                                    {"start": span[0], "end": span[1], "class": cls.value if cls else None}
                                    for span, cls in by_sentence[sid]
                                ],
                            },
                            ensure_ascii=False,
                        )
                        + "\n"
                    )
        (out / "report.txt").write_text(report_text, encoding="utf-8")
        (out / "report.csv").write_text(format_report_csv(report), encoding="utf-8")
        render_report_figures(report, out)
        render_training_figure(
            {cls.value: sr.best_history for cls, sr in search_results.items()},
            out / "training_history.png",
        )

    return DemoResult(
        report=report,
        report_text=report_text,
        predictions=predictions,
        gold=gold,
        search_results=search_results,
        split=split,
        outdir=out,
    )
