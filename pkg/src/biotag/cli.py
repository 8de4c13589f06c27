"""Command-line entry point wiring the pipeline stages.

Commands: annotate, curate-serve, corpus-split, corpus-stats, train, search,
predict, evaluate, e2e-demo. Options can come from an INI-style config file
(section [biotag]); command-line flags win over file values.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from . import corpus as corpus_mod
from .corpus import (
    CorpusFormatError,
    IOBSchemeError,
    SplitSpec,
    TaggedSentence,
    detokenized_text,
    from_iob,
    per_class_split,
    read_corpus,
    split_corpus,
    write_corpus,
)
from .curation import CurationError, SessionStore, load_annotations_jsonl
from .kb import (
    DEFAULT_SEMANTIC_GROUPS,
    EntityClass,
    KBFormatError,
    load_kb,
    load_semantic_groups,
    mapped_tuis,
)
from .linker import MODES, LinkConfig, PipelineAssets, annotate_sentences, predict
from .matcher import MatcherConfig, build_index
from .metrics import MentionSet, evaluate_run
from .tagger import (
    DEFAULT_SEARCH_SPACE,
    ModelFormatError,
    TrainConfig,
    load_model,
    random_search,
    save_model,
    train,
)
from .textprep import (
    DocumentError,
    Glossary,
    GlossaryError,
    Sentence,
    dedupe,
    load_document,
    load_glossary,
    segment,
)

DATA_ERRORS = (
    KBFormatError,
    GlossaryError,
    DocumentError,
    CorpusFormatError,
    IOBSchemeError,
    ModelFormatError,
    CurationError,
    FileNotFoundError,
    json.JSONDecodeError,
    ValueError,
)


class _OutputGuard:
    """Removes declared output files when a command fails part-way."""

    def __init__(self) -> None:
        self.paths: list[Path] = []

    def declare(self, path: str | Path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for path in self.paths:
            if path.is_file():
                path.unlink(missing_ok=True)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file; flags override file values")
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biotag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", help="high-recall dictionary annotation of documents")
    _add_common(p)
    p.add_argument("--kb", help="concepts.tsv")
    p.add_argument("--glossary", help="glossary.tsv (optional)")
    p.add_argument("--semantic-groups", help="semantic_groups.tsv (default: built-in map)")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--measure", default=None)
    p.add_argument("--language", default=None)
    p.add_argument("--output", required=True, help="annotations JSON-lines output")
    p.add_argument("documents", nargs="+", help="plain-text document files")

    p = sub.add_parser("curate-serve", help="run the curation HTTP service")
    _add_common(p)
    p.add_argument("--session-dir", required=True, help="persistence directory")
    p.add_argument("--annotations", help="bootstrap a session from this JSONL file")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8654)
    p.add_argument("--ui", action="store_true", help="serve the web UI from frontend/dist")

    p = sub.add_parser("corpus-split", help="split a corpus into train/validation/test")
    _add_common(p)
    p.add_argument("--input", required=True, help="aggregated CoNLL corpus")
    p.add_argument("--outdir", required=True)
    p.add_argument("--test-fraction", type=float, default=0.20)
    p.add_argument("--val-fraction", type=float, default=0.20)
    p.add_argument("--per-class", action="store_true", help="also write per-class corpora")

    p = sub.add_parser("corpus-stats", help="sentence and B/I/O token counts")
    _add_common(p)
    p.add_argument("--input", required=True, nargs="+", help="CoNLL corpus file(s)")

    p = sub.add_parser("train", help="train one CRF tagger")
    _add_common(p)
    p.add_argument("--train", dest="train_path", required=True)
    p.add_argument("--val", dest="val_path", required=True)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--model-out", required=True)
    p.add_argument("--history-figure", help="write loss/F1 curves to this PNG")

    p = sub.add_parser("search", help="random hyperparameter search")
    _add_common(p)
    p.add_argument("--train", dest="train_path", required=True)
    p.add_argument("--val", dest="val_path", required=True)
    p.add_argument("-k", type=int, default=20, help="number of sampled configurations")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--model-out", required=True)
    p.add_argument("--history-figure", help="write loss/F1 curves of the best trial")

    p = sub.add_parser("predict", help="run the pipeline on sentences")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--glossary")
    p.add_argument("--semantic-groups")
    p.add_argument("--models-dir", help="directory with procedure/drug/disease model JSON files")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--link-threshold", type=float, default=None)
    p.add_argument("--input", required=True, help="plain-text (one sentence per line) or .conll file")
    p.add_argument("--output", required=True, help="JSON-lines predictions")

    p = sub.add_parser("evaluate", help="strict/relaxed P/R/F1 report")
    _add_common(p)
    p.add_argument("--gold", required=True, help="typed CoNLL corpus")
    p.add_argument(
        "--pred",
        action="append",
        required=True,
        metavar="MODE=FILE",
        help="predictions JSONL per model setting; repeatable",
    )
    p.add_argument("--report-dir", required=True)

    p = sub.add_parser("e2e-demo", help="synthetic end-to-end pipeline run")
    _add_common(p)
    p.add_argument("--outdir", required=True)
    p.add_argument("--sentences", type=int, default=500)
    p.add_argument("-k", type=int, default=20)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--quiet", action="store_true")

    return parser


def _load_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file {path!r} not found")
    values: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            values[key.replace("-", "_")] = value
    return values


def _setting(args: argparse.Namespace, config: dict[str, str], name: str, default=None, cast=str):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        return cast(config[name])
    return default


def _seed(args, config) -> int:
    return int(_setting(args, config, "seed", default=0, cast=int))


def _matcher_config(args, config, tui_filter=None) -> MatcherConfig:
    return MatcherConfig(
        alpha=float(_setting(args, config, "alpha", default=0.7, cast=float)),
        measure=_setting(args, config, "measure", default="jaccard"),
        language=_setting(args, config, "language", default="POR"),
        tui_filter=tui_filter,
    )


def _load_groups(args, config) -> dict[str, EntityClass]:
    path = _setting(args, config, "semantic_groups")
    if path:
        return load_semantic_groups(path)
    return dict(DEFAULT_SEMANTIC_GROUPS)


def _load_glossary_opt(args, config) -> Glossary:
    path = _setting(args, config, "glossary")
    if path:
        return load_glossary(path)
    return Glossary({})


def _documents_to_sentences(paths: list[str]) -> list[Sentence]:
    sentences: list[Sentence] = []
    for path in paths:
        doc = load_document(path)
        sentences.extend(segment(doc))
    return dedupe(sentences)


def cmd_annotate(args, config, guard: _OutputGuard) -> int:
    kb_path = _setting(args, config, "kb")
    if not kb_path:
        raise ValueError("annotate requires --kb")
    kb = load_kb(kb_path)
    groups = _load_groups(args, config)
    glossary = _load_glossary_opt(args, config)
    cfg = _matcher_config(args, config, tui_filter=frozenset(mapped_tuis(groups)))
    index = build_index(kb, cfg)
    sentences = _documents_to_sentences(args.documents)
    records = annotate_sentences(sentences, index, cfg, groups, glossary)
    out = guard.declare(args.output)
    with out.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    n_hits = sum(1 for r in records if r["matches"])
    print(f"annotated {len(records)} sentences; {n_hits} with candidates -> {out}")
    return 0


def cmd_curate_serve(args, config, guard: _OutputGuard) -> int:
    import uvicorn

    from .curation_api import create_app

    store = SessionStore(args.session_dir)
    if args.annotations:
        text = Path(args.annotations).read_text(encoding="utf-8")
        session = store.create(load_annotations_jsonl(text))
        print(f"created session {session.session_id} with {len(session.items)} items")
    ui_dir = None
    if args.ui:
        candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        if not candidate.exists():
            raise FileNotFoundError(f"UI bundle not found at {candidate}; build the frontend first")
        ui_dir = str(candidate)
    app = create_app(store, ui_dir=ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_corpus_split(args, config, guard: _OutputGuard) -> int:
    corpus = read_corpus(args.input)
    spec = SplitSpec(
        test_fraction=args.test_fraction,
        val_fraction_of_remainder=args.val_fraction,
        seed=_seed(args, config),
    )
    split = split_corpus(corpus, spec)
    outdir = Path(args.outdir)
    (outdir / "aggregated").mkdir(parents=True, exist_ok=True)
    for part, sentences in split.parts().items():
        write_corpus(guard.declare(outdir / "aggregated" / f"{part}.conll"), sentences)
    if args.per_class:
        for cls in EntityClass:
            sub = per_class_split(split, cls)
            cls_dir = outdir / cls.value.lower()
            cls_dir.mkdir(parents=True, exist_ok=True)
            for part, sentences in sub.parts().items():
                write_corpus(guard.declare(cls_dir / f"{part}.conll"), sentences)
    sizes = {part: len(sentences) for part, sentences in split.parts().items()}
    print(f"split {len(corpus)} sentences -> {sizes} (seed {spec.seed})")
    return 0


def cmd_corpus_stats(args, config, guard: _OutputGuard) -> int:
    from .report import format_corpus_stats

    for path in args.input:
        corpus = read_corpus(path)
        print(f"{path}:")
        print(format_corpus_stats(corpus_mod.stats(corpus), label="Total"), end="")
        if any(s.scheme == corpus_mod.TYPED for s in corpus):
            for cls in EntityClass:
                projected = [
                    p for s in corpus if (p := corpus_mod.project_to_class(s, cls)) is not None
                ]
                print(format_corpus_stats(corpus_mod.stats(projected), label=f"{cls.value}s"), end="")
        print()
    return 0


def _history_figure(histories, path) -> None:
    from .report import render_training_figure

    render_training_figure(histories, path)
    print(f"training curves -> {path}")


def cmd_train(args, config, guard: _OutputGuard) -> int:
    train_corpus = read_corpus(args.train_path)
    val_corpus = read_corpus(args.val_path)
    cfg = TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        epochs=args.epochs,
        l2=args.l2,
        seed=_seed(args, config),
    )
    model, history = train(train_corpus, val_corpus, cfg)
    save_model(model, guard.declare(args.model_out))
    print(
        f"trained on {len(train_corpus)} sentences; best epoch "
        f"{model.meta['best_epoch']} val F1 {model.meta['best_val_f1']:.4f} -> {args.model_out}"
    )
    if args.history_figure:
        _history_figure({"model": history}, guard.declare(args.history_figure))
    return 0


def cmd_search(args, config, guard: _OutputGuard) -> int:
    train_corpus = read_corpus(args.train_path)
    val_corpus = read_corpus(args.val_path)
    result = random_search(
        train_corpus, val_corpus, k=args.k, seed=_seed(args, config), epochs=args.epochs
    )
    for t in result.trials:
        marker = " *" if t.index == result.best_index else ""
        print(
            f"trial {t.index:02d}: lr={t.config.learning_rate} bs={t.config.batch_size} "
            f"l2={t.config.l2} val_f1={t.val_f1:.4f} best_epoch={t.best_epoch}{marker}"
        )
    best = result.best_config
    print(f"chosen: lr={best.learning_rate} bs={best.batch_size} l2={best.l2}")
    save_model(result.best_model, guard.declare(args.model_out))
    print(f"best model -> {args.model_out}")
    if args.history_figure:
        _history_figure({"best trial": result.best_history}, guard.declare(args.history_figure))
    return 0


def _sentences_from_input(path: str) -> list[Sentence]:
    p = Path(path)
    if p.suffix == ".conll":
        tagged = read_corpus(p)
        return [
            Sentence(
                doc_id=t.doc_id,
                sentence_index=t.sentence_index,
                text=detokenized_text(t),
                source_span=(0, len(detokenized_text(t))),
            )
            for t in tagged
        ]
    sentences = []
    for i, line in enumerate(p.read_text(encoding="utf-8").splitlines()):
        if line.strip():
            sentences.append(
                Sentence(doc_id=p.stem, sentence_index=i, text=line, source_span=(0, len(line)))
            )
    return sentences


def _load_assets(args, config, mode: str) -> PipelineAssets:
    kb = load_kb(args.kb)
    groups = _load_groups(args, config)
    glossary = _load_glossary_opt(args, config)
    cfg = _matcher_config(args, config, tui_filter=frozenset(mapped_tuis(groups)))
    index = build_index(kb, cfg)
    models = None
    if mode in ("ner_only", "ner_umls"):
        if not args.models_dir:
            raise ValueError(f"mode {mode} requires --models-dir")
        models = {}
        for cls in EntityClass:
            model_path = Path(args.models_dir) / f"{cls.value.lower()}.json"
            if not model_path.exists():
                raise FileNotFoundError(f"missing model for {cls.value}: {model_path}")
            models[cls] = load_model(model_path)
    threshold = _setting(args, config, "link_threshold", default=0.9, cast=float)
    return PipelineAssets(
        index=index,
        matcher_cfg=cfg,
        groups=groups,
        glossary=glossary,
        models=models,
        link_cfg=LinkConfig(threshold=float(threshold)),
    )


def cmd_predict(args, config, guard: _OutputGuard) -> int:
    assets = _load_assets(args, config, args.mode)
    sentences = _sentences_from_input(args.input)
    out = guard.declare(args.output)
    with out.open("w", encoding="utf-8") as fh:
        for sentence in sentences:
            entities = predict(sentence, args.mode, assets)
            fh.write(
                json.dumps(
                    {
                        "doc_id": sentence.doc_id,
                        "sentence_index": sentence.sentence_index,
                        "text": sentence.text,
                        "entities": [e.to_dict() for e in entities],
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    print(f"predicted {len(sentences)} sentences ({args.mode}) -> {out}")
    return 0


def _mention_set_from_predictions(path: str) -> MentionSet:
    mentions: MentionSet = {}
    by_value = {cls.value: cls for cls in EntityClass}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        sid = f"{obj['doc_id']}:{obj['sentence_index']}"
        mentions[sid] = [
            ((e["start"], e["end"]), by_value.get(e.get("class")))
            for e in obj.get("entities", [])
        ]
    return mentions


def cmd_evaluate(args, config, guard: _OutputGuard) -> int:
    from .report import format_report_csv, format_report_text, render_report_figures

    gold_corpus = read_corpus(args.gold)
    gold: MentionSet = {t.sentence_id: from_iob(t) for t in gold_corpus}
    predictions: dict[str, MentionSet] = {}
    for spec in args.pred:
        mode, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"--pred expects MODE=FILE, got {spec!r}")
        predictions[mode] = _mention_set_from_predictions(path)
    report = evaluate_run(gold, predictions)
    report_dir = Path(args.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    text = format_report_text(report)
    guard.declare(report_dir / "report.txt").write_text(text, encoding="utf-8")
    guard.declare(report_dir / "report.csv").write_text(format_report_csv(report), encoding="utf-8")
    render_report_figures(report, report_dir)
    print(text, end="")
    print(f"report -> {report_dir}")
    return 0


def cmd_e2e_demo(args, config, guard: _OutputGuard) -> int:
    from .demo import run_demo

    result = run_demo(
        seed=_seed(args, config),
        outdir=args.outdir,
        n_sentences=args.sentences,
        k=args.k,
        epochs=args.epochs,
        log=None if args.quiet else lambda msg: print(f"[demo] {msg}", file=sys.stderr),
    )
    print(result.report_text, end="")
    print(f"artifacts -> {result.outdir}")
    return 0


_COMMANDS = {
    "annotate": cmd_annotate,
    "curate-serve": cmd_curate_serve,
    "corpus-split": cmd_corpus_split,
    "corpus-stats": cmd_corpus_stats,
    "train": cmd_train,
    "search": cmd_search,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "e2e-demo": cmd_e2e_demo,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    config = {}
    guard = _OutputGuard()
    try:
        config = _load_config(getattr(args, "config", None))
        return _COMMANDS[args.command](args, config, guard)
    except DATA_ERRORS as exc:
        guard.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        guard.cleanup()
        return 3
    except Exception:
        guard.cleanup()
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
