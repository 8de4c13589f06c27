"""Report rendering: aligned text tables, CSV, and figures.

Every command that evaluates or trains writes its delimited output next to
rendered PNG figures. Figures are saved without date metadata so repeated
runs with the same seed produce identical files.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .corpus import CorpusStats, Split, per_class_split, stats
from .kb import EntityClass
from .metrics import ROW_ORDER, EvaluationReport
from .tagger import EpochStats

MODE_TITLES = {"umls_only": "UMLS", "ner_only": "NER", "ner_umls": "NER & UMLS"}

_SAVEFIG = {"dpi": 120, "metadata": {"Date": None}}


def _pct(value: float) -> str:
    return f"{100 * value:.1f}"


def format_report_text(report: EvaluationReport) -> str:
    """Aligned table: one row per class, strict and relaxed P/R/F1 per mode."""
    modes = report.modes
    header_groups = "".join(f"{MODE_TITLES.get(m, m):^42}" for m in modes)
    sub = "".join(f"{'Strict':^21}{'Relaxed':^21}" for _ in modes)
    cols = "".join(f"{'P':>7}{'R':>7}{'F1':>7}" * 2 for _ in modes)
    lines = [
        f"{'':14}{header_groups}",
        f"{'':14}{sub}",
        f"{'':14}{cols}",
    ]
    for row in ROW_ORDER:
        cells = []
        for mode in modes:
            for kind in ("strict", "relaxed"):
                prf = report.cells[(row, mode)][kind]
                cells.append(f"{_pct(prf.precision):>7}{_pct(prf.recall):>7}{_pct(prf.f1):>7}")
        lines.append(f"{row:14}" + "".join(cells))
    lines.append("")
    lines.append(report.footer)
    return "\n".join(lines) + "\n"


def format_report_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["class"]
    for mode in report.modes:
        title = MODE_TITLES.get(mode, mode)
        for kind in ("strict", "relaxed"):
            for metric in ("P", "R", "F1"):
                header.append(f"{title} {kind} {metric}")
    writer.writerow(header)
    for row in ROW_ORDER:
        out = [row]
        for mode in report.modes:
            for kind in ("strict", "relaxed"):
                prf = report.cells[(row, mode)][kind]
                out.extend([_pct(prf.precision), _pct(prf.recall), _pct(prf.f1)])
        writer.writerow(out)
    return buf.getvalue()


def render_report_figures(report: EvaluationReport, outdir: str | Path) -> list[Path]:
    """Grouped bar charts of F1 and precision/recall per class and mode."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    rows = list(ROW_ORDER)
    x = range(len(rows))
    width = 0.8 / max(1, len(report.modes))

    fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharey=True)
    for ax, kind in zip(axes, ("strict", "relaxed")):
        for i, mode in enumerate(report.modes):
            values = [100 * report.cells[(row, mode)][kind].f1 for row in rows]
            ax.bar([xi + i * width for xi in x], values, width, label=MODE_TITLES.get(mode, mode))
        ax.set_title(f"{kind.capitalize()} F1")
        ax.set_xticks([xi + width * (len(report.modes) - 1) / 2 for xi in x])
        ax.set_xticklabels(rows, rotation=20)
        ax.set_ylim(0, 105)
        ax.set_ylabel("%")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = outdir / "report_f1.png"
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    written.append(path)

    fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharey=True)
    for ax, metric in zip(axes, ("precision", "recall")):
        for i, mode in enumerate(report.modes):
            values = [100 * getattr(report.cells[(row, mode)]["strict"], metric) for row in rows]
            ax.bar([xi + i * width for xi in x], values, width, label=MODE_TITLES.get(mode, mode))
        ax.set_title(f"Strict {metric}")
        ax.set_xticks([xi + width * (len(report.modes) - 1) / 2 for xi in x])
        ax.set_xticklabels(rows, rotation=20)
        ax.set_ylim(0, 105)
        ax.set_ylabel("%")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = outdir / "report_precision_recall.png"
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    written.append(path)
    return written


def render_training_figure(
    histories: dict[str, list[EpochStats]], outpath: str | Path
) -> Path:
    """Loss and validation-F1 curves, one line per model."""
    outpath = Path(outpath)
    outpath.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(10, 4))
    for name, history in histories.items():
        epochs = [h.epoch for h in history]
        ax_loss.plot(epochs, [h.train_loss for h in history], label=name)
        ax_f1.plot(epochs, [h.val_f1 for h in history], label=name)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean train NLL")
    ax_loss.set_title("Training loss")
    ax_f1.set_xlabel("epoch")
    ax_f1.set_ylabel("validation micro-F1")
    ax_f1.set_title("Checkpoint criterion")
    ax_f1.set_ylim(-0.02, 1.02)
    ax_loss.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(outpath, **_SAVEFIG)
    plt.close(fig)
    return outpath


_STATS_COLUMNS = ("Sent", "B", "I", "O")


def _stats_row(cs: CorpusStats) -> tuple[int, int, int, int]:
    return (cs.sentences, cs.b_tokens, cs.i_tokens, cs.o_tokens)


def format_split_stats(split: Split) -> str:
    """Corpus-distribution table: per-class and aggregated columns, one row
    per partition plus a total row."""
    groups: list[tuple[str, dict[str, CorpusStats]]] = []
    for cls in (EntityClass.PROCEDURE, EntityClass.DRUG, EntityClass.DISEASE):
        sub = per_class_split(split, cls)
        parts = {name: stats(part) for name, part in sub.parts().items()}
        parts["total"] = stats(sub.train + sub.validation + sub.test)
        groups.append((f"{cls.value}s", parts))
    agg = {name: stats(part) for name, part in split.parts().items()}
    agg["total"] = stats(split.train + split.validation + split.test)
    groups.append(("Aggregated", agg))

    widths = [max(7, len(name) + 2) for name, _ in groups]
    lines = []
    head = f"{'':12}"
    for (name, _), _w in zip(groups, widths):
        head += f"{name:^32}"
    lines.append(head)
    sub = f"{'':12}" + "".join(f"{c:>8}" for _ in groups for c in _STATS_COLUMNS)
    lines.append(sub)
    for part_name, label in (
        ("train", "Train"),
        ("validation", "Validation"),
        ("test", "Test"),
        ("total", "Total"),
    ):
        row = f"{label:12}"
        for _, parts in groups:
            row += "".join(f"{v:>8,}" for v in _stats_row(parts[part_name]))
        lines.append(row)
    return "\n".join(lines) + "\n"


def format_corpus_stats(corpus_stats: CorpusStats, label: str = "Corpus") -> str:
    head = f"{'':12}" + "".join(f"{c:>8}" for c in _STATS_COLUMNS)
    row = f"{label:12}" + "".join(f"{v:>8,}" for v in _stats_row(corpus_stats))
    return head + "\n" + row + "\n"
