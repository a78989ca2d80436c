"""Model comparison tables and figure rendering.

Table cells are :class:`decimal.Decimal` so transcribed values keep their
printed digits (``85.5`` stays ``85.5``) while computed metrics are rounded to
2 decimals for percentages and 4 for AUC.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from importlib import resources
from pathlib import Path
from typing import Iterable, List, Optional

from .errors import ConfigError

PCT = Decimal("0.01")
AUC_Q = Decimal("0.0001")
FORMATS = ("markdown", "csv", "json")


@dataclass(frozen=True)
class ComparisonRow:
    model: str
    accuracy: Decimal
    auc: Optional[Decimal]
    precision: Optional[Decimal] = None
    recall: Optional[Decimal] = None


def _dec(value, quantum=None, scale=1) -> Optional[Decimal]:
    if value is None:
        return None
    if isinstance(value, str):
        return Decimal(value)
    d = Decimal(repr(float(value))) * scale
    return d.quantize(quantum, rounding=ROUND_HALF_EVEN) if quantum else d


def row_from_report(report: dict, name: Optional[str] = None) -> ComparisonRow:
    """Computed report: fractions become percentages, AUC stays a fraction."""
    model = name or report.get("model")
    if not model:
        raise ConfigError("report has no model name")
    try:
        return ComparisonRow(
            model=str(model),
            accuracy=_dec(report["accuracy"], PCT, 100),
            auc=_dec(report.get("auc"), AUC_Q),
            precision=_dec(report.get("precision"), PCT, 100),
            recall=_dec(report.get("recall"), PCT, 100),
        )
    except (KeyError, TypeError, ArithmeticError, ValueError) as exc:
        raise ConfigError(f"malformed report for {model}: {exc}") from None


def row_from_transcribed(row: dict) -> ComparisonRow:
    """Transcribed row: percent strings copied verbatim."""
    try:
        return ComparisonRow(
            model=str(row["model"]),
            accuracy=Decimal(str(row["accuracy"])),
            auc=Decimal(str(row["auc"])) if row.get("auc") is not None else None,
            precision=Decimal(str(row["precision"])) if row.get("precision") is not None else None,
            recall=Decimal(str(row["recall"])) if row.get("recall") is not None else None,
        )
    except (KeyError, ArithmeticError, ValueError) as exc:
        raise ConfigError(f"malformed transcribed row {row!r}: {exc}") from None


def load_rows(path) -> List[ComparisonRow]:
    """Rows from an evaluate report, a list of reports or a transcribed table."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read report ({exc})") from None
    if isinstance(doc, dict) and "rows" in doc:
        return [row_from_transcribed(r) for r in doc["rows"]]
    if isinstance(doc, list):
        return [row_from_report(r) for r in doc]
    if isinstance(doc, dict):
        return [row_from_report(doc)]
    raise ConfigError(f"{path}: unrecognised report layout")


def reference_table_path() -> Path:
    return Path(str(resources.files("asdscreen") / "data" / "paper_table1.json"))


class ComparisonTable:
    def __init__(self, rows: Iterable[ComparisonRow]):
        rows = list(rows)
        if not rows:
            raise ConfigError("comparison needs at least one report")
        self.rows = sorted(rows, key=lambda r: (-r.accuracy, r.model))

    def columns(self, extended: bool = False):
        cols = [("Model", "model"), ("Accuracy (%)", "accuracy"), ("AUC", "auc")]
        if extended:
            cols += [("Precision (%)", "precision"), ("Recall (%)", "recall")]
        return cols

    def cells(self, extended: bool = False) -> List[List[str]]:
        out = []
        for row in self.rows:
            line = []
            for _, attr in self.columns(extended):
                value = getattr(row, attr)
                line.append("-" if value is None else str(value))
            out.append(line)
        return out

    def to_markdown(self, extended: bool = False) -> str:
        headers = [h for h, _ in self.columns(extended)]
        body = self.cells(extended)
        widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(headers)]

        def fmt(values):
            parts = [values[0].ljust(widths[0])]
            parts += [v.rjust(w) for v, w in zip(values[1:], widths[1:])]
            return "| " + " | ".join(parts) + " |"

        rule = "|" + "|".join(
            ["-" * (widths[0] + 2)] + ["-" * (w + 1) + ":" for w in widths[1:]]) + "|"
        return "\n".join([fmt(headers), rule] + [fmt(r) for r in body]) + "\n"

    def to_csv(self, extended: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([attr for _, attr in self.columns(extended)])
        writer.writerows(self.cells(extended))
        return buf.getvalue()

    def to_json(self, extended: bool = False) -> str:
        keys = [attr for _, attr in self.columns(extended)]
        rows = [dict(zip(keys, r)) for r in self.cells(extended)]
        return json.dumps({"rows": rows}, indent=2) + "\n"

    def render(self, fmt: str = "markdown", extended: bool = False) -> str:
        if fmt not in FORMATS:
            raise ConfigError(f"unknown report format {fmt!r}")
        return {"markdown": self.to_markdown, "csv": self.to_csv, "json": self.to_json}[fmt](extended)


# --------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    _pyplot().close(fig)
    return path


def plot_history(history, path, title: str = "") -> Path:
    """Training/validation accuracy and loss per epoch, side by side."""
    plt = _pyplot()
    epochs = [h.epoch for h in history]
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_acc.plot(epochs, [h.train_accuracy for h in history], label="train")
    ax_acc.plot(epochs, [h.val_accuracy for h in history], label="validation")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    ax_loss.plot(epochs, [h.train_loss for h in history], label="train")
    ax_loss.plot(epochs, [h.val_loss for h in history], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("BCE loss")
    ax_loss.legend()
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_roc(curve, path, auc_value: Optional[float] = None, title: str = "") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    label = f"AUC = {auc_value:.4f}" if auc_value is not None else None
    ax.plot(curve.fpr, curve.tpr, drawstyle="default", label=label)
    ax.plot([0, 1], [0, 1], linestyle=":", color="grey")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if label:
        ax.legend(loc="lower right")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_metric_bars(table: ComparisonTable, metric: str, path) -> Optional[Path]:
    """One bar per model for ``metric``; None when no row carries it."""
    rows = [r for r in table.rows if getattr(r, metric) is not None]
    if not rows:
        return None
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    values = [float(getattr(r, metric)) for r in rows]
    bars = ax.bar([r.model for r in rows], values, color="tab:blue")
    ax.bar_label(bars, labels=[str(getattr(r, metric)) for r in rows], fontsize=8)
    ax.set_ylabel(metric if metric == "auc" else f"{metric} (%)")
    lo = min(values)
    ax.set_ylim(lo - (0.05 if metric == "auc" else 5), None)
    ax.tick_params(axis="x", labelrotation=20)
    return _save(fig, path)
