"""Classification metrics and the per-task / per-class report tables."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

REPORT_SCHEMA_VERSION = 1
NOT_INTRODUCED = "—"


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
    return cm


def precision_recall_f(confusion: np.ndarray, class_index: int) -> tuple[float, float, float]:
    """Per-class precision, recall and F1; a zero denominator yields 0."""
    cm = np.asarray(confusion)
    tp = float(cm[class_index, class_index])
    fp = float(cm[:, class_index].sum()) - tp
    fn = float(cm[class_index, :].sum()) - tp
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class TaskReport:
    task_index: int
    class_symbols: list
    confusion: list
    method: str = "uird"
    n_real: int = 0
    n_synthetic: int = 0
    updated: bool = True
    notes: str = ""
    per_class: dict = field(default_factory=dict)
    macro: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.per_class:
            cm = np.asarray(self.confusion, dtype=np.int64).reshape(len(self.class_symbols), -1)
            self.per_class = {}
            for i, sym in enumerate(self.class_symbols):
                p, r, f = precision_recall_f(cm, i)
                self.per_class[sym] = {"precision": p, "recall": r, "f_score": f,
                                       "support": int(cm[i].sum())}
        if not self.macro:
            P, R, F = macro_average(self)
            self.macro = {"precision": P, "recall": R, "f_score": F}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA_VERSION
        d["zero_division"] = 0
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskReport":
        d = dict(d)
        version = d.pop("schema_version", REPORT_SCHEMA_VERSION)
        if version != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {version}")
        d.pop("zero_division", None)
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TaskReport":
        return cls.from_dict(json.loads(text))


def build_report(y_true, y_pred, class_symbols: Sequence[str], task_index: int, **kwargs) -> TaskReport:
    """Report from label sequences; labels must belong to ``class_symbols``."""
    index = {s: i for i, s in enumerate(class_symbols)}
    t = [index[s] for s in y_true]
    p = [index[s] for s in y_pred]
    cm = confusion_matrix(t, p, len(class_symbols))
    return TaskReport(task_index, list(class_symbols), cm.tolist(), **kwargs)


def macro_average(report: TaskReport) -> tuple[float, float, float]:
    """Unweighted mean over classes that have at least one true sample."""
    rows = [m for m in report.per_class.values() if m["support"] > 0]
    if not rows:
        return 0.0, 0.0, 0.0
    n = len(rows)
    return (sum(m["precision"] for m in rows) / n,
            sum(m["recall"] for m in rows) / n,
            sum(m["f_score"] for m in rows) / n)


# ----------------------------------------------------------------- tables


def _group(reports) -> dict[str, list[TaskReport]]:
    if isinstance(reports, Mapping):
        return {k: sorted(v, key=lambda r: r.task_index) for k, v in reports.items()}
    grouped: dict[str, list[TaskReport]] = {}
    for r in reports:
        grouped.setdefault(r.method, []).append(r)
    return {k: sorted(v, key=lambda r: r.task_index) for k, v in grouped.items()}


def emit_task_table(reports, fmt: str = "markdown") -> str:
    """Macro precision / recall / F per method and task.

    ``reports`` is a list of TaskReports (grouped by their ``method``) or a
    mapping method -> reports. Markdown and CSV round to two decimals; JSON
    keeps full precision.
    """
    grouped = _group(reports)
    rows = [(m, r.task_index, r.macro["precision"], r.macro["recall"], r.macro["f_score"])
            for m, rs in grouped.items() for r in rs]
    if fmt == "json":
        return json.dumps([{"method": m, "task": t, "precision": p, "recall": r, "f_score": f}
                           for m, t, p, r, f in rows], indent=2)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "task", "precision", "recall", "f_score"])
        for m, t, p, r, f in rows:
            w.writerow([m, t, f"{p:.2f}", f"{r:.2f}", f"{f:.2f}"])
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown table format {fmt!r}")
    tasks = sorted({t for _, t, *_ in rows})
    header = ["Method"] + [f"Task {t} {c}" for t in tasks for c in ("Precision", "Recall", "F-score")]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for m, rs in grouped.items():
        by_task = {r.task_index: r for r in rs}
        cells = [m]
        for t in tasks:
            r = by_task.get(t)
            if r is None:
                cells += [NOT_INTRODUCED] * 3
            else:
                cells += [f"{r.macro[k]:.2f}" for k in ("precision", "recall", "f_score")]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def forgetting_cells(reports: Sequence[TaskReport]) -> dict[str, dict[int, float | None]]:
    """class -> task -> F-score, ``None`` before the class was introduced."""
    tasks = [r.task_index for r in reports]
    classes: list[str] = []
    for r in reports:
        for s in r.class_symbols:
            if s not in classes:
                classes.append(s)
    cells = {c: {t: None for t in tasks} for c in classes}
    for r in reports:
        for s, m in r.per_class.items():
            if m["support"] > 0:
                cells[s][r.task_index] = m["f_score"]
    return cells


def emit_forgetting_table(reports, fmt: str = "markdown") -> str:
    """Per-class F-score across tasks (rows: method/class, columns: tasks)."""
    grouped = _group(reports)
    tasks = sorted({r.task_index for rs in grouped.values() for r in rs})
    out_rows = []
    for m, rs in grouped.items():
        for cls, by_task in forgetting_cells(rs).items():
            vals = [by_task.get(t) for t in tasks]
            out_rows.append((m, cls, vals))
    if fmt == "json":
        return json.dumps([{"method": m, "class": c, "f_scores": dict(zip(map(str, tasks), v))}
                           for m, c, v in out_rows], indent=2)
    fmt_cell = lambda v: NOT_INTRODUCED if v is None else f"{v:.2f}"  # noqa: E731
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "class"] + [f"task_{t}" for t in tasks])
        for m, c, v in out_rows:
            w.writerow([m, c] + [fmt_cell(x) for x in v])
        return buf.getvalue()
    header = ["Method", "Class"] + [f"Task {t}" for t in tasks]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for m, c, v in out_rows:
        lines.append("| " + " | ".join([m, f'"{c}" type'] + [fmt_cell(x) for x in v]) + " |")
    return "\n".join(lines) + "\n"
