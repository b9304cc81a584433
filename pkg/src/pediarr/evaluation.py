"""Confusion matrices, macro metrics and the similarity/compactness exports."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

METRIC_NAMES = ("top1_acc", "macro_specificity", "macro_precision", "macro_recall",
                "macro_f1", "macro_f2")


def confusion(preds, labels, n_classes: int = 6) -> np.ndarray:
    """counts[true - 1, pred - 1]; class ids are 1..C."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    for arr in (preds, labels):
        if arr.size and (arr.min() < 1 or arr.max() > n_classes):
            raise ValueError(f"class id outside 1..{n_classes}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels - 1, preds - 1), 1)
    return cm


def _safe_div(num, den):
    num, den = np.asarray(num, float), np.asarray(den, float)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def per_class_metrics(cm) -> dict[str, np.ndarray]:
    """One-vs-rest per-class values as fractions; 0/0 counts as 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    p = _safe_div(tp, tp + fp)
    r = _safe_div(tp, tp + fn)
    return {
        "precision": p,
        "recall": r,
        "specificity": _safe_div(tn, tn + fp),
        "f1": _safe_div(2 * p * r, p + r),
        "f2": _safe_div(5 * p * r, 4 * p + r),
    }


def _pct(x: float) -> str:
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class MetricReport:
    top1_acc: float
    macro_specificity: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_f2: float

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_text(self) -> str:
        return "".join(f"{k}={_pct(v)}\n" for k, v in self.as_dict().items())

    def to_csv_row(self) -> str:
        return ",".join(_pct(v) for v in self.as_dict().values())


def macro_metrics(cm) -> MetricReport:
    """Top-1 accuracy and unweighted class means, all in percent."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    pc = per_class_metrics(cm)
    return MetricReport(
        top1_acc=100.0 * np.trace(cm) / total,
        macro_specificity=100.0 * pc["specificity"].mean(),
        macro_precision=100.0 * pc["precision"].mean(),
        macro_recall=100.0 * pc["recall"].mean(),
        macro_f1=100.0 * pc["f1"].mean(),
        macro_f2=100.0 * pc["f2"].mean(),
    )


def write_report(report: MetricReport, cm: np.ndarray, path: str | Path) -> None:
    lines = [report.to_text(), "confusion=" + ";".join(",".join(map(str, r)) for r in cm) + "\n"]
    Path(path).write_text("".join(lines))


def write_report_table(rows: dict[str, MetricReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("run," + ",".join(METRIC_NAMES) + "\n")
        for name, rep in rows.items():
            fh.write(f"{name},{rep.to_csv_row()}\n")


# ---------------------------------------------------------------------------
# embedding analyses


@dataclass
class CompactnessStats:
    similarities: dict[int, np.ndarray]
    quartiles: dict[int, tuple[float, float, float]]
    flagged: dict[int, int]  # class -> number of excluded samples


def class_compactness(embeddings, labels) -> CompactnessStats:
    """Cosine similarity of every sample to its class centroid (arithmetic mean)."""
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    sims, quarts, flagged = {}, {}, {}
    for c in np.unique(labels):
        zc = z[labels == c]
        centroid = zc.mean(axis=0)
        cn = np.linalg.norm(centroid)
        norms = np.linalg.norm(zc, axis=1)
        ok = norms > 0 if cn > 1e-12 else np.zeros(len(zc), bool)
        flagged[int(c)] = int((~ok).sum())
        if flagged[int(c)]:
            log.warning("class %d: %d samples excluded from compactness", c, flagged[int(c)])
        s = zc[ok] @ centroid / (norms[ok] * cn) if ok.any() else np.empty(0)
        sims[int(c)] = s
        quarts[int(c)] = tuple(float(q) for q in np.percentile(s, [25, 50, 75])) if s.size \
            else (np.nan, np.nan, np.nan)
    return CompactnessStats(sims, quarts, flagged)


def write_compactness(stats: CompactnessStats, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "cosine_to_centroid"])
        for c, vals in stats.similarities.items():
            for v in vals:
                w.writerow([c, repr(float(v))])


def export_similarity_series(snapshots, path: str | Path) -> None:
    """Long-format rows (epoch, class_i, class_j, S_ij) with 1-based classes."""
    snapshots = [np.asarray(s) for s in snapshots]
    if not snapshots:
        raise ValueError("need at least one snapshot")
    c = snapshots[0].shape
    if any(s.shape != c for s in snapshots):
        raise ValueError("inconsistent class count across snapshots")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "class_i", "class_j", "S_ij"])
        for epoch, S in enumerate(snapshots):
            for i in range(c[0]):
                for j in range(c[1]):
                    w.writerow([epoch, i + 1, j + 1, repr(float(S[i, j]))])


def read_similarity_series(path: str | Path) -> list[np.ndarray]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append((int(r["epoch"]), int(r["class_i"]), int(r["class_j"]), float(r["S_ij"])))
    n_epochs = max(r[0] for r in rows) + 1
    c = max(r[1] for r in rows)
    out = [np.zeros((c, c)) for _ in range(n_epochs)]
    for e, i, j, v in rows:
        out[e][i - 1, j - 1] = v
    return out


def export_heatmap(S, path: str | Path) -> None:
    """Final-epoch similarity matrix as a plain CSV grid."""
    np.savetxt(path, np.asarray(S), delimiter=",", fmt="%.17g")
