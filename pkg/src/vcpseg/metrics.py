"""Pixel- and image-level anomaly metrics and per-product report tables.

Pixel metrics pool every pixel of a product's images. PRO uses 8-connected
ground-truth regions and integrates the per-region-overlap curve over the
false-positive-rate range ``[0, fpr_limit]``, normalized by the limit.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import UndefinedMetric

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class ScoredSample:
    scores: np.ndarray
    mask: np.ndarray
    product: str = ""
    image_score: float | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.mask = np.asarray(self.mask)
        if self.scores.shape != self.mask.shape:
            raise ValueError(f"scores {self.scores.shape} and mask {self.mask.shape} differ")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary")
        self.mask = self.mask.astype(bool)
        if self.image_score is None:
            self.image_score = float(self.scores.max())

    @property
    def label(self) -> int:
        return int(self.mask.any())


def _pool(samples) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    scores = np.concatenate([s.scores.ravel() for s in samples]) if samples else np.empty(0)
    labels = np.concatenate([s.mask.ravel() for s in samples]) if samples else np.empty(0, bool)
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _descending_groups(scores, *weights):
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    return [np.cumsum(w[order])[ends] for w in weights]


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve: sum of (R_k - R_{k-1}) * P_k."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetric("AP needs at least one positive sample")
    tp, pp = _descending_groups(scores, labels.astype(np.float64), np.ones_like(scores))
    precision = tp / pp
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)


def pro_curve(samples) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, PRO) at every distinct threshold, starting from (0, 0), thresholds descending."""
    samples = list(samples)
    scores, labels = _pool(samples)
    weights = []
    n_regions = 0
    for s in samples:
        lab, k = label_regions(s.mask)
        w = np.zeros(lab.shape, dtype=np.float64)
        if k:
            sizes = np.bincount(lab.ravel(), minlength=k + 1).astype(np.float64)
            w[lab > 0] = 1.0 / sizes[lab[lab > 0]]
        weights.append(w.ravel())
        n_regions += k
    if n_regions == 0:
        raise UndefinedMetric("PRO needs at least one anomalous region")
    n_neg = int((~labels).sum())
    if n_neg == 0:
        raise UndefinedMetric("PRO needs at least one normal pixel")
    overlap, fp = _descending_groups(scores, np.concatenate(weights), (~labels).astype(np.float64))
    return np.r_[0.0, fp / n_neg], np.r_[0.0, overlap / n_regions]


def integrate_limited(fpr: np.ndarray, pro: np.ndarray, fpr_limit: float) -> float:
    """Trapezoid area of a monotone curve on ``[0, fpr_limit]`` divided by the limit."""
    keep = fpr <= fpr_limit
    x, y = fpr[keep], pro[keep]
    if x[-1] < fpr_limit and keep.size > keep.sum():
        j = int(np.argmax(~keep))  # first point beyond the limit
        x0, x1, y0, y1 = fpr[j - 1], fpr[j], pro[j - 1], pro[j]
        y_lim = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
        x, y = np.r_[x, fpr_limit], np.r_[y, y_lim]
    return float(np.trapezoid(y, x) / fpr_limit)


def pro(samples, fpr_limit: float = 0.3, steps: int | None = None) -> float:
    """Normalized area under the PRO curve up to ``fpr_limit``.

    ``steps=None`` evaluates every distinct threshold (exact). An integer
    instead samples that many equally spaced thresholds between the score
    extremes, the approximation used by many public evaluation scripts.
    """
    samples = list(samples)
    if steps is None:
        fpr, ovl = pro_curve(samples)
        return integrate_limited(fpr, ovl, fpr_limit)
    scores, labels = _pool(samples)
    regions = [label_regions(s.mask) for s in samples]
    if sum(k for _, k in regions) == 0:
        raise UndefinedMetric("PRO needs at least one anomalous region")
    n_neg = int((~labels).sum())
    fprs, pros = [0.0], [0.0]
    for t in np.linspace(scores.max(), scores.min(), steps):
        fp, ovl = 0, []
        for s, (lab, k) in zip(samples, regions):
            pred = s.scores >= t
            fp += int((pred & ~s.mask).sum())
            for r in range(1, k + 1):
                region = lab == r
                ovl.append((pred & region).sum() / region.sum())
        fprs.append(fp / n_neg)
        pros.append(float(np.mean(ovl)))
    return integrate_limited(np.asarray(fprs), np.asarray(pros), fpr_limit)


def pixel_auroc(samples) -> float:
    return auroc(*_pool(samples))


def pixel_ap(samples) -> float:
    return average_precision(*_pool(samples))


def image_metrics(samples) -> tuple[float, float]:
    samples = list(samples)
    scores = np.array([s.image_score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=bool)
    return auroc(scores, labels), average_precision(scores, labels)


@dataclass
class ProductMetrics:
    product: str
    auroc: float
    pro: float
    ap: float
    image_auroc: float | None = None
    image_ap: float | None = None


def evaluate_product(product: str, samples, fpr_limit: float = 0.3, pro_steps: int | None = None) -> ProductMetrics:
    samples = list(samples)
    try:
        img = image_metrics(samples)
    except UndefinedMetric:
        img = (None, None)
    return ProductMetrics(
        product,
        pixel_auroc(samples),
        pro(samples, fpr_limit, pro_steps),
        pixel_ap(samples),
        *img,
    )


def _pct(x: float | None) -> str:
    return "" if x is None else f"{100.0 * x:.1f}"


@dataclass
class EvalReport:
    rows: list[ProductMetrics]
    mean: ProductMetrics = field(init=False)

    def __post_init__(self):
        if not self.rows:
            raise ValueError("report needs at least one product")

        def avg(attr):
            vals = [getattr(r, attr) for r in self.rows]
            return None if any(v is None for v in vals) else float(np.mean(vals))

        self.mean = ProductMetrics("mean", *(avg(a) for a in ("auroc", "pro", "ap", "image_auroc", "image_ap")))

    def triple(self, row: ProductMetrics) -> str:
        return f"{_pct(row.auroc)}, {_pct(row.pro)}, {_pct(row.ap)}"

    def to_text(self) -> str:
        header = ("product", "AUROC", "PRO", "AP", "I-AUROC", "I-AP")
        lines = [header]
        for r in [*self.rows, self.mean]:
            lines.append((r.product, _pct(r.auroc), _pct(r.pro), _pct(r.ap), _pct(r.image_auroc), _pct(r.image_ap)))
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        out = []
        for j, line in enumerate(lines):
            cells = [line[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(line[1:], widths[1:])]
            out.append("  ".join(cells).rstrip())
            if j == 0:
                out.append("-" * len(out[0]))
        return "\n".join(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["product", "auroc", "pro", "ap", "image_auroc", "image_ap"])
        for r in [*self.rows, self.mean]:
            writer.writerow([r.product, _pct(r.auroc), _pct(r.pro), _pct(r.ap), _pct(r.image_auroc), _pct(r.image_ap)])
        return buf.getvalue()


def build_report(per_product: Sequence[ProductMetrics] | Iterable[ProductMetrics]) -> EvalReport:
    return EvalReport(list(per_product))


SEED_METRICS = ("auroc", "pro", "ap", "image_auroc", "image_ap")


@dataclass
class SeedSummary:
    """Mean and sample standard deviation of per-product metrics across independent runs."""

    runs: int
    rows: list[tuple[str, dict[str, tuple[float, float] | None]]]

    def to_text(self) -> str:
        lines = [f"{self.runs} runs, mean +/- std (percent)"]
        width = max(len(p) for p, _ in self.rows)
        for product, stats in self.rows:
            cells = []
            for k in SEED_METRICS:
                s = stats[k]
                cells.append(f"{k} " + ("n/a" if s is None else f"{100 * s[0]:.1f} +/- {100 * s[1]:.1f}"))
            lines.append(f"{product.ljust(width)}  " + "  ".join(cells))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["product", *(f"{k}_{s}" for k in SEED_METRICS for s in ("mean", "std"))])
        for product, stats in self.rows:
            cells = []
            for k in SEED_METRICS:
                s = stats[k]
                cells += ["", ""] if s is None else [f"{100 * s[0]:.2f}", f"{100 * s[1]:.2f}"]
            writer.writerow([product, *cells])
        return buf.getvalue()


def aggregate_runs(reports: Sequence[EvalReport]) -> SeedSummary:
    """Combine reports of runs that differ only in seed; products must match across runs."""
    if not reports:
        raise ValueError("need at least one report")
    products = [r.product for r in reports[0].rows]
    for rep in reports[1:]:
        if [r.product for r in rep.rows] != products:
            raise ValueError("runs were evaluated on different products")
    ddof = 1 if len(reports) > 1 else 0
    rows = []
    for i, product in enumerate([*products, "mean"]):
        picked = [rep.rows[i] if i < len(products) else rep.mean for rep in reports]
        stats = {}
        for k in SEED_METRICS:
            vals = [getattr(p, k) for p in picked]
            stats[k] = None if any(v is None for v in vals) else (float(np.mean(vals)), float(np.std(vals, ddof=ddof)))
        rows.append((product, stats))
    return SeedSummary(len(reports), rows)
