"""Skeleton benchmark protocol: thinning, tolerant matching, PR sweeps, ODS/OIS/AP."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from skimage.morphology import thin as _skimage_thin

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE_FRAC = 0.0075


def default_thresholds(n: int = 99) -> list[float]:
    return [(i + 1) / (n + 1) for i in range(n)]


def f_measure(p: float, r: float) -> float:
    if p + r == 0:
        return 0.0
    return 2.0 * p * r / (p + r)


@dataclass
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return 1.0 if self.tp + self.fp == 0 else self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        return 1.0 if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)

    @property
    def f(self) -> float:
        return f_measure(self.precision, self.recall)


@dataclass
class EvalReport:
    points: list[PRPoint]
    best_threshold: float
    ods: float
    ois: float
    ap: float
    per_image_best: list[float] = field(default_factory=list)   # each image's own max F
    ois_thresholds: list[float] = field(default_factory=list)

    @property
    def ois_mean(self) -> float:
        """Mean of per-image max F; can fall below ODS when images carry very different GT mass."""
        return float(np.mean(self.per_image_best)) if self.per_image_best else self.ods

    @property
    def f_measure(self) -> float:
        return self.ods

    def to_csv(self) -> str:
        lines = ["threshold,tp,fp,fn,precision,recall,f"]
        for p in self.points:
            lines.append(f"{p.threshold:.6g},{p.tp},{p.fp},{p.fn},{p.precision:.10g},{p.recall:.10g},{p.f:.10g}")
        lines.append(f"ODS={self.ods:.10g},OIS={self.ois:.10g},AP={self.ap:.10g}")
        return "\n".join(lines) + "\n"


def thin(mask: np.ndarray) -> np.ndarray:
    """Morphological thinning to unit-width 8-connected curves (idempotent)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    return _skimage_thin(mask)


def tolerance_px(shape: Sequence[int], frac: float = DEFAULT_TOLERANCE_FRAC) -> float:
    return frac * math.hypot(shape[0], shape[1])


def _candidate_pairs(pred: np.ndarray, gt: np.ndarray, tol: float):
    """(distance, pred raster index, gt raster index) for every pair within ``tol``."""
    h, w = pred.shape
    r = int(math.floor(tol))
    py, px = np.nonzero(pred)
    gt_index = np.full(pred.shape, -1, dtype=np.int64)
    gy, gx = np.nonzero(gt)
    gt_index[gy, gx] = gy * w + gx
    dists, pi, gi = [], [], []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            d = math.hypot(dy, dx)
            if d > tol:
                continue
            ty, tx = py + dy, px + dx
            ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
            hit = np.full(py.shape, -1, dtype=np.int64)
            hit[ok] = gt_index[ty[ok], tx[ok]]
            sel = hit >= 0
            if sel.any():
                dists.append(np.full(sel.sum(), d))
                pi.append((py * w + px)[sel])
                gi.append(hit[sel])
    if not dists:
        return np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(dists), np.concatenate(pi), np.concatenate(gi)


def match_counts(pred: np.ndarray, gt: np.ndarray, tol_px: float) -> tuple[int, int, int]:
    """Greedy one-to-one matching of positives within Euclidean distance ``tol_px``.

    Candidate pairs are taken shortest first; ties are broken by the raster
    index of the predicted pixel, then of the ground-truth pixel.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from ground truth shape {gt.shape}")
    if tol_px < 0:
        raise ValueError("tolerance must be non-negative")
    n_pred, n_gt = int(pred.sum()), int(gt.sum())
    d, pi, gi = _candidate_pairs(pred, gt, tol_px)
    order = np.lexsort((gi, pi, d))
    used_p, used_g = set(), set()
    tp = 0
    for k in order:
        p, g = int(pi[k]), int(gi[k])
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        tp += 1
    return tp, n_pred - tp, n_gt - tp


def image_counts(prob: np.ndarray, gt: np.ndarray, thresholds: Sequence[float], tol_px: float,
                 thin_gt: bool = True) -> list[tuple[int, int, int]]:
    """(tp, fp, fn) per threshold for one probability map (strict ``prob > t``)."""
    gt = np.asarray(gt, dtype=bool)
    if thin_gt:
        gt = thin(gt)
    out = []
    cache: dict[bytes, tuple[int, int, int]] = {}
    for t in thresholds:
        pred = thin(prob > t)
        key = np.packbits(pred).tobytes()
        if key not in cache:
            cache[key] = match_counts(pred, gt, tol_px)
        out.append(cache[key])
    return out


def pr_sweep(dataset: Iterable[tuple[np.ndarray, np.ndarray]], thresholds: Sequence[float] | None = None,
             tol_px: float | None = None, tolerance_frac: float = DEFAULT_TOLERANCE_FRAC,
             per_image: list | None = None) -> list[PRPoint]:
    """Dataset-aggregated PR points.

    ``dataset`` yields (probability map, ground truth) pairs. When
    ``per_image`` is a list it receives each image's own PR points.
    """
    thresholds = default_thresholds() if thresholds is None else list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    totals = np.zeros((len(thresholds), 3), dtype=np.int64)
    for prob, gt in dataset:
        tol = tol_px if tol_px is not None else tolerance_px(np.shape(gt), tolerance_frac)
        counts = image_counts(prob, gt, thresholds, tol)
        totals += np.asarray(counts, dtype=np.int64).reshape(len(thresholds), 3)
        if per_image is not None:
            per_image.append([PRPoint(t, *c) for t, c in zip(thresholds, counts)])
    return [PRPoint(t, int(a), int(b), int(c)) for t, (a, b, c) in zip(thresholds, totals)]


def average_precision(points: Sequence[PRPoint]) -> float:
    """Trapezoidal area under precision-vs-recall.

    Points are ordered by recall (ties by threshold, descending); the curve
    is anchored at recall 0 with the precision of its lowest-recall point.
    """
    if not points:
        return 0.0
    pts = sorted(points, key=lambda p: (p.recall, -p.threshold))
    r = [0.0] + [p.recall for p in pts]
    pr = [pts[0].precision] + [p.precision for p in pts]
    return float(sum((r[i + 1] - r[i]) * (pr[i] + pr[i + 1]) / 2.0 for i in range(len(pts))))


def best_assignment(per_image_points: Sequence[Sequence[PRPoint]]) -> tuple[list[int], PRPoint]:
    """Per-image threshold choice maximising the pooled F.

    With counts, F = 2*tp / (2*tp + fp + fn), a ratio of sums, so Dinkelbach's
    iteration finds the exact optimum: for the current ratio p/q each image
    independently maximises q*a - p*b, and the ratio strictly rises until it
    stops changing. Integer arithmetic throughout; ties take the lowest index.
    """
    if not per_image_points:
        raise ValueError("no images")
    n_t = len(per_image_points[0])
    if any(len(img) != n_t for img in per_image_points):
        raise ValueError("every image needs the same thresholds")

    def pooled(choice):
        return tuple(sum(getattr(img[j], k) for img, j in zip(per_image_points, choice)) for k in ("tp", "fp", "fn"))

    shared = [PRPoint(0.0, *pooled([i] * len(per_image_points))).f for i in range(n_t)]
    choice = [int(np.argmax(shared))] * len(per_image_points)
    tp, fp, fn = pooled(choice)
    num, den = 2 * tp, 2 * tp + fp + fn
    if den == 0:
        return choice, PRPoint(float("nan"), 0, 0, 0)
    while True:
        new = [max(range(n_t), key=lambda j: (den * 2 * img[j].tp - num * (2 * img[j].tp + img[j].fp + img[j].fn), -j))
               for img in per_image_points]
        tp, fp, fn = pooled(new)
        n2, d2 = 2 * tp, 2 * tp + fp + fn
        if n2 * den <= num * d2:
            break
        choice, num, den = new, n2, d2
    return choice, PRPoint(float("nan"), *pooled(choice))


def summarize(points: Sequence[PRPoint], per_image_points: Sequence[Sequence[PRPoint]]) -> EvalReport:
    """ODS: best pooled F at one shared threshold. OIS: best pooled F with one threshold per image."""
    if not points:
        raise ValueError("cannot summarise an empty sweep")
    fs = [p.f for p in points]
    best = int(np.argmax(fs))
    per_image_best = [max(p.f for p in img) for img in per_image_points]
    if per_image_points:
        choice, pooled = best_assignment(per_image_points)
        ois = pooled.f
        ois_thresholds = [img[j].threshold for img, j in zip(per_image_points, choice)]
    else:
        ois, ois_thresholds = fs[best], []
    return EvalReport(list(points), points[best].threshold, fs[best], ois, average_precision(points),
                      per_image_best, ois_thresholds)


def evaluate(dataset: Iterable[tuple[np.ndarray, np.ndarray]], thresholds: Sequence[float] | None = None,
             tol_px: float | None = None, tolerance_frac: float = DEFAULT_TOLERANCE_FRAC) -> EvalReport:
    per_image: list = []
    points = pr_sweep(dataset, thresholds, tol_px, tolerance_frac, per_image)
    return summarize(points, per_image)


def oracle_gap(pred: np.ndarray, gt: np.ndarray, tol_px: float) -> int:
    """Optimal-minus-greedy match count (maximum bipartite matching via scipy)."""
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import maximum_bipartite_matching

    d, pi, gi = _candidate_pairs(np.asarray(pred, bool), np.asarray(gt, bool), tol_px)
    tp_greedy = match_counts(pred, gt, tol_px)[0]
    if d.size == 0:
        return 0
    pu, pinv = np.unique(pi, return_inverse=True)
    gu, ginv = np.unique(gi, return_inverse=True)
    m = csr_matrix((np.ones(d.size), (pinv, ginv)), shape=(pu.size, gu.size))
    best = int((maximum_bipartite_matching(m, perm_type="column") >= 0).sum())
    gap = best - tp_greedy
    if gap:
        logger.info("greedy matching is %d short of the optimum (%d)", gap, best)
    return gap
