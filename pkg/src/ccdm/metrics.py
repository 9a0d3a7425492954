"""Distribution-matching metrics for sets of label maps.

Distances are ``1 - IoU`` of the foreground masks (by default every label
except the background label 1). Two empty masks have IoU 1.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ccdm.assignment import linear_assignment
from ccdm.diffusion import LabelMap

METRIC_NAMES = ("ged", "hmiou", "div", "miou")


def _foreground(num_classes: int, foreground: Iterable[int] | None) -> np.ndarray:
    if foreground is None:
        return np.arange(2, num_classes + 1)
    return np.asarray(sorted(foreground))


def _masks(maps: Sequence[LabelMap], foreground) -> np.ndarray:
    if not maps:
        raise ValueError("empty sample set")
    shape, L = maps[0].shape, maps[0].num_classes
    for m in maps:
        if m.shape != shape:
            raise ValueError(f"label map shapes differ: {m.shape} vs {shape}")
    fg = _foreground(L, foreground)
    return np.stack([np.isin(m.labels, fg).reshape(-1) for m in maps]).astype(np.float64)


def distance_matrix(a: Sequence[LabelMap], b: Sequence[LabelMap], foreground=None) -> np.ndarray:
    """Pairwise ``1 - IoU`` between every map of ``a`` and every map of ``b``."""
    if a and b and a[0].shape != b[0].shape:
        raise ValueError(f"label map shapes differ: {a[0].shape} vs {b[0].shape}")
    ma, mb = _masks(a, foreground), _masks(b, foreground)
    inter = ma @ mb.T
    union = ma.sum(1)[:, None] + mb.sum(1)[None, :] - inter
    iou = np.divide(inter, union, out=np.ones_like(inter), where=union > 0)
    return 1.0 - iou


def iou_distance(a: LabelMap, b: LabelMap, foreground=None) -> float:
    if a.shape != b.shape:
        raise ValueError(f"label map shapes differ: {a.shape} vs {b.shape}")
    return float(distance_matrix([a], [b], foreground)[0, 0])


def _weights(n: int, w) -> np.ndarray:
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray([float(x) for x in w])
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per map")
    return w / w.sum()


def _expected(d: np.ndarray, wa: np.ndarray, wb: np.ndarray, exclude_self: bool) -> float:
    if not exclude_self:
        return float(wa @ d @ wb)
    pw = np.outer(wa, wb)
    np.fill_diagonal(pw, 0.0)
    if pw.sum() == 0:
        raise ValueError("need at least two maps when excluding self-pairs")
    return float((pw * d).sum() / pw.sum())


def ged_terms(model, gt, model_weights=None, gt_weights=None, exclude_self: bool = False,
              foreground=None) -> tuple[float, float, float]:
    """(cross, within-gt, within-model) expected distances."""
    wm = _weights(len(model), model_weights)
    wg = _weights(len(gt), gt_weights)
    cross = float(wm @ distance_matrix(model, gt, foreground) @ wg)
    within_gt = _expected(distance_matrix(gt, gt, foreground), wg, wg, exclude_self)
    within_m = _expected(distance_matrix(model, model, foreground), wm, wm, exclude_self)
    return cross, within_gt, within_m


def ged(model, gt, model_weights=None, gt_weights=None, exclude_self: bool = False,
        foreground=None) -> float:
    """Generalised energy distance ``2 E[d(s, g)] - E[d(g, g')] - E[d(s, s')]``.

    Within-set expectations include self-pairs unless ``exclude_self``.
    Optional weights turn either set into a weighted finite distribution.
    """
    cross, wg, wm = ged_terms(model, gt, model_weights, gt_weights, exclude_self, foreground)
    return 2.0 * cross - wg - wm


def hm_iou(model: Sequence[LabelMap], gt: Sequence[LabelMap], foreground=None) -> float:
    """Mean IoU of the optimal one-to-one matching after duplicating gt to n maps."""
    if not model or not gt:
        raise ValueError("hm_iou needs non-empty sets")
    n, m = len(model), len(gt)
    if n >= m:
        model_t, gt_t = list(model), [gt[i % m] for i in range(n)]
    else:
        k = n * m // math.gcd(n, m)
        model_t, gt_t = [model[i % n] for i in range(k)], [gt[i % m] for i in range(k)]
    cost = distance_matrix(model_t, gt_t, foreground)
    _, total = linear_assignment(cost)
    return 1.0 - total / len(model_t)


def diversity(model: Sequence[LabelMap], foreground=None) -> float:
    """Mean distance over distinct pairs of samples."""
    if len(model) < 2:
        raise ValueError("diversity needs at least two samples")
    d = distance_matrix(model, model, foreground)
    n = len(model)
    return float((d.sum() - np.trace(d)) / (n * (n - 1)))


def mean_iou(pred: LabelMap, gt: LabelMap, num_classes: int | None = None) -> float:
    """Per-class IoU averaged over classes present in either map."""
    if pred.shape != gt.shape:
        raise ValueError(f"label map shapes differ: {pred.shape} vs {gt.shape}")
    L = num_classes or max(pred.num_classes, gt.num_classes)
    ious = []
    for c in range(1, L + 1):
        a, b = pred.labels == c, gt.labels == c
        union = np.logical_or(a, b).sum()
        if union:
            ious.append(np.logical_and(a, b).sum() / union)
    return float(np.mean(ious))


def fuse_probabilities(prob_maps: Sequence[np.ndarray]) -> LabelMap:
    """Average (L, H, W) probability maps and take the per-pixel argmax.

    Ties go to the lowest label.
    """
    if not prob_maps:
        raise ValueError("need at least one probability map")
    shape = np.shape(prob_maps[0])
    for p in prob_maps:
        if np.shape(p) != shape:
            raise ValueError(f"probability map shapes differ: {np.shape(p)} vs {shape}")
    mean = np.mean(np.stack(prob_maps), axis=0)
    return LabelMap(np.argmax(mean, axis=0) + 1, shape[0])


# -- reports -------------------------------------------------------------------


@dataclass
class MetricReport:
    n_samples: int
    metrics: list[str]
    per_image: list[dict] = field(default_factory=list)
    ged: float | None = None
    hm_iou: float | None = None
    diversity: float | None = None
    miou: float | None = None

    def finalize(self) -> "MetricReport":
        for key, col in (("ged", "ged"), ("hm_iou", "hm_iou"), ("diversity", "diversity"),
                         ("miou", "miou")):
            vals = [row[col] for row in self.per_image if row.get(col) is not None]
            setattr(self, key, float(np.mean(vals)) if vals else None)
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        cols = ["image_id", "n", "seed", "ged", "hm_iou", "diversity", "miou"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in self.per_image:
            writer.writerow(["" if row.get(c) is None else
                             (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols])
        return buf.getvalue()


def evaluate_image(samples: Sequence[LabelMap], gt: Sequence[LabelMap], metrics=METRIC_NAMES,
                   probs: Sequence[np.ndarray] | None = None, exclude_self: bool = False,
                   gt_weights=None) -> dict:
    row: dict = {}
    if "ged" in metrics:
        row["ged"] = ged(samples, gt, gt_weights=gt_weights, exclude_self=exclude_self)
    if "hmiou" in metrics:
        row["hm_iou"] = hm_iou(samples, gt)
    if "div" in metrics:
        row["diversity"] = diversity(samples) if len(samples) > 1 else None
    if "miou" in metrics:
        L = samples[0].num_classes
        if probs is None:
            probs = [np.moveaxis(np.eye(L)[s.labels - 1], -1, 0) for s in samples]
        fused = fuse_probabilities(probs)
        row["miou"] = float(np.mean([mean_iou(fused, g, L) for g in gt]))
    return row
