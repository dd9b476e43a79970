"""Overlap and surface-distance metrics for binary segmentations.

Distances are in voxel units with isotropic spacing. Surfaces use
6-connectivity and treat everything outside the volume as background.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

UNDEFINED = "undefined"


@dataclass
class MetricReport:
    """Scores for one case; ``asd``/``hd95`` are NaN when ``surface_defined`` is false."""

    dice: float
    jaccard: float
    asd: float
    hd95: float
    surface_defined: bool = True
    case_id: str = ""


def _check_masks(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def dice_jaccard(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Dice and Jaccard in percent; two empty masks score (100, 100)."""
    _check_masks(pred, gt)
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    inter = int(np.count_nonzero(p & g))
    sp, sg = int(np.count_nonzero(p)), int(np.count_nonzero(g))
    if sp + sg == 0:
        return 100.0, 100.0
    union = sp + sg - inter
    return 200.0 * inter / (sp + sg), 100.0 * inter / union


def surface_mask(m: np.ndarray) -> np.ndarray:
    """Boolean map of foreground voxels touching background along one of the six axis directions."""
    m = np.asarray(m, dtype=bool)
    interior = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return m & ~interior


def extract_surface(m: np.ndarray) -> np.ndarray:
    """Surface voxel coordinates, shape (K, 3), in C order."""
    return np.argwhere(surface_mask(m))


def _directed(src: np.ndarray, target_mask: np.ndarray) -> np.ndarray:
    # Nearest target voxel from the exact EDT, then the distance recomputed
    # from integer offsets so the value is sqrt of an exact integer.
    _, idx = ndimage.distance_transform_edt(~target_mask, return_indices=True)
    near = idx[:, src[:, 0], src[:, 1], src[:, 2]].T
    d2 = ((near - src) ** 2).sum(axis=1)
    return np.sqrt(d2.astype(np.float64))


def directed_distances(a: np.ndarray, b: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Distance from each coordinate in ``a`` to its nearest coordinate in ``b``."""
    target = np.zeros(shape, dtype=bool)
    target[tuple(np.asarray(b).T)] = True
    return _directed(np.asarray(a), target)


def summarize_distances(d_ab: np.ndarray, d_ba: np.ndarray) -> tuple[float, float]:
    asd = (float(np.mean(d_ab)) + float(np.mean(d_ba))) / 2.0
    hd95 = max(float(np.percentile(d_ab, 95)), float(np.percentile(d_ba, 95)))
    return asd, hd95


def surface_distances(a: np.ndarray, b: np.ndarray, shape: Sequence[int] | None = None) -> tuple[float, float]:
    """(asd, hd95) between two surfaces given as coordinate arrays; NaN pair if either is empty."""
    a = np.asarray(a, dtype=np.int64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.int64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return math.nan, math.nan
    if shape is None:
        shape = tuple(int(v) + 1 for v in np.maximum(a.max(axis=0), b.max(axis=0)))
    return summarize_distances(directed_distances(a, b, shape), directed_distances(b, a, shape))


def mask_surface_distances(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    _check_masks(pred, gt)
    return surface_distances(extract_surface(pred), extract_surface(gt), pred.shape)


def evaluate_masks(pred: np.ndarray, gt: np.ndarray, case_id: str = "") -> MetricReport:
    dice, jac = dice_jaccard(pred, gt)
    asd, hd95 = mask_surface_distances(pred, gt)
    defined = not (math.isnan(asd) or math.isnan(hd95))
    return MetricReport(dice, jac, asd, hd95, defined, case_id)


def evaluate_probabilities(prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5, case_id: str = "") -> MetricReport:
    """Threshold strictly (``prob > threshold``) and score against ``gt``."""
    return evaluate_masks(np.asarray(prob) > threshold, np.asarray(gt, dtype=bool), case_id)


def aggregate(reports: Sequence[MetricReport], case_id: str = "mean") -> MetricReport:
    """Arithmetic mean over cases; surface metrics average only the defined cases."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    dice = float(np.mean([r.dice for r in reports]))
    jac = float(np.mean([r.jaccard for r in reports]))
    defined = [r for r in reports if r.surface_defined]
    if defined:
        asd = float(np.mean([r.asd for r in defined]))
        hd95 = float(np.mean([r.hd95 for r in defined]))
    else:
        asd = hd95 = math.nan
    return MetricReport(dice, jac, asd, hd95, bool(defined), case_id)


def _fmt(x: float, defined: bool = True) -> str:
    return repr(float(x)) if defined and not math.isnan(x) else UNDEFINED


def write_csv(path, reports: Iterable[MetricReport], with_mean: bool = True):
    """Write ``case_id,dice,jaccard,asd,hd95`` rows, optionally closed by a ``mean`` row."""
    reports = list(reports)
    rows = reports + ([aggregate(reports)] if with_mean and reports else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "dice", "jaccard", "asd", "hd95"])
        for r in rows:
            w.writerow([r.case_id, _fmt(r.dice), _fmt(r.jaccard), _fmt(r.asd, r.surface_defined), _fmt(r.hd95, r.surface_defined)])


def _parse(s: str) -> float:
    return math.nan if s == UNDEFINED else float(s)


def read_csv(path) -> list[MetricReport]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            asd, hd = _parse(row["asd"]), _parse(row["hd95"])
            out.append(MetricReport(
                float(row["dice"]), float(row["jaccard"]), asd, hd,
                not (math.isnan(asd) or math.isnan(hd)), row["case_id"],
            ))
    return out
