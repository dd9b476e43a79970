"""Training objectives: deep-supervised Dice, pseudo-label sharpening,
mutual and diagonal hierarchical consistency, warm-up schedule, total loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

SHARPEN_CLAMP = 1e-7


@dataclass(frozen=True)
class SharpenConfig:
    T: float = 0.1

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"sharpening temperature must be > 0, got {self.T}")


@dataclass(frozen=True)
class ConsistencyWeights:
    alpha1: float = 1.0
    alpha2: float = 0.75
    alpha3: float = 0.5

    def __post_init__(self):
        if not (self.alpha1 >= self.alpha2 >= self.alpha3 > 0):
            raise ValueError(f"need alpha1 >= alpha2 >= alpha3 > 0, got {self}")

    def for_scale(self, scale: int) -> float:
        return {1: self.alpha1, 2: self.alpha2, 3: self.alpha3}[scale]


@dataclass(frozen=True)
class RampSchedule:
    t_max: int
    base: float = 0.1
    lambda_sup: float = 1.0
    squared: bool = False

    def __post_init__(self):
        if self.t_max <= 0:
            raise ValueError(f"t_max must be positive, got {self.t_max}")


@dataclass
class LossBreakdown:
    l_sup: float
    l_mc: float
    l_dihc: float
    lambda_cst: float
    l_total: float
    lambda_sup: float = 1.0


@dataclass(frozen=True)
class Pair:
    """Sharpened scale-1 map of ``producer`` supervises ``consumer`` at ``scale``."""

    producer: int
    consumer: int
    scale: int


@dataclass(frozen=True)
class PairingTable:
    mc_pairs: tuple
    dihc_pairs: tuple


def default_pairing(n_models: int = 3) -> PairingTable:
    mc = tuple(Pair(i, j, 1) for i in range(1, n_models + 1) for j in range(1, n_models + 1) if i != j)
    dihc = (
        Pair(1, 3, 2), Pair(1, 2, 3),
        Pair(2, 1, 2), Pair(2, 3, 3),
        Pair(3, 2, 2), Pair(3, 1, 3),
    )
    return PairingTable(mc, dihc)


PAIRING = default_pairing()


# ---------------------------------------------------------------------------


def _as_array(y) -> np.ndarray:
    return y.data if isinstance(y, Tensor) else np.asarray(y)


def dice_loss(p: Tensor, y, smooth: float = 1e-5) -> Tensor:
    """``1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth)`` over the whole tensor."""
    yd = _as_array(y).astype(p.dtype, copy=False)
    if yd.shape != p.shape:
        raise ValueError(f"dice_loss: shape mismatch {p.shape} vs {yd.shape}")
    yt = Tensor(yd)
    inter = T.tsum(T.mul(p, yt))
    denom = T.add(T.tsum(p), float(yd.sum(dtype=np.float64)) + smooth)
    ratio = T.div(T.add(T.scalar_mul(inter, 2.0), smooth), denom)
    return T.add(T.scalar_mul(ratio, -1.0), 1.0)


def deep_supervised_loss(preds: Sequence, y, labelled=None, scales: int | None = None, smooth: float = 1e-5) -> Tensor:
    """Unweighted sum of Dice losses over every model and scale.

    ``labelled`` selects the labelled batch slots (e.g. ``slice(0, 2)``);
    ``scales`` limits supervision to the first ``scales`` heads.
    """
    total = None
    for pred in preds:
        n_s = pred.num_scales if scales is None else scales
        for s in range(1, n_s + 1):
            p = pred.scale(s)
            if labelled is not None:
                p = T.getitem(p, labelled)
            term = dice_loss(p, y, smooth)
            total = term if total is None else T.add(total, term)
    return total


def _sharpen_array(p: np.ndarray, temperature: float) -> np.ndarray:
    # p^(1/T) / (p^(1/T) + (1-p)^(1/T)) rewritten as a logistic of the scaled
    # log-odds, evaluated in float64 so small T cannot underflow to 0/0.
    pc = np.clip(p.astype(np.float64), SHARPEN_CLAMP, 1.0 - SHARPEN_CLAMP)
    z = (np.log(pc) - np.log1p(-pc)) / temperature
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sharpen(p: Tensor, cfg: SharpenConfig = SharpenConfig(), detach: bool = True) -> Tensor:
    """Temperature sharpening into a soft pseudo label (a constant unless ``detach=False``)."""
    if np.isnan(p.data).any():
        raise ValueError("sharpen: prediction contains NaN")
    s64 = _sharpen_array(p.data, cfg.T)
    s = s64.astype(p.dtype)
    if detach:
        return Tensor(s)
    pd = p.data.astype(np.float64)
    inside = (pd > SHARPEN_CLAMP) & (pd < 1.0 - SHARPEN_CLAMP)
    pc = np.clip(pd, SHARPEN_CLAMP, 1.0 - SHARPEN_CLAMP)
    ds = (s64 * (1.0 - s64) / cfg.T * (1.0 / pc + 1.0 / (1.0 - pc)) * inside).astype(p.dtype)
    return T._make(s, (p,), lambda g: (g * ds,), "sharpen")


def _by_index(preds: Sequence) -> dict:
    return {p.model_index: p for p in preds}


def consistency_terms(preds: Sequence, pairs: Sequence[Pair], w: ConsistencyWeights,
                      cfg: SharpenConfig = SharpenConfig(), detach: bool = True) -> list:
    """Weighted MSE terms ``(pair, weight, tensor)`` for a pairing list."""
    by = _by_index(preds)
    pseudo = {}
    terms = []
    for pr in pairs:
        if pr.producer not in pseudo:
            pseudo[pr.producer] = sharpen(by[pr.producer].scale(1), cfg, detach)
        weight = w.for_scale(pr.scale)
        val = T.mse(pseudo[pr.producer], by[pr.consumer].scale(pr.scale))
        terms.append((pr, weight, T.scalar_mul(val, weight)))
    return terms


def _sum_terms(terms) -> Tensor:
    total = None
    for _, _, t in terms:
        total = t if total is None else T.add(total, t)
    return total


def mutual_consistency_loss(preds: Sequence, w: ConsistencyWeights = ConsistencyWeights(),
                            cfg: SharpenConfig = SharpenConfig(), detach: bool = True) -> Tensor:
    """Sum over ordered model pairs of alpha1 * MSE(sharpen(final_i), final_j)."""
    return _sum_terms(consistency_terms(preds, PAIRING.mc_pairs, w, cfg, detach))


def diagonal_consistency_loss(preds: Sequence, w: ConsistencyWeights = ConsistencyWeights(),
                              cfg: SharpenConfig = SharpenConfig(), detach: bool = True) -> Tensor:
    """The six diagonal (producer final -> other consumer's scale-2/3) terms."""
    return _sum_terms(consistency_terms(preds, PAIRING.dihc_pairs, w, cfg, detach))


def ramp_weight(t: int, sched: RampSchedule) -> float:
    """Consistency warm-up ``base * exp(-5 * (1 - t/t_max))``, t clamped to [0, t_max]."""
    t = min(max(t, 0), sched.t_max)
    r = 1.0 - t / sched.t_max
    if sched.squared:
        r = r * r
    return sched.base * math.exp(-5.0 * r)


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(l_sup, l_mc, l_dihc, t: int, sched: RampSchedule):
    """Weighted sum of supervised and consistency terms plus a logging breakdown."""
    lam = ramp_weight(t, sched)
    parts = []
    if isinstance(l_sup, Tensor):
        parts.append(T.scalar_mul(l_sup, sched.lambda_sup))
    cst = [x for x in (l_mc, l_dihc) if isinstance(x, Tensor)]
    for c in cst:
        parts.append(T.scalar_mul(c, lam))
    total = None
    for p in parts:
        total = p if total is None else T.add(total, p)
    sup_v, mc_v, dihc_v = _value(l_sup), _value(l_mc), _value(l_dihc)
    l_total = sched.lambda_sup * sup_v + lam * (mc_v + dihc_v)
    if total is None:
        total = Tensor(np.asarray(l_total, dtype=np.float32))
    return total, LossBreakdown(sup_v, mc_v, dihc_v, lam, l_total, sched.lambda_sup)
