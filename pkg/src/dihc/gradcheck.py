"""Finite-difference verification of every differentiable operation.

Each check builds small random float64 inputs, projects the op output onto a
fixed random tensor to get a scalar, and compares the reverse-mode gradient of
every input against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .tensor import NormState, Tensor

EPS = 1e-3
TOLERANCE = 1e-3
DEFAULT_SEEDS = 20


def _away_from_zero(rng, shape, margin=0.05):
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def _case_conv(rng):
    variants = [
        ((1, 2, 5, 5, 5), (3, 2, 3, 3, 3), 1, 1),
        ((2, 2, 6, 6, 6), (2, 2, 3, 3, 3), 2, 1),
        ((1, 3, 4, 4, 4), (2, 3, 1, 1, 1), 1, 0),
        ((1, 2, 5, 4, 5), (2, 2, 3, 3, 3), 1, 0),
    ]
    xs, ws, stride, pad = variants[int(rng.integers(len(variants)))]
    inputs = [rng.standard_normal(xs), rng.standard_normal(ws), rng.standard_normal(ws[0])]
    return inputs, lambda x, w, b: T.conv3d(x, w, b, stride=stride, padding=pad)


def _case_conv_transpose(rng):
    inputs = [rng.standard_normal((1, 2, 3, 3, 3)), rng.standard_normal((2, 3, 2, 2, 2)), rng.standard_normal(3)]
    return inputs, lambda x, w, b: T.conv_transpose3d(x, w, b, stride=2)


def _case_upsample(mode):
    def make(rng):
        factor = int(rng.choice([2, 4]))
        return [rng.standard_normal((1, 2, 3, 2, 3))], lambda x: T.upsample(x, factor, mode)
    return make


def _case_norm(mode):
    def make(rng):
        inputs = [rng.standard_normal((2, 4, 3, 3, 3)) * 2 + 0.5, 1 + 0.3 * rng.standard_normal(4), rng.standard_normal(4)]
        return inputs, lambda x, g, b: T.normalize(x, mode, g, b, 1e-5, NormState(training=True), groups=2)
    return make


def _unary(fn, shape=(2, 3, 4), away=False):
    def make(rng):
        x = _away_from_zero(rng, shape) if away else rng.standard_normal(shape)
        return [x], fn
    return make


def _binary(fn, positive_second=False):
    def make(rng):
        b = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)) if positive_second else rng.standard_normal((3, 4))
        return [rng.standard_normal((3, 4)), b], fn
    return make


def _case_scalar_mul(rng):
    c = float(rng.standard_normal())
    return [rng.standard_normal((3, 4))], lambda x: T.scalar_mul(x, c)


def _case_getitem(rng):
    return [rng.standard_normal((4, 3, 2))], lambda x: T.getitem(x, slice(1, 3))


def _case_sharpen(rng):
    p = rng.uniform(0.05, 0.95, (3, 4))
    temp = float(rng.uniform(0.5, 2.0))
    return [p], lambda x: L.sharpen(x, L.SharpenConfig(temp), detach=False)


def _case_dice(rng):
    y = (rng.random((2, 3, 4)) < 0.5).astype(np.float64)
    return [rng.uniform(0.05, 0.95, (2, 3, 4))], lambda p: L.dice_loss(p, y)


OPS: dict[str, Callable] = {
    "conv3d": _case_conv,
    "conv_transpose3d": _case_conv_transpose,
    "upsample_nearest": _case_upsample("nearest"),
    "upsample_trilinear": _case_upsample("trilinear"),
    "normalize_batch": _case_norm("batch"),
    "normalize_group": _case_norm("group"),
    "normalize_instance": _case_norm("instance"),
    "relu": _unary(T.relu, away=True),
    "sigmoid": _unary(T.sigmoid),
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_second=True),
    "scalar_mul": _case_scalar_mul,
    "square": _unary(T.square),
    "sum": _unary(T.tsum),
    "mean": _unary(T.mean),
    "mse": _binary(T.mse),
    "getitem": _case_getitem,
    "reshape": _unary(lambda x: T.reshape(x, (4, 6))),
    "sharpen": _case_sharpen,
    "dice_loss": _case_dice,
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_once(make: Callable, seed: int, eps: float = EPS) -> float:
    """Worst relative gradient error over all inputs for one random draw."""
    rng = np.random.default_rng(seed)
    arrays, fn = make(rng)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe_out = fn(*[Tensor(a) for a in arrays])
    proj = rng.standard_normal(probe_out.shape)

    def objective(arrs):
        with T.no_grad():
            out = fn(*[Tensor(a) for a in arrs])
        return float(np.sum(out.data * proj))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    T.backward(T.tsum(T.mul(out, Tensor(proj))))
    worst = 0.0
    for idx, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[idx])
        numeric = np.zeros_like(arrays[idx])
        base = [a.copy() for a in arrays]
        flat = base[idx].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = objective(base)
            flat[j] = orig - eps
            fm = objective(base)
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@dataclass
class OpResult:
    name: str
    worst_error: float
    seeds: int
    passed: bool


def run_suite(seed: int = 0, n_seeds: int = DEFAULT_SEEDS, ops: Sequence[str] | None = None,
              tolerance: float = TOLERANCE) -> list:
    """One result per op over seeds ``seed .. seed + n_seeds - 1``."""
    names = list(OPS) if ops is None else list(ops)
    results = []
    for name in names:
        make = OPS[name]
        worst = 0.0
        for s in range(seed, seed + n_seeds):
            try:
                err = check_once(make, s)
            except Exception:  # a crashing backward counts as a failed check
                err = float("inf")
            worst = max(worst, err if np.isfinite(err) else float("inf"))
        results.append(OpResult(name, worst, n_seeds, worst <= tolerance))
    return results


def format_results(results: Sequence[OpResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  worst_rel_err={r.worst_error:.3e}  seeds={r.seeds}  {'ok' if r.passed else 'FAIL'}"
             for r in results]
    return "\n".join(lines)
