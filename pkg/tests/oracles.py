"""Independent reference implementations used by the unit and acceptance tests.

Written directly from the formulas with scalar loops and high-precision
arithmetic, sharing no code with the package under test.
"""

import itertools
import math

import mpmath
import numpy as np

from dihc.network import MultiScalePrediction
from dihc.tensor import Tensor

mpmath.mp.dps = 40
ALPHA1, ALPHA2, ALPHA3 = 1.0, 0.75, 0.5

def oracle_sharpen(p, temp):
    p = min(max(mpmath.mpf(float(p)), mpmath.mpf("1e-7")), 1 - mpmath.mpf("1e-7"))
    a = p ** (1 / mpmath.mpf(temp))
    b = (1 - p) ** (1 / mpmath.mpf(temp))
    return float(a / (a + b))


def oracle_ramp(t, t_max):
    return float(mpmath.mpf("0.1") * mpmath.exp(-5 * (1 - mpmath.mpf(t) / t_max)))


def oracle_dice(p, y, smooth=1e-5):
    inter = sum(float(a) * float(b) for a, b in zip(p.ravel(), y.ravel()))
    return 1 - (2 * inter + smooth) / (sum(map(float, p.ravel())) + sum(map(float, y.ravel())) + smooth)


def oracle_mse_sharp(producer, consumer, temp=0.1):
    total = 0.0
    for a, b in zip(producer.ravel(), consumer.ravel()):
        total += (oracle_sharpen(a, temp) - float(b)) ** 2
    return total / producer.size


def oracle_mc(p):
    """p[m][s]: arrays, m and s 1-based."""
    out = 0.0
    for i in (1, 2, 3):
        for j in (1, 2, 3):
            if i != j:
                out += ALPHA1 * oracle_mse_sharp(p[i][1], p[j][1])
    return out


def oracle_dihc(p):
    return (
        ALPHA2 * oracle_mse_sharp(p[1][1], p[3][2]) + ALPHA3 * oracle_mse_sharp(p[1][1], p[2][3])
        + ALPHA2 * oracle_mse_sharp(p[2][1], p[1][2]) + ALPHA3 * oracle_mse_sharp(p[2][1], p[3][3])
        + ALPHA2 * oracle_mse_sharp(p[3][1], p[2][2]) + ALPHA3 * oracle_mse_sharp(p[3][1], p[1][3])
    )


def random_preds(rng, shape=(2, 3, 3, 3), requires_grad=False):
    arrays = {m: {s: rng.uniform(0.01, 0.99, shape) for s in range(1, 5)} for m in (1, 2, 3)}
    preds = [MultiScalePrediction(m, [Tensor(arrays[m][s], requires_grad=requires_grad) for s in range(1, 5)])
             for m in (1, 2, 3)]
    return arrays, preds


def oracle_surface(m):
    """Foreground voxels with a background (or out-of-volume) 6-neighbour, by explicit scan."""
    D, H, W = m.shape
    out = []
    for z, y, x in itertools.product(range(D), range(H), range(W)):
        if not m[z, y, x]:
            continue
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            zz, yy, xx = z + dz, y + dy, x + dx
            if not (0 <= zz < D and 0 <= yy < H and 0 <= xx < W) or not m[zz, yy, xx]:
                out.append((z, y, x))
                break
    return out


def oracle_directed(a, b):
    """Exhaustive nearest distance from each point of ``a`` to the set ``b``."""
    res = []
    for p in a:
        best = min((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2 for q in b)
        res.append(math.sqrt(best))
    return np.array(res)


def oracle_p95(values):
    v = sorted(values)
    rank = 0.95 * (len(v) - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (rank - lo)


def random_mask(rng, shape=(8, 8, 8)):
    kind = rng.integers(3)
    if kind == 0:
        return rng.random(shape) < rng.uniform(0.05, 0.6)
    if kind == 1:
        zz, yy, xx = np.indices(shape)
        c = rng.uniform(1, 7, 3)
        r = rng.uniform(1.5, 4.5, 3)
        return ((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 + ((xx - c[2]) / r[2]) ** 2 <= 1
    m = np.zeros(shape, bool)
    lo = rng.integers(0, 6, 3)
    hi = lo + rng.integers(1, 4, 3)
    m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return m | (rng.random(shape) < 0.03)
