"""
Supervision and consistency losses by hand
==========================================

Three sub-models each emit four probability maps, one per decoder level.
Labelled slots get a Dice loss on every map.  All slots get two consistency
terms built from sharpened final-head predictions: a mutual term between the
final heads of every ordered model pair, and a diagonal term that asks the
intermediate heads of one model to agree with another model's final head.
"""

import numpy as np

from dihc import losses as L
from dihc.network import MultiScalePrediction
from dihc.tensor import Tensor, backward

rng = np.random.default_rng(0)

# Sharpening pushes soft predictions toward 0 or 1; T = 0.1 is aggressive.
p = np.array([0.1, 0.4, 0.5, 0.6, 0.9])
print("p          ", p)
print("sharpen T=1", L.sharpen(Tensor(p), L.SharpenConfig(1.0)).data.round(4))
print("sharpen T=.1", L.sharpen(Tensor(p)).data.round(6))

# The pairing table lists who teaches whom.  Scale 1 is the final head.
for pair in L.PAIRING.dihc_pairs:
    w = L.ConsistencyWeights().for_scale(pair.scale)
    print(f"model {pair.producer} final head -> model {pair.consumer} scale {pair.scale}  (weight {w})")

# Random predictions for a batch of two 4^3 volumes.
preds = [MultiScalePrediction(m, [Tensor(rng.uniform(0.05, 0.95, (2, 4, 4, 4)), requires_grad=True)
                                  for _ in range(4)]) for m in (1, 2, 3)]
y = (rng.random((1, 4, 4, 4)) < 0.3).astype(np.float64)

l_sup = L.deep_supervised_loss(preds, y, labelled=slice(0, 1))
l_mc = L.mutual_consistency_loss(preds)
l_dihc = L.diagonal_consistency_loss(preds)
for t in (0, 500, 999):
    _, bd = L.total_loss(l_sup, l_mc, l_dihc, t, L.RampSchedule(999))
    print(f"t={t:4d}  lambda={bd.lambda_cst:.5f}  sup={bd.l_sup:.3f}  mc={bd.l_mc:.3f}  "
          f"dihc={bd.l_dihc:.3f}  total={bd.l_total:.3f}")

# Pseudo labels are constants: gradients of a consistency term reach only the
# consumer's prediction, never the producer's.
(pair, _, term), = L.consistency_terms(preds, [L.Pair(1, 2, 1)], L.ConsistencyWeights())
backward(term)
print("producer grad:", preds[0].scale(1).grad, " consumer grad norm:",
      float(np.linalg.norm(preds[1].scale(1).grad)))
