"""
A small semi-supervised run
===========================

Trains the three-model ensemble for 150 steps on 16^3 volumes with
narrow networks, so the whole script finishes in about a minute on one core.
The same code path, at 32^3 and 1000 steps, is what the acceptance suite runs.
"""

import tempfile
from pathlib import Path

from dihc import data as D
from dihc import metrics as M
from dihc import trainer as TR

train = D.generate_synthetic(12, shape=(16, 16, 16), seed=10)
test = D.generate_synthetic(3, shape=(16, 16, 16), seed=11)
cfg = TR.TrainConfig(t_max=150, eval_every=50, base_channels=4, labelled_fraction=0.25, seed=0)
split = D.split(train, cfg.labelled_fraction, cfg.seed)
print(f"{split.num_labelled} labelled, {split.num_unlabelled} unlabelled volumes")

untrained = TR.Trainer(cfg, split)
print("untrained Dice %.2f" % M.aggregate(untrained.evaluate(test)).dice)


def progress(rec):
    if rec.step % 25 == 0:
        b = rec.breakdown
        print(f"step {rec.step:3d}  sup {b.l_sup:.3f}  mc {b.l_mc:.4f}  dihc {b.l_dihc:.4f}  "
              f"lambda {b.lambda_cst:.4f}  disagreement {rec.disagreement:.4f}")


with tempfile.TemporaryDirectory() as tmp:
    res = TR.run(cfg, split, test, None, tmp, progress=progress)
    for step, agg in res.evals:
        print(f"eval at step {step}: dice {agg.dice:.2f}  jaccard {agg.jaccard:.2f}")
    print("files:", sorted(p.name for p in Path(tmp).iterdir()))

    # The checkpoint restores the ensemble for inference.
    models, meta = TR.models_from_checkpoint(Path(tmp) / "last.dckp")
    print(f"checkpoint at step {meta['step']}: dice {M.aggregate(TR.evaluate(models, test)).dice:.2f}")
