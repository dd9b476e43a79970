"""
Overlap and surface-distance metrics
====================================

Dice and Jaccard measure overlap in percent.  ASD and HD95 measure how far
the two segmentation surfaces lie from each other, in voxels.
"""

import numpy as np

from dihc import metrics as M

gt = np.zeros((24, 24, 24), bool)
gt[6:18, 6:18, 6:18] = True

# Shift the prediction by one voxel along each axis in turn.
for axis in range(3):
    pred = np.roll(gt, 1, axis=axis)
    r = M.evaluate_masks(pred, gt, case_id=f"shift-{axis}")
    print(f"{r.case_id}: dice {r.dice:.2f}  jaccard {r.jaccard:.2f}  asd {r.asd:.3f}  hd95 {r.hd95:.3f}")

# A solid 3x3x3 cube has 26 surface voxels: everything but its centre.
cube = np.zeros((5, 5, 5), bool)
cube[1:4, 1:4, 1:4] = True
print("cube surface voxels:", len(M.extract_surface(cube)))

# An empty prediction has no surface, so the distances are undefined.  The
# report flags this, and the CSV writes the word "undefined".
r = M.evaluate_masks(np.zeros_like(gt), gt, "empty")
print(r)

# HD95 is robust to a few far-away voxels while ASD is not.
a = np.argwhere(np.ones((1, 6, 6), bool))
b = np.concatenate([a, [[20, 0, 0]]])
print("one outlier: asd %.3f, hd95 %.3f" % M.surface_distances(a, b))
