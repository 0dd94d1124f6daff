"""How the triplet alignment loss reacts to a batch of similarities.

A single pair always costs twice the margin: the positive term and the
log-sum-exp term cancel.  With more pairs, hard negatives push the loss up.
"""

import numpy as np

from gea import TALConfig, tal
from gea.tal_loss import softmax_weights
from gea.tgte import SimilarityMatrix

cfg = TALConfig()
print(f"margin={cfg.margin} temperature={cfg.temperature}")

for s in (-0.8, 0.0, 0.9):
    loss = float(tal(SimilarityMatrix.from_arrays([[s]], [0], [0]), cfg))
    print(f"K=1, S={s:+.1f}: loss={loss:.12f}")

ids = np.array([0, 0, 1, 1])
easy = np.where(ids[:, None] == ids[None, :], 0.8, -0.2)
hard = easy.copy()
hard[0, 2] = hard[2, 0] = 0.85  # one negative now outranks the positives
for name, S in (("easy", easy), ("hard", hard)):
    print(f"{name} batch: loss={float(tal(SimilarityMatrix.from_arrays(S, ids, ids), cfg)):.4f}")

# At this temperature the positive weighting is close to a hard max.
w = softmax_weights(np.array([0.70, 0.72, 0.60]), tau=cfg.temperature)
print("positive weights:", np.round(w.numpy(), 4))
