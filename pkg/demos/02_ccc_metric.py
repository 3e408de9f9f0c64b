# coding: utf-8

# # Concordance correlation
#
# CCC rewards predictions that track the labels *and* share their mean and
# scale. Pearson correlation only asks for the first.

import numpy as np

from capnet.metrics import CCCAccumulator, ccc, ccc_loss_and_grad, pcc

y = np.linspace(-0.8, 0.8, 50)
print("perfect:      ", round(ccc(y, y).ccc, 6))
print("shifted +0.3: ", round(ccc(y + 0.3, y).ccc, 4), " pearson", round(pcc(y + 0.3, y), 4))
print("halved:       ", round(ccc(y / 2, y).ccc, 4), " pearson", round(pcc(y / 2, y), 4))
print("anti:         ", round(ccc(-y, y).ccc, 4))

# Hand-checkable fixture: means (2/3, 1), variances (2/9, 2/3), covariance 1/3.

s = ccc([0, 1, 1], [0, 1, 2])
print(s)

# ## Global versus per-batch
#
# Evaluation accumulates moments over the whole set. Accumulators over
# disjoint chunks merge exactly, so the order of batches does not matter.

rng = np.random.default_rng(1)
pred, lab = rng.normal(size=1000), rng.normal(size=1000)
left = CCCAccumulator().update(pred[:300], lab[:300])
right = CCCAccumulator().update(pred[300:], lab[300:])
print(left.merge(right).stats().ccc, ccc(pred, lab).ccc)

# ## Training loss
#
# The loss is 1 - mean CCC over the valence and arousal columns of a batch.

P = rng.uniform(-1, 1, size=(8, 2))
Y = rng.uniform(-1, 1, size=(8, 2))
loss, grad = ccc_loss_and_grad(P, Y)
print("loss", loss)
print("loss at P=Y", ccc_loss_and_grad(Y, Y)[0])
