# coding: utf-8

# # Checking hand-written gradients
#
# Every backward pass in the library is compared against central finite
# differences. A relative error below 1e-4 in float64 counts as a match.

import numpy as np

from capnet import gradcheck, nn

# A sum of squares is exact up to roundoff.

x = np.random.default_rng(0).normal(size=(3, 4))
print(nn.grad_check(lambda: float((x ** 2).sum()), {"x": x}, {"x": 2 * x}))

# The LSTM over a 9-step sequence, for one random configuration.

print("lstm:", gradcheck.check_lstm(seed=0, D=3, H=8, L=9))

# The sequence head: LSTM, FC+ReLU, FC+tanh, then 1 - CCC.

print("capnet head:", gradcheck.check_capnet(seed=0))

# And the whole stack, starting from pixels. ReLU kinks make a few
# coordinates non-differentiable at the probe scale; those are excluded.

skipped = []
print("cnn + head:", gradcheck.check_cnn_capnet(seed=0, skipped=skipped), "skipped", len(skipped))

# A deliberately wrong gradient must be caught.

print("injected bug:", gradcheck.check_fc(0, inject_bug=True))

# The CLI runs the same suites: `capnet gradcheck --layers lstm,ccc`.

print(gradcheck.run_suites(("fc", "ccc"), seeds=range(5)))
