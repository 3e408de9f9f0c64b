"""Finite-difference checks of every hand-written backward pass.

Each ``check_*`` builds a random, well-conditioned problem from a seed and
returns the max relative error of ``nn.grad_check``. Biases are drawn
nonzero so ReLU pre-activations never sit exactly on the kink.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional

import numpy as np

from . import nn
from .metrics import ccc_loss_and_grad
from .models import CausalityExtractor, FerHead, TinyCnn

STEP = 1e-4
# conv gradients are smaller; kink crossings are detected rather than avoided
CNN_STEP = 1e-5
TOLERANCE = 1e-4
SUITES = ("fc", "lstm", "ccc", "fer", "capnet", "cnn")
LSTM_DIMS = (1, 3, 8)
LSTM_LENGTHS = (1, 2, 9)


def _corrupt(grads: dict, enabled: bool) -> dict:
    # negative control: scale one gradient tensor so the checker must fail
    if enabled:
        k = next(iter(grads))
        grads = dict(grads)
        grads[k] = grads[k] * 1.05 + 1e-3
    return grads


def check_fc(seed: int, inject_bug: bool = False) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for act in nn.ACTIVATIONS:
        N, D, K = rng.integers(1, 6, size=3)
        x = rng.normal(size=(N, D))
        W = rng.normal(size=(D, K))
        b = rng.normal(size=K)
        R = rng.normal(size=(N, K))
        out, cache = nn.fc_forward(x, W, b, act)
        dx, dW, db = nn.fc_backward(R, cache)
        grads = _corrupt({"x": dx, "W": dW, "b": db}, inject_bug)
        f = lambda: float((nn.fc_forward(x, W, b, act)[0] * R).sum())
        worst = max(worst, nn.grad_check(f, {"x": x, "W": W, "b": b}, grads, STEP))
    return worst


def check_lstm(seed: int, D: int, H: int, L: int, inject_bug: bool = False) -> float:
    rng = np.random.default_rng(seed)
    p = nn.LstmParams(**{k: rng.normal(0.0, 0.5, size=v.shape)
                         for k, v in nn.LstmParams.zeros(D, H).as_dict().items()})
    x = rng.normal(size=(2, L, D))
    R = rng.normal(size=(2, H))
    _, cache = nn.lstm_forward(x, p)
    dx, grads = nn.lstm_backward(R, cache)
    grads["x"] = dx
    params = p.as_dict()
    params["x"] = x
    f = lambda: float((nn.lstm_forward(x, p)[0] * R).sum())
    return nn.grad_check(f, params, _corrupt(grads, inject_bug), STEP)


def check_ccc(seed: int, N: int = 8, inject_bug: bool = False) -> float:
    rng = np.random.default_rng(seed)
    preds = rng.uniform(-1, 1, size=(N, 2))
    labels = rng.uniform(-1, 1, size=(N, 2))
    _, g = ccc_loss_and_grad(preds, labels)
    f = lambda: ccc_loss_and_grad(preds, labels)[0]
    return nn.grad_check(f, {"preds": preds}, _corrupt({"preds": g}, inject_bug), STEP)


def _randomize(weights: dict, rng: np.random.Generator, scale: float = 0.5) -> None:
    for v in weights.values():
        v[...] = rng.normal(0.0, scale, size=v.shape)


def check_fer(seed: int, N: int = 8, D: int = 5, inject_bug: bool = False) -> float:
    """1 - CCC through the FC+tanh head."""
    rng = np.random.default_rng(seed)
    head = FerHead(D, rng=rng)
    _randomize(head.weights, rng)
    feats = rng.normal(size=(N, D))
    labels = rng.uniform(-1, 1, size=(N, 2))

    def loss():
        return ccc_loss_and_grad(head.forward(feats)[0], labels)[0]

    out, cache = head.forward(feats)
    _, g = ccc_loss_and_grad(out, labels)
    dx, grads = head.backward(g, cache)
    grads["feats"] = dx
    params = dict(head.weights, feats=feats)
    return nn.grad_check(loss, params, _corrupt(grads, inject_bug), STEP)


def check_capnet(seed: int, N: int = 4, L: int = 3, D: int = 4, H: int = 5, M: int = 6,
                 inject_bug: bool = False) -> float:
    """1 - CCC through dropout-free LSTM -> FC+ReLU -> FC+tanh."""
    rng = np.random.default_rng(seed)
    ce = CausalityExtractor(D, H, M, dropout_rate=0.0, rng=rng)
    _randomize(ce.weights, rng)
    feats = rng.normal(size=(N, L, D))
    labels = rng.uniform(-1, 1, size=(N, 2))

    def loss():
        return ccc_loss_and_grad(ce.forward(feats)[0], labels)[0]

    out, cache = ce.forward(feats)
    _, g = ccc_loss_and_grad(out, labels)
    dx, grads = ce.backward(g, cache)
    grads["feats"] = dx
    params = dict(ce.weights, feats=feats)
    return nn.grad_check(loss, params, _corrupt(grads, inject_bug), STEP)


def check_cnn_capnet(seed: int, N: int = 4, L: int = 3, D: int = 4, image_size: int = 8,
                     max_coords: Optional[int] = 12, inject_bug: bool = False,
                     skipped: Optional[list] = None) -> float:
    """End to end: TinyCnn -> causality extractor -> 1 - CCC, on small images.

    CNN weights are drawn at He scale so features, and hence gradients, are
    O(1) rather than vanishing. ``max_coords`` samples CNN coordinates per
    tensor to bound the runtime; coordinates straddling a ReLU kink are
    excluded (see ``nn.grad_check``).
    """
    rng = np.random.default_rng(seed)
    cnn = TinyCnn(D, image_size, rng=rng)
    for k, v in cnn.weights.items():
        if k.endswith(".b"):
            v[...] = rng.normal(0.0, 0.1, size=v.shape)
        else:
            v[...] = rng.normal(0.0, np.sqrt(2.0 / np.prod(v.shape[:-1])), size=v.shape)
    ce = CausalityExtractor(D, 5, 6, dropout_rate=0.0, rng=rng)
    _randomize(ce.weights, rng)
    imgs = rng.random((N * L, image_size, image_size, 3))
    labels = rng.uniform(-1, 1, size=(N, 2))

    def forward():
        f, fc = cnn.forward(imgs)
        out, cc = ce.forward(f.reshape(N, L, D))
        return f, fc, out, cc

    def loss():
        return ccc_loss_and_grad(forward()[2], labels)[0]

    def relu_pattern() -> bytes:
        _, (caches, _, _), _, cc = forward()
        masks = [z > 0 for _, z, _ in caches] + [cc[3][2] > 0]
        return b"".join(np.packbits(m).tobytes() for m in masks)

    f, fc, out, cc = forward()
    _, g = ccc_loss_and_grad(out, labels)
    df, ce_grads = ce.backward(g, cc)
    cnn_grads = cnn.backward(df.reshape(N * L, D), fc)
    worst = nn.grad_check(loss, ce.weights, _corrupt(ce_grads, inject_bug), STEP,
                          kink_signature=relu_pattern, skipped=skipped)
    return max(worst, nn.grad_check(loss, cnn.weights, cnn_grads, CNN_STEP,
                                    max_coords=max_coords, rng=np.random.default_rng(seed),
                                    kink_signature=relu_pattern, skipped=skipped))


def suite_cases(name: str, seeds: Iterable[int]) -> list[tuple[str, Callable[..., float]]]:
    """(label, thunk) pairs for one suite; each thunk accepts ``inject_bug``."""
    cases = []
    for seed in seeds:
        if name == "fc":
            cases.append((f"fc seed={seed}", lambda b=False, s=seed: check_fc(s, b)))
        elif name == "lstm":
            # cycle the D/H grid across seeds, every length on every seed
            dims = list(itertools.product(LSTM_DIMS, LSTM_DIMS))
            D, H = dims[seed % len(dims)]
            for L in LSTM_LENGTHS:
                cases.append((f"lstm seed={seed} D={D} H={H} L={L}",
                              lambda b=False, s=seed, D=D, H=H, L=L: check_lstm(s, D, H, L, b)))
        elif name == "ccc":
            cases.append((f"ccc seed={seed}", lambda b=False, s=seed: check_ccc(s, inject_bug=b)))
        elif name == "fer":
            cases.append((f"fer seed={seed}", lambda b=False, s=seed: check_fer(s, inject_bug=b)))
        elif name == "capnet":
            cases.append((f"capnet seed={seed}", lambda b=False, s=seed: check_capnet(s, inject_bug=b)))
        elif name == "cnn":
            cases.append((f"cnn+capnet seed={seed}", lambda b=False, s=seed: check_cnn_capnet(s, inject_bug=b)))
        else:
            raise ValueError(f"unknown gradient suite {name!r}; choose from {SUITES}")
    return cases


def run_suites(names: Iterable[str] = SUITES, seeds: Iterable[int] = range(20),
               inject_bug: bool = False) -> dict[str, float]:
    """Max relative error per suite."""
    seeds = list(seeds)
    result = {}
    for name in names:
        errs = [fn(inject_bug) for _, fn in suite_cases(name, seeds)]
        result[name] = float(max(errs))
    return result
