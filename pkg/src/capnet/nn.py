"""Dense layers with hand-written reverse-mode gradients.

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes the upstream gradient plus that cache. Tensors are plain numpy
arrays; parameters are kept in flat ``{name: array}`` dicts so the optimizer,
the gradient checker and checkpoint files all share one representation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("none", "tanh", "relu")


def sigmoid(z):
    # tanh form is overflow-free for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- fully connected ---------------------------------------------------------

def fc_forward(x, W, b, activation="none"):
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    z = x @ W + b
    if activation == "tanh":
        out = np.tanh(z)
    elif activation == "relu":
        out = np.maximum(z, 0.0)
    else:
        out = z
    return out, (x, W, z, out, activation)


def fc_backward(dout, cache):
    x, W, z, out, activation = cache
    if activation == "tanh":
        dz = dout * (1.0 - out * out)
    elif activation == "relu":
        dz = dout * (z > 0)
    else:
        dz = dout
    return dz @ W.T, x.T @ dz, dz.sum(axis=0)


# -- LSTM --------------------------------------------------------------------

GATES = ("i", "f", "o", "g")


@dataclass
class LstmParams:
    """Per-gate weights: ``W_*`` (H x D) on the input, ``U_*`` (H x H) on the hidden state."""

    W_i: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    W_g: np.ndarray
    U_i: np.ndarray
    U_f: np.ndarray
    U_o: np.ndarray
    U_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.W_i.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_i.shape[0]

    def __post_init__(self):
        H, D = self.W_i.shape
        for name, arr in self.as_dict().items():
            want = {"W": (H, D), "U": (H, H), "b": (H,)}[name[0]]
            if arr.shape != want:
                raise ValueError(f"LSTM param {name} has shape {arr.shape}, expected {want}")

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator,
             forget_bias: float = 1.0) -> "LstmParams":
        D, H = input_dim, hidden_dim
        kw = {}
        for g in GATES:
            kw[f"W_{g}"] = uniform_init(rng, (H, D), D)
        for g in GATES:
            kw[f"U_{g}"] = uniform_init(rng, (H, H), H)
        for g in GATES:
            kw[f"b_{g}"] = np.full(H, forget_bias if g == "f" else 0.0)
        return cls(**kw)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmParams":
        D, H = input_dim, hidden_dim
        kw = {f"W_{g}": np.zeros((H, D)) for g in GATES}
        kw.update({f"U_{g}": np.zeros((H, H)) for g in GATES})
        kw.update({f"b_{g}": np.zeros(H) for g in GATES})
        return cls(**kw)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: Mapping[str, np.ndarray]) -> "LstmParams":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def lstm_forward(seq, params: LstmParams, h0=None, c0=None):
    """Run the LSTM over ``seq`` and return only the final hidden state.

    ``seq`` is (L, D) for one sequence or (N, L, D) for a batch; the output is
    (H,) or (N, H) accordingly.
    """
    single = seq.ndim == 2
    x = seq[None] if single else seq
    if x.ndim != 3:
        raise ValueError(f"expected (L, D) or (N, L, D) input, got shape {seq.shape}")
    N, L, D = x.shape
    H = params.hidden_dim
    if L == 0:
        raise ValueError("LSTM needs a sequence of length >= 1")
    if D != params.input_dim:
        raise ValueError(f"input dim {D} does not match LSTM input dim {params.input_dim}")
    W = np.concatenate([params.W_i, params.W_f, params.W_o, params.W_g], axis=0)  # 4H x D
    U = np.concatenate([params.U_i, params.U_f, params.U_o, params.U_g], axis=0)  # 4H x H
    b = np.concatenate([params.b_i, params.b_f, params.b_o, params.b_g])
    h = np.zeros((N, H)) if h0 is None else np.broadcast_to(h0, (N, H)).astype(np.float64)
    c = np.zeros((N, H)) if c0 is None else np.broadcast_to(c0, (N, H)).astype(np.float64)
    hs, cs, acts, tcs = [h], [c], [], []
    for t in range(L):
        z = x[:, t] @ W.T + h @ U.T + b
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        o = sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        acts.append((i, f, o, g))
        hs.append(h)
        cs.append(c)
        tcs.append(tc)
    cache = (x, W, U, hs, cs, acts, tcs, single)
    return (h[0] if single else h), cache


def lstm_backward(dh, cache):
    """Backpropagation through time from the gradient of the final hidden state.

    Returns ``(dseq, grads)`` with ``grads`` keyed like ``LstmParams.as_dict``.
    """
    x, W, U, hs, cs, acts, tcs, single = cache
    N, L, D = x.shape
    H = U.shape[1]
    dh = np.atleast_2d(dh).astype(np.float64)
    dc = np.zeros((N, H))
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(4 * H)
    dx = np.zeros_like(x)
    for t in range(L - 1, -1, -1):
        i, f, o, g = acts[t]
        tc = tcs[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * cs[t]
        dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                             do * o * (1.0 - o), dg * (1.0 - g * g)], axis=1)
        dW += dz.T @ x[:, t]
        dU += dz.T @ hs[t]
        db += dz.sum(axis=0)
        dx[:, t] = dz @ W
        dh = dz @ U
        dc = dc * f
    grads = {}
    for k, gate in enumerate(GATES):
        sl = slice(k * H, (k + 1) * H)
        grads[f"W_{gate}"] = dW[sl]
        grads[f"U_{gate}"] = dU[sl]
        grads[f"b_{gate}"] = db[sl]
    return (dx[0] if single else dx), grads


# -- dropout -----------------------------------------------------------------

def dropout(x, rate: float, train: bool, rng: Optional[np.random.Generator] = None):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when nothing is dropped."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# -- convolution / pooling (for the stand-in CNN) ----------------------------

def conv3x3_forward(x, W, b):
    """Same-padded 3x3 convolution. ``x`` is (N, H, W, C), ``W`` is (3, 3, C, K)."""
    if x.ndim != 4 or W.shape[:2] != (3, 3) or x.shape[3] != W.shape[2]:
        raise ValueError(f"shape mismatch: x {x.shape}, W {W.shape}")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # N,H,W,C,3,3
    out = np.tensordot(win, W.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2])) + b
    return out, (win, W)


def conv3x3_backward(dout, cache):
    win, W = cache
    dW = np.tensordot(win, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2))
    dp = np.pad(dout, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dwin = sliding_window_view(dp, (3, 3), axis=(1, 2))  # N,H,W,K,3,3
    Wflip = W[::-1, ::-1].transpose(3, 0, 1, 2)  # K,3,3,C
    dx = np.tensordot(dwin, Wflip, axes=([3, 4, 5], [0, 1, 2]))
    return dx, dW, db


def avgpool2_forward(x):
    N, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"2x2 pooling needs even spatial dims, got {H}x{W}")
    return x.reshape(N, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4)), x.shape


def avgpool2_backward(dout, shape):
    return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25


# -- Adam --------------------------------------------------------------------

class NonFiniteGradientError(FloatingPointError):
    pass


class Adam:
    """Adam with bias-corrected moments, updating a parameter dict in place."""

    def __init__(self, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# -- gradient checking -------------------------------------------------------

def grad_check(fn: Callable[[], float], params: Mapping[str, np.ndarray],
               analytic: Mapping[str, np.ndarray], h: float = 1e-5,
               max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None,
               kink_signature: Optional[Callable[[], bytes]] = None,
               skipped: Optional[list] = None) -> float:
    """Max relative error between ``analytic`` gradients and central differences.

    ``fn`` re-evaluates the scalar objective reading ``params`` as they stand;
    each coordinate is perturbed in place and restored. ``max_coords`` samples
    that many coordinates per tensor instead of all of them.

    For piecewise-linear models pass ``kink_signature`` (e.g. the packed ReLU
    activation pattern): coordinates whose +h / -h evaluations see a different
    pattern than the unperturbed point straddle a kink, are excluded, and are
    appended to ``skipped`` as ``(name, index)``.
    """
    base_sig = kink_signature() if kink_signature is not None else None
    worst = 0.0
    for name, p in params.items():
        a = analytic[name]
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError(f"parameter {name} must be contiguous for in-place perturbation")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        af = a.reshape(-1)
        for j in coords:
            old = flat[j]
            flat[j] = old + h
            fp = fn()
            crossed = base_sig is not None and kink_signature() != base_sig
            flat[j] = old - h
            fm = fn()
            crossed = crossed or (base_sig is not None and kink_signature() != base_sig)
            flat[j] = old
            if crossed:
                if skipped is not None:
                    skipped.append((name, int(j)))
                continue
            num = (fp - fm) / (2.0 * h)
            err = abs(af[j] - num) / max(1e-8, abs(af[j]) + abs(num))
            worst = max(worst, err)
    return worst


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"CAPC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float64 tensors in the CAPC little-endian layout."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    try:
        return _parse_checkpoint(data, path)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from None


def _parse_checkpoint(data: bytes, path) -> dict[str, np.ndarray]:
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return out
