"""Training loops for the single-image FER model and the windowed sequence model.

Both loops minimise the batch ``1 - CCC`` loss with Adam, validate once per
epoch with a global CCC over the validation set, keep the parameters of the
best epoch, and stop after ``patience`` epochs without strict improvement.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import nn
from .dataset import load_image
from .metrics import CCCReport, ccc_loss_and_grad, report_from_arrays
from .models import (CapNet, CausalityExtractor, FeatureExtractor, FerHead, FerModel,
                     ModelConfig, PrecomputedExtractor, TinyCnn)
from .records import FrameRef
from .sampler import SampleWindow, SamplerConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-5
    patience: int = 4
    max_epochs: int = 200
    seed: int = 0
    # None: frozen for the sequence model, trainable for the FER model
    freeze_extractor: Optional[bool] = None

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for a CCC loss, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val: CCCReport
    seconds: float


@dataclass
class TrainResult:
    best_epoch: int
    best_params: dict[str, np.ndarray]
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def best_report(self) -> CCCReport:
        return self.history[self.best_epoch - 1].val


class EarlyStopping:
    """Counts epochs since the last strict improvement of the validation metric."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, metric: float) -> bool:
        if metric > self.best:
            self.best, self.best_epoch, self.bad_epochs = metric, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def fit(train_epoch: Callable[[int], float], validate: Callable[[], CCCReport],
        params: Callable[[], Mapping[str, np.ndarray]], config: TrainConfig) -> TrainResult:
    """Generic epoch loop with early stopping on ``validate().mean_ccc``."""
    stopper = EarlyStopping(config.patience)
    history: list[EpochRecord] = []
    best: dict[str, np.ndarray] = {}
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        loss = train_epoch(epoch)
        report = validate()
        history.append(EpochRecord(epoch, loss, report, time.perf_counter() - t0))
        if stopper.update(epoch, report.mean_ccc):
            best = {k: v.copy() for k, v in params().items()}
        log.info("epoch %d loss %.5f val %s", epoch, loss, report.row())
        if stopper.should_stop:
            return TrainResult(stopper.best_epoch, best, history, stopped_early=True)
    return TrainResult(stopper.best_epoch, best, history)


def write_log(history: Sequence[EpochRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "train_loss", "val_valence", "val_arousal", "val_mean", "seconds"])
        for r in history:
            wr.writerow([r.epoch, repr(r.train_loss), repr(r.val.valence.ccc),
                         repr(r.val.arousal.ccc), repr(r.val.mean_ccc), f"{r.seconds:.3f}"])


# -- feature plumbing --------------------------------------------------------

def default_loader(extractor: FeatureExtractor) -> Callable[[FrameRef], object]:
    if isinstance(extractor, PrecomputedExtractor):
        return lambda ref: ref
    size = getattr(extractor, "image_size", 224)
    return lambda ref: load_image(ref, size)


def extract_all(extractor: FeatureExtractor, refs, loader=None) -> dict[tuple[str, int], np.ndarray]:
    """One feature vector per distinct frame, via the single-image ``extract`` path.

    Frames whose decoded input is byte-identical are extracted once.
    """
    loader = loader or default_loader(extractor)
    out: dict[tuple[str, int], np.ndarray] = {}
    memo: dict[bytes, np.ndarray] = {}
    for ref in refs:
        if ref.key in out:
            continue
        item = loader(ref)
        if isinstance(item, np.ndarray):
            digest = hashlib.sha1(item.tobytes() + str(item.shape).encode()).digest()
            if digest not in memo:
                memo[digest] = np.asarray(extractor.extract(item), dtype=np.float64)
            out[ref.key] = memo[digest]
        else:
            out[ref.key] = np.asarray(extractor.extract(item), dtype=np.float64)
    return out


def _labels(items, label_of) -> np.ndarray:
    return np.array([tuple(label_of(it)) for it in items], dtype=np.float64)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled full batches; the trailing incomplete batch is dropped."""
    bs = min(batch_size, n)
    order = rng.permutation(n)
    for k in range(n // bs):
        yield order[k * bs:(k + 1) * bs]


def _effective_batch(config: TrainConfig, n: int) -> None:
    if n < 2:
        raise ValueError(f"need at least 2 training items, got {n}")
    if n < config.batch_size:
        log.warning("training set (%d) smaller than batch_size %d; using one batch of %d",
                    n, config.batch_size, n)


# -- FER training ------------------------------------------------------------

def train_fer(train_pairs: Sequence[tuple[FrameRef, object]], val_pairs: Sequence[tuple[FrameRef, object]],
              model: FerModel, config: TrainConfig, loader=None) -> TrainResult:
    """Fit the single-image model on (frame, label) pairs.

    With ``freeze_extractor`` (default False here) only the head is trained,
    on features extracted once up front.
    """
    config.validate()
    train_pairs, val_pairs = list(train_pairs), list(val_pairs)
    if not train_pairs or not val_pairs:
        raise ValueError("train_fer needs non-empty training and validation pairs")
    _effective_batch(config, len(train_pairs))
    freeze = bool(config.freeze_extractor) or not model.extractor.trainable
    loader = loader or default_loader(model.extractor)
    Y = _labels(train_pairs, lambda p: p[1])
    Yv = _labels(val_pairs, lambda p: p[1])
    params = _fer_params(model, freeze)
    opt = nn.Adam(lr=config.lr)

    def feats_of(pairs):
        table = extract_all(model.extractor, [p[0] for p in pairs], loader)
        return np.stack([table[p[0].key] for p in pairs])

    X = feats_of(train_pairs) if freeze else None
    Xv = feats_of(val_pairs) if freeze else None

    def train_epoch(epoch: int) -> float:
        rng = np.random.default_rng([config.seed, epoch])
        losses = []
        for idx in _batches(len(train_pairs), config.batch_size, rng):
            if freeze:
                out, cache = model.head.forward(X[idx])
                loss, g = ccc_loss_and_grad(out, Y[idx])
                _, grads = model.head.backward(g, cache)
                grads = {f"head.{k}": v for k, v in grads.items()}
            else:
                imgs = np.stack([loader(train_pairs[i][0]) for i in idx])
                f, fcache = model.extractor.forward(imgs)
                out, hcache = model.head.forward(f)
                loss, g = ccc_loss_and_grad(out, Y[idx])
                df, hg = model.head.backward(g, hcache)
                eg = model.extractor.backward(df, fcache)
                grads = {f"head.{k}": v for k, v in hg.items()}
                grads.update({f"extractor.{k}": v for k, v in eg.items()})
            opt.step(params, grads)
            losses.append(loss)
        return float(np.mean(losses))

    def validate() -> CCCReport:
        xv = Xv if freeze else feats_of(val_pairs)
        return report_from_arrays(model.predict_features(xv), Yv)

    result = fit(train_epoch, validate, lambda: params, config)
    _restore(params, result.best_params)
    return result


def _fer_params(model: FerModel, freeze: bool) -> dict[str, np.ndarray]:
    params = {f"head.{k}": v for k, v in model.head.params().items()}
    if not freeze:
        params.update({f"extractor.{k}": v for k, v in model.extractor.params().items()})
    return params


def _restore(params: dict[str, np.ndarray], best: Mapping[str, np.ndarray]) -> None:
    for k, v in best.items():
        params[k][...] = v


# -- sequence-model training -------------------------------------------------

def train_capnet(train_windows: Sequence[SampleWindow], val_windows: Sequence[SampleWindow],
                 model: CapNet, config: TrainConfig, sampler: Optional[SamplerConfig] = None,
                 loader=None) -> TrainResult:
    """Fit the causality extractor (and optionally the extractor) on past-frame windows.

    Dropout is active during training; the extractor stays frozen unless
    ``freeze_extractor`` is explicitly False.
    """
    config.validate()
    train_windows, val_windows = list(train_windows), list(val_windows)
    if not train_windows or not val_windows:
        raise ValueError("train_capnet needs non-empty training and validation windows")
    L = model.window_length
    if sampler is not None and sampler.length != L:
        raise ValueError(f"sampler windows have {sampler.length} frames, model expects {L}")
    for w in (train_windows[0], val_windows[0]):
        if len(w.slots) != L:
            raise ValueError(f"window has {len(w.slots)} frames, model expects {L}")
    _effective_batch(config, len(train_windows))
    freeze = config.freeze_extractor is not False or not model.extractor.trainable
    loader = loader or default_loader(model.extractor)
    D = model.extractor.output_dim
    Y = _labels(train_windows, lambda w: w.label)
    Yv = _labels(val_windows, lambda w: w.label)
    params = {f"capnet.{k}": v for k, v in model.causality.params().items()}
    if not freeze:
        params.update({f"extractor.{k}": v for k, v in model.extractor.params().items()})
    opt = nn.Adam(lr=config.lr)

    def feats_of(windows):
        table = extract_all(model.extractor, [r for w in windows for r in w.slots], loader)
        return np.stack([[table[r.key] for r in w.slots] for w in windows])

    X = feats_of(train_windows) if freeze else None

    def train_epoch(epoch: int) -> float:
        rng = np.random.default_rng([config.seed, epoch])
        drop_rng = np.random.default_rng([config.seed, epoch, 1])
        losses = []
        for idx in _batches(len(train_windows), config.batch_size, rng):
            if freeze:
                out, cache = model.causality.forward(X[idx], True, drop_rng)
                loss, g = ccc_loss_and_grad(out, Y[idx])
                _, cg = model.causality.backward(g, cache)
                grads = {f"capnet.{k}": v for k, v in cg.items()}
            else:
                imgs = np.stack([loader(r) for i in idx for r in train_windows[i].slots])
                f, fcache = model.extractor.forward(imgs)
                out, cache = model.causality.forward(f.reshape(len(idx), L, D), True, drop_rng)
                loss, g = ccc_loss_and_grad(out, Y[idx])
                df, cg = model.causality.backward(g, cache)
                eg = model.extractor.backward(df.reshape(-1, D), fcache)
                grads = {f"capnet.{k}": v for k, v in cg.items()}
                grads.update({f"extractor.{k}": v for k, v in eg.items()})
            opt.step(params, grads)
            losses.append(loss)
        return float(np.mean(losses))

    Xv = feats_of(val_windows) if freeze else None

    def validate() -> CCCReport:
        xv = Xv if freeze else feats_of(val_windows)
        return report_from_arrays(model.predict_features(xv), Yv)

    result = fit(train_epoch, validate, lambda: params, config)
    _restore(params, result.best_params)
    return result


# -- checkpoints -------------------------------------------------------------

def _config_header(D, H, M, sampler: Optional[SamplerConfig]):
    if sampler is None:
        return np.array([D, H, M, 0, 0, 0, 0], dtype=np.float64)
    return np.array([D, H, M, float(sampler.w), sampler.s, float(sampler.d), sampler.f], dtype=np.float64)


def checkpoint_tensors(model: Union[FerModel, CapNet], sampler: Optional[SamplerConfig] = None,
                       model_config: Optional[ModelConfig] = None) -> dict[str, np.ndarray]:
    """Flatten a model into named tensors with a ``config`` header (D, H, M, w, s, d, f)."""
    ext = model.extractor
    D = ext.output_dim
    tensors: dict[str, np.ndarray] = {}
    if isinstance(model, CapNet):
        c = model.causality
        tensors["config"] = _config_header(D, c.lstm_hidden, c.fc_hidden, sampler)
        tensors["capnet.dropout"] = np.array(c.dropout_rate)
        tensors.update({f"capnet.{k}": v for k, v in c.params().items()})
    else:
        tensors["config"] = _config_header(D, 0, 0, None)
        tensors.update({f"fer.{k}": v for k, v in model.head.params().items()})
    if isinstance(ext, TinyCnn):
        tensors["extractor.image_size"] = np.array(float(ext.image_size))
        tensors.update({f"extractor.{k}": v for k, v in ext.params().items()})
    if model_config is not None:
        tensors["model.seed"] = np.array(float(model_config.seed))
    return tensors


def save_model(path, model, sampler=None, model_config=None) -> None:
    nn.save_checkpoint(path, checkpoint_tensors(model, sampler, model_config))


def _sub(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def header_sampler(tensors: Mapping[str, np.ndarray]) -> Optional[SamplerConfig]:
    D, H, M, w, s, d, f = tensors["config"]
    if f == 0:
        return None
    f = int(f)
    return SamplerConfig(d=_snap(d, f), f=f, w=_snap(w, f), s=int(s))


def _snap(x: float, f: int):
    from fractions import Fraction
    return Fraction(int(round(x * f)), f)


def extractor_from_tensors(tensors: Mapping[str, np.ndarray],
                           fallback: Optional[FeatureExtractor] = None) -> FeatureExtractor:
    ext = _sub(tensors, "extractor.")
    if ext:
        size = int(ext.pop("image_size"))
        D = ext["fc.W"].shape[1]
        return TinyCnn(D, size, weights=ext)
    if fallback is None:
        raise ValueError("checkpoint carries no extractor weights; pass a feature cache")
    return fallback


def causality_from_tensors(tensors: Mapping[str, np.ndarray]) -> CausalityExtractor:
    sub = _sub(tensors, "capnet.")
    if not sub:
        raise ValueError("checkpoint has no causality-extractor tensors")
    rate = float(sub.pop("dropout", 0.2))
    D = sub["lstm.W_i"].shape[1]
    return CausalityExtractor(D, dropout_rate=rate, weights=sub)


def load_fer(path, extractor: Optional[FeatureExtractor] = None) -> FerModel:
    t = nn.load_checkpoint(path)
    ext = extractor or extractor_from_tensors(t)
    return FerModel(ext, FerHead(ext.output_dim, weights=_sub(t, "fer.")))


def load_capnet(path, extractor: Optional[FeatureExtractor] = None) -> tuple[CapNet, SamplerConfig]:
    t = nn.load_checkpoint(path)
    sampler = header_sampler(t)
    if sampler is None:
        raise ValueError(f"{path} is not a sequence-model checkpoint")
    ext = extractor or extractor_from_tensors(t)
    return CapNet(ext, causality_from_tensors(t), sampler.length), sampler
