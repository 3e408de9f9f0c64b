"""Single-image FER model and the sequence model built on a shared feature extractor.

The feature extractor is pluggable: ``TinyCnn`` is a small trainable CNN
standing in for a large pretrained backbone, ``PrecomputedExtractor`` serves
frozen features from a ``CAPF`` cache file. Either one feeds

* ``FerHead``: FC(D -> 2) + tanh on the current frame, and
* ``CausalityExtractor``: dropout -> LSTM -> dropout -> FC+ReLU -> FC(2)+tanh
  over a chronological window of past frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from . import nn
from .records import FrameRef

IMAGE_SIZE = 224
TINY_CNN_VERSION = 1
TINY_CNN_WIDTHS = (8, 16, 32)


@dataclass
class ModelConfig:
    image_size: int = IMAGE_SIZE
    feature_dim: int = 32
    lstm_hidden: int = 64
    fc_hidden: int = 64
    dropout: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        for name in ("image_size", "feature_dim", "lstm_hidden", "fc_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % 8:
            raise ValueError(f"image_size must be divisible by 8, got {self.image_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")


class FeatureLookupError(KeyError):
    pass


class FeatureExtractor:
    """Maps one input (image or frame reference) to a length-``output_dim`` vector."""

    kind: str = "abstract"
    output_dim: int
    trainable: bool = False

    def extract(self, item) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        return {}


# -- stand-in CNN ------------------------------------------------------------

class TinyCnn(FeatureExtractor):
    """Three (3x3 conv, ReLU, 2x2 avg pool) blocks of width 8/16/32, global pooling, FC to D.

    Inputs are (S, S, 3) images with pixels in [0, 1]; S defaults to 224.
    """

    kind = "TinyCnn"
    trainable = True

    def __init__(self, feature_dim: int = 32, image_size: int = IMAGE_SIZE,
                 rng: Optional[np.random.Generator] = None, weights: Optional[Mapping[str, np.ndarray]] = None):
        if image_size % 8:
            raise ValueError(f"image_size must be divisible by 8, got {image_size}")
        self.output_dim = feature_dim
        self.image_size = image_size
        if weights is not None:
            self.weights = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
            if self.weights["fc.W"].shape[1] != feature_dim:
                raise ValueError("TinyCnn weights do not match feature_dim")
            return
        rng = rng or np.random.default_rng(0)
        self.weights = {}
        cin = 3
        for k, cout in enumerate(TINY_CNN_WIDTHS, start=1):
            self.weights[f"conv{k}.W"] = nn.uniform_init(rng, (3, 3, cin, cout), 9 * cin)
            self.weights[f"conv{k}.b"] = np.zeros(cout)
            cin = cout
        self.weights["fc.W"] = nn.uniform_init(rng, (cin, feature_dim), cin)
        self.weights["fc.b"] = np.zeros(feature_dim)

    def params(self) -> dict[str, np.ndarray]:
        return self.weights

    def forward(self, images: np.ndarray):
        """Batch forward on (N, S, S, 3); returns ``(features (N, D), cache)``."""
        S = self.image_size
        if images.ndim != 4 or images.shape[1:] != (S, S, 3):
            raise ValueError(f"expected images of shape (N, {S}, {S}, 3), got {images.shape}")
        x = images
        caches = []
        for k in range(1, len(TINY_CNN_WIDTHS) + 1):
            z, cc = nn.conv3x3_forward(x, self.weights[f"conv{k}.W"], self.weights[f"conv{k}.b"])
            a = np.maximum(z, 0.0)
            x, pshape = nn.avgpool2_forward(a)
            caches.append((cc, z, pshape))
        gshape = x.shape
        pooled = x.mean(axis=(1, 2))
        feats, fcc = nn.fc_forward(pooled, self.weights["fc.W"], self.weights["fc.b"])
        return feats, (caches, gshape, fcc)

    def backward(self, dfeats: np.ndarray, cache) -> dict[str, np.ndarray]:
        caches, gshape, fcc = cache
        grads = {}
        dpooled, grads["fc.W"], grads["fc.b"] = nn.fc_backward(dfeats, fcc)
        N, h, w, C = gshape
        dx = np.broadcast_to(dpooled[:, None, None, :] / (h * w), gshape)
        for k in range(len(TINY_CNN_WIDTHS), 0, -1):
            cc, z, pshape = caches[k - 1]
            da = nn.avgpool2_backward(dx, pshape)
            dz = da * (z > 0)
            dx, grads[f"conv{k}.W"], grads[f"conv{k}.b"] = nn.conv3x3_backward(dz, cc)
        return grads

    def extract(self, image: np.ndarray) -> np.ndarray:
        S = self.image_size
        if image.shape != (S, S, 3):
            raise ValueError(f"expected image of shape ({S}, {S}, 3), got {image.shape}")
        return self.forward(image[None])[0][0]


# -- precomputed features ----------------------------------------------------

CACHE_MAGIC = b"CAPF"
CACHE_VERSION = 1


class FeatureCache:
    """Frozen per-frame feature vectors stored as little-endian float32.

    Binary layout: magic ``CAPF``, then u32 version, dim, count, then ``count``
    records of (u32 frame_key, ``dim`` float32). ``frame_key`` indexes the
    sidecar manifest (``<path>.manifest``) whose line ``k`` is ``video_id,frame_index``.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self._vecs: dict[tuple[str, int], np.ndarray] = {}

    def __len__(self):
        return len(self._vecs)

    def __contains__(self, key):
        return key in self._vecs

    def put(self, video_id: str, frame_index: int, vec) -> None:
        v = np.asarray(vec, dtype="<f4")
        if v.shape != (self.dim,):
            raise ValueError(f"feature of shape {v.shape} does not match cache dim {self.dim}")
        self._vecs[(video_id, int(frame_index))] = v.copy()

    def get(self, video_id: str, frame_index: int) -> np.ndarray:
        try:
            return self._vecs[(video_id, frame_index)]
        except KeyError:
            raise FeatureLookupError(f"no cached feature for video {video_id!r} frame {frame_index}") from None

    def keys(self):
        return self._vecs.keys()

    @staticmethod
    def manifest_path(path: Union[str, Path]) -> Path:
        return Path(str(path) + ".manifest")

    @staticmethod
    def expected_size(count: int, dim: int) -> int:
        return 16 + count * (4 + 4 * dim)

    def save(self, path: Union[str, Path]) -> None:
        keys = list(self._vecs)
        parts = [CACHE_MAGIC, struct.pack("<III", CACHE_VERSION, self.dim, len(keys))]
        for k, key in enumerate(keys):
            parts.append(struct.pack("<I", k))
            parts.append(self._vecs[key].astype("<f4").tobytes())
        Path(path).write_bytes(b"".join(parts))
        with open(self.manifest_path(path), "w", encoding="utf-8") as fh:
            for vid, idx in keys:
                fh.write(f"{vid},{idx}\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FeatureCache":
        data = Path(path).read_bytes()
        if data[:4] != CACHE_MAGIC:
            raise ValueError(f"{path}: bad magic {data[:4]!r}")
        version, dim, count = struct.unpack_from("<III", data, 4)
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported feature cache version {version}")
        if len(data) != cls.expected_size(count, dim):
            raise ValueError(f"{path}: size {len(data)} does not match header (count={count}, dim={dim})")
        with open(cls.manifest_path(path), encoding="utf-8") as fh:
            manifest = [line.rstrip("\n").rsplit(",", 1) for line in fh if line.strip()]
        cache = cls(dim)
        rec = 4 + 4 * dim
        for k in range(count):
            off = 16 + k * rec
            (key,) = struct.unpack_from("<I", data, off)
            vid, idx = manifest[key]
            cache._vecs[(vid, int(idx))] = np.frombuffer(data, dtype="<f4", count=dim, offset=off + 4).copy()
        return cache


class PrecomputedExtractor(FeatureExtractor):
    kind = "Precomputed"

    def __init__(self, cache: FeatureCache):
        self.cache = cache
        self.output_dim = cache.dim

    def extract(self, ref: FrameRef) -> np.ndarray:
        return self.cache.get(ref.video_id, ref.frame_index)


def build_feature_cache(extractor: FeatureExtractor, refs: Iterable[FrameRef], loader) -> FeatureCache:
    """Run ``extractor`` once per frame; ``loader`` turns a FrameRef into the extractor's input."""
    cache = FeatureCache(extractor.output_dim)
    for ref in refs:
        if ref.key not in cache:
            cache.put(ref.video_id, ref.frame_index, extractor.extract(loader(ref)))
    return cache


# -- heads -------------------------------------------------------------------

class FerHead:
    """FC(D -> 2) with tanh: the top layer of the single-image model."""

    def __init__(self, feature_dim: int, rng: Optional[np.random.Generator] = None,
                 weights: Optional[Mapping[str, np.ndarray]] = None, zero: bool = False):
        self.feature_dim = feature_dim
        if weights is not None:
            self.weights = {k: np.array(weights[k], dtype=np.float64) for k in ("fc.W", "fc.b")}
        elif zero:
            self.weights = {"fc.W": np.zeros((feature_dim, 2)), "fc.b": np.zeros(2)}
        else:
            rng = rng or np.random.default_rng(0)
            self.weights = {"fc.W": nn.uniform_init(rng, (feature_dim, 2), feature_dim), "fc.b": np.zeros(2)}

    def params(self) -> dict[str, np.ndarray]:
        return self.weights

    def forward(self, feats: np.ndarray):
        return nn.fc_forward(np.atleast_2d(feats), self.weights["fc.W"], self.weights["fc.b"], "tanh")

    def backward(self, dout, cache):
        dx, dW, db = nn.fc_backward(dout, cache)
        return dx, {"fc.W": dW, "fc.b": db}


class CausalityExtractor:
    """LSTM over the feature sequence, then FC+ReLU and FC(2)+tanh on the last hidden state."""

    def __init__(self, feature_dim: int, lstm_hidden: int = 64, fc_hidden: int = 64,
                 dropout_rate: float = 0.2, rng: Optional[np.random.Generator] = None,
                 weights: Optional[Mapping[str, np.ndarray]] = None, zero: bool = False):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        self.dropout_rate = dropout_rate
        D, H, M = feature_dim, lstm_hidden, fc_hidden
        if weights is not None:
            self.weights = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
            if self.weights["fc2.W"].shape[1] != 2:
                raise ValueError("second FC layer must have exactly 2 outputs")
            nn.LstmParams.from_dict(self._lstm_view())  # shape validation
            return
        if zero:
            lstm = nn.LstmParams.zeros(D, H)
            self.weights = {f"lstm.{k}": v for k, v in lstm.as_dict().items()}
            self.weights.update({"fc1.W": np.zeros((H, M)), "fc1.b": np.zeros(M),
                                 "fc2.W": np.zeros((M, 2)), "fc2.b": np.zeros(2)})
            return
        rng = rng or np.random.default_rng(0)
        lstm = nn.LstmParams.init(D, H, rng)
        self.weights = {f"lstm.{k}": v for k, v in lstm.as_dict().items()}
        self.weights["fc1.W"] = nn.uniform_init(rng, (H, M), H)
        self.weights["fc1.b"] = np.zeros(M)
        self.weights["fc2.W"] = nn.uniform_init(rng, (M, 2), M)
        self.weights["fc2.b"] = np.zeros(2)

    @property
    def feature_dim(self) -> int:
        return self.weights["lstm.W_i"].shape[1]

    @property
    def lstm_hidden(self) -> int:
        return self.weights["lstm.W_i"].shape[0]

    @property
    def fc_hidden(self) -> int:
        return self.weights["fc1.W"].shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return self.weights

    def _lstm_view(self) -> dict[str, np.ndarray]:
        return {k[5:]: v for k, v in self.weights.items() if k.startswith("lstm.")}

    def forward(self, feats: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None):
        """``feats`` is (N, L, D), oldest frame first. Returns ``((N, 2) output, cache)``."""
        if feats.ndim != 3 or feats.shape[2] != self.feature_dim:
            raise ValueError(f"expected (N, L, {self.feature_dim}) features, got {feats.shape}")
        rate = self.dropout_rate
        x, m1 = nn.dropout(feats, rate, train, rng)
        lstm = nn.LstmParams.from_dict(self._lstm_view())
        h, lc = nn.lstm_forward(x, lstm)
        h, m2 = nn.dropout(h, rate, train, rng)
        a, c1 = nn.fc_forward(h, self.weights["fc1.W"], self.weights["fc1.b"], "relu")
        out, c2 = nn.fc_forward(a, self.weights["fc2.W"], self.weights["fc2.b"], "tanh")
        return out, (m1, lc, m2, c1, c2)

    def backward(self, dout, cache):
        m1, lc, m2, c1, c2 = cache
        grads = {}
        da, grads["fc2.W"], grads["fc2.b"] = nn.fc_backward(dout, c2)
        dh, grads["fc1.W"], grads["fc1.b"] = nn.fc_backward(da, c1)
        dh = nn.dropout_backward(dh, m2)
        dx, lg = nn.lstm_backward(dh, lc)
        grads.update({f"lstm.{k}": v for k, v in lg.items()})
        return nn.dropout_backward(dx, m1), grads


# -- assembled models --------------------------------------------------------

class FerModel:
    """Feature extractor + FerHead predicting the affect of the current frame."""

    def __init__(self, extractor: FeatureExtractor, head: FerHead):
        if head.feature_dim != extractor.output_dim:
            raise ValueError(f"head expects D={head.feature_dim}, extractor gives D={extractor.output_dim}")
        self.extractor = extractor
        self.head = head

    def predict_features(self, feats: np.ndarray) -> np.ndarray:
        return self.head.forward(np.atleast_2d(feats))[0]

    def forward(self, item):
        """Predict the AffectState components for one image (or frame ref) as a length-2 array."""
        return self.predict_features(self.extractor.extract(item)[None])[0]


class CapNet:
    """Feature extractor feeding a CausalityExtractor over ``window_length`` past frames."""

    def __init__(self, extractor: FeatureExtractor, causality: CausalityExtractor, window_length: int):
        if causality.feature_dim != extractor.output_dim:
            raise ValueError(
                f"causality extractor expects D={causality.feature_dim}, extractor gives D={extractor.output_dim}")
        self.extractor = extractor
        self.causality = causality
        self.window_length = window_length

    def predict_features(self, feats: np.ndarray, train: bool = False,
                         rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """(N, L, D) or (L, D) features -> (N, 2) or (2,) predictions."""
        single = feats.ndim == 2
        x = feats[None] if single else feats
        if x.shape[1] != self.window_length:
            raise ValueError(f"window has {x.shape[1]} frames, model expects {self.window_length}")
        out = self.causality.forward(np.asarray(x, dtype=np.float64), train, rng)[0]
        return out[0] if single else out

    def forward(self, items: list, train: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Predict from the window's L images (or frame refs), oldest first."""
        feats = np.stack([self.extractor.extract(it) for it in items])
        return self.predict_features(feats, train, rng)
