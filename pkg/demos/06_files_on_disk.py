# coding: utf-8

# # Checkpoints and feature caches
#
# Both formats are small little-endian binaries that round-trip bit-exactly.

import tempfile
from pathlib import Path

import numpy as np

from capnet import nn, training
from capnet.models import CapNet, CausalityExtractor, FeatureCache, PrecomputedExtractor, TinyCnn
from capnet.sampler import SamplerConfig

tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)

# ## Checkpoints
#
# A model checkpoint stores named float64 tensors plus a header with the
# dimensions and window geometry.

model = CapNet(TinyCnn(8, 16, rng=rng), CausalityExtractor(8, 16, 16, rng=rng), 9)
training.save_model(tmp / "m.capc", model, SamplerConfig())
tensors = nn.load_checkpoint(tmp / "m.capc")
print(sorted(tensors)[:6], "...")
print("header (D, H, M, w, s, d, f):", tensors["config"])

# The causality extractor does not care where its features come from. Here
# the same checkpoint is loaded on top of a precomputed feature cache.

cache = FeatureCache(8)
cache.put("clip", 1, rng.normal(size=8))
swapped, sampler = training.load_capnet(tmp / "m.capc", PrecomputedExtractor(cache))
x = rng.normal(size=(9, 8))
print(np.array_equal(swapped.predict_features(x), model.predict_features(x)))

# ## Feature caches
#
# 16 header bytes, then per frame a u32 key and D float32 values. A sidecar
# manifest maps keys back to (video, frame).

cache = FeatureCache(32)
for vid in ("a", "b"):
    for i in range(1, 101):
        cache.put(vid, i, rng.normal(size=32))
cache.save(tmp / "f.capf")
print((tmp / "f.capf").stat().st_size, FeatureCache.expected_size(200, 32))
print(FeatureCache.manifest_path(tmp / "f.capf").read_text().splitlines()[:2])
