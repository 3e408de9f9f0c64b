# coding: utf-8

# # Learning from the past on a synthetic task
#
# Every frame shows a flat gray level u_t drawn independently per frame. The
# label at t is the mean of u over the causal window, so the current frame
# alone says nothing about it. A sequence model should learn it; a single
# image model should not.
#
# This demo uses 8 short videos so it finishes in about a minute. The
# acceptance suite runs the full 20 x 400 version.

import tempfile

import numpy as np

from capnet import training
from capnet.dataset import SyntheticSpec, generate_synthetic, split_videos
from capnet.models import CapNet, CausalityExtractor, FeatureCache, FerHead, FerModel, PrecomputedExtractor, TinyCnn
from capnet.sampler import SamplerConfig, enumerate_single_pairs, enumerate_windows
from capnet.training import TrainConfig

root = tempfile.mkdtemp()
videos = generate_synthetic(SyntheticSpec(num_videos=8, frames_per_video=300, seed=3), root)
train_v, val_v = split_videos(videos, 0.25)
print(len(train_v), "training videos,", len(val_v), "validation videos")

# Features come from the stand-in CNN, computed once and frozen.

cnn = TinyCnn(feature_dim=16, image_size=224, rng=np.random.default_rng(0))
table = training.extract_all(cnn, [r for v in videos for r in v.frames.values()])
cache = FeatureCache(16)
for (vid, idx), vec in table.items():
    cache.put(vid, idx, vec)
features = PrecomputedExtractor(cache)

# ## The sequence model

sc = SamplerConfig()
windows = lambda vs: [w for v in vs for w in enumerate_windows(v, sc)]
capnet = CapNet(features, CausalityExtractor(16, 32, 32, rng=np.random.default_rng(1)), sc.length)
cfg = TrainConfig(batch_size=64, lr=3e-3, max_epochs=40, patience=4)
res = training.train_capnet(windows(train_v), windows(val_v), capnet, cfg, sc)
print("sequence model:", res.best_report.row(), "at epoch", res.best_epoch)

# ## The single-image model

pairs = lambda vs: [p for v in vs for p in enumerate_single_pairs(v)]
fer = FerModel(features, FerHead(16, rng=np.random.default_rng(2)))
res = training.train_fer(pairs(train_v), pairs(val_v), fer, cfg)
print("single image:  ", res.best_report.row(), "at epoch", res.best_epoch)
