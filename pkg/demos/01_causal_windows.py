# coding: utf-8

# # Causal windows over past frames
#
# A prediction for frame T may only look at frames at least f*d frames old.
# The sampler picks L slots between T - f*w and T - f*d, one every s frames.

from fractions import Fraction

import numpy as np

from capnet.records import LabeledVideo
from capnet.sampler import SamplerConfig, build_offsets, enumerate_windows, sample_window

cfg = SamplerConfig()  # d=1/3 s, f=30 fps, w=3 s, s=10 frames
print("offsets:", build_offsets(cfg))
print("window length:", cfg.length)

# Smaller windows just drop the oldest slots.

for w in (3, 2, 1, Fraction(1, 3)):
    print(f"w={w}:", build_offsets(SamplerConfig(w=w)))

# ## Filling a window
#
# On a complete video the slots are the nominal frames.

video = LabeledVideo.complete("demo", 300)
print(sample_window(video, 100, cfg).indices)

# When a nominal frame is missing the sampler walks backwards, at most s-1
# frames, and takes the first frame it finds.

del video.frames[90]
print(sample_window(video, 100, cfg).indices)

# The oldest slot gets no such second chance: the window is Insufficient.

del video.frames[10]
print(sample_window(video, 100, cfg))

# ## Counting training pairs
#
# A 300-frame video yields one window per target from 91 on.

full = LabeledVideo.complete("full", 300)
print(len(list(enumerate_windows(full, cfg))), "windows at w=3")
print(len(list(enumerate_windows(full, SamplerConfig(w=2)))), "windows at w=2")

# With a fifth of the frames dropped at random, fallbacks keep most targets.

rng = np.random.default_rng(0)
for i in list(full.frames):
    if rng.random() < 0.2:
        del full.frames[i]
print(len(list(enumerate_windows(full, cfg))), "windows with 20% of frames missing")
