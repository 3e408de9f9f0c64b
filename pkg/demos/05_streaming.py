# coding: utf-8

# # Streaming prediction
#
# The engine receives frames one at a time, keeps features for the last
# f*w + s of them and answers predict_at(T) from frames no newer than T - f*d.

import numpy as np

from capnet.models import CapNet, CausalityExtractor, FeatureExtractor
from capnet.sampler import SamplerConfig
from capnet.streaming import StreamEngine


class Identity(FeatureExtractor):
    output_dim = 4

    def extract(self, item):
        return np.asarray(item, dtype=float)


sc = SamplerConfig()
model = CapNet(Identity(), CausalityExtractor(4, 8, 8, rng=np.random.default_rng(0)), sc.length)
engine = StreamEngine(model, sc)
print("capacity", engine.capacity)

rng = np.random.default_rng(1)
for i in range(1, 96):
    if i != 90:  # a dropped frame
        engine.push_frame(i, rng.normal(size=4))

p = engine.predict_at(100)
print(p.target_frame, p.state, p.frames_used)

# Frames newer than T - f*d are never read. Pushing wild values for frames
# 96..100 leaves the prediction for T=100 untouched.

for i in range(96, 101):
    engine.push_frame(i, rng.normal(0, 1e6, size=4))
print(engine.predict_at(100) == p)

# Too little history is reported as Insufficient rather than guessed.

print(StreamEngine(model, sc).predict_at(100).insufficient)
