"""Shared builders and independent reference implementations for the tests."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from capnet.models import CapNet, CausalityExtractor, FeatureCache, PrecomputedExtractor
from capnet.records import AffectState, FrameRef, InvalidLabel, LabeledVideo


def sparse_video(rng: np.random.Generator, vid: str = "v", max_frames: int = 500,
                 max_drop: float = 0.3, invalid_rate: float = 0.05, f: int = 30) -> LabeledVideo:
    """Random video with 0..max_drop of its frames missing and a few invalid labels."""
    n = int(rng.integers(1, max_frames + 1))
    drop = rng.uniform(0, max_drop)
    keep = rng.random(n) >= drop
    frames = {i: FrameRef(vid, i) for i in range(1, n + 1) if keep[i - 1]}
    labels = {}
    for i in range(1, n + 1):
        if rng.random() < invalid_rate:
            labels[i] = InvalidLabel(-5.0, -5.0)
        else:
            labels[i] = AffectState(*rng.uniform(-1, 1, size=2))
    return LabeledVideo(vid, f, frames, labels)


def brute_force_windows(video: LabeledVideo, d, f: int, w, s: int) -> list[tuple[int, tuple[int, ...]]]:
    """(T, slot indices) for every fillable target, by exhaustive search over each slot's candidates."""
    d, w = Fraction(d), Fraction(w)
    lead = d * f
    span = (w - d) * f
    assert lead.denominator == 1 and span.denominator == 1
    lead, span = int(lead), int(span)
    ns = list(range(span, -1, -s))  # oldest first
    out = []
    for T in sorted(video.labels):
        if not isinstance(video.labels[T], AffectState):
            continue
        chosen = []
        for n in ns:
            nominal = T - lead - n
            cands = [nominal] if n == span else [nominal - j for j in range(s)]
            hits = [c for c in cands if c in video.frames]
            if not hits:
                break
            chosen.append(hits[0])
        else:
            out.append((T, tuple(chosen)))
    return out


def naive_ccc(x, y, eps: float = 1e-8) -> float:
    """Two-pass textbook CCC with population moments."""
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    k = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return 2 * k / max(vx + vy + (mx - my) ** 2, eps)


def feature_model(videos, D: int = 4, L: int = 9, seed: int = 0, H: int = 5, M: int = 6) -> CapNet:
    """CapNet over a precomputed cache of random features for every frame of ``videos``."""
    rng = np.random.default_rng(seed)
    cache = FeatureCache(D)
    for v in videos:
        for i in v.frames:
            cache.put(v.video_id, i, rng.normal(size=D))
    ce = CausalityExtractor(D, H, M, rng=rng)
    for p in ce.weights.values():
        p[...] = rng.normal(0, 0.5, size=p.shape)
    return CapNet(PrecomputedExtractor(cache), ce, L)
