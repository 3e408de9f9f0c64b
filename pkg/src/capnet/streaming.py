"""Real-time causal inference over a stream of frames.

Frames are pushed in increasing index order; features are extracted once on
arrival and kept in a bounded ring. ``predict_at(T)`` builds the window with
the same offsets and fallback rule as the offline sampler, looking only at
frames with index <= T - f*d.
"""

from __future__ import annotations

import csv
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .models import CapNet
from .records import AffectState, LabeledVideo
from .sampler import SamplerConfig, fill_slots


class FrameOrderError(ValueError):
    pass


@dataclass(frozen=True)
class StreamPrediction:
    target_frame: int
    state: Optional[AffectState]  # None means Insufficient
    frames_used: tuple[int, ...] = ()

    @property
    def insufficient(self) -> bool:
        return self.state is None


class StreamEngine:
    def __init__(self, model: CapNet, sampler: SamplerConfig):
        if sampler.length != model.window_length:
            raise ValueError(f"sampler windows have {sampler.length} frames, model expects {model.window_length}")
        self.model = model
        self.sampler = sampler
        self.capacity = sampler.window_frames + sampler.s
        self._ring: deque[tuple[int, np.ndarray]] = deque()
        self._index: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()
        self.newest_index = 0
        self.peak_size = 0

    def __len__(self):
        return len(self._ring)

    def buffered_indices(self) -> list[int]:
        with self._lock:
            return [i for i, _ in self._ring]

    def push_frame(self, frame_index: int, item) -> None:
        """Extract features for ``item`` (image or frame ref) and append them to the ring."""
        if frame_index <= self.newest_index:
            raise FrameOrderError(
                f"frame {frame_index} arrived after frame {self.newest_index}; frames must be pushed in order")
        feat = np.asarray(self.model.extractor.extract(item), dtype=np.float64)
        with self._lock:
            if frame_index <= self.newest_index:
                raise FrameOrderError(f"frame {frame_index} arrived after frame {self.newest_index}")
            self._ring.append((frame_index, feat))
            self._index[frame_index] = feat
            self.newest_index = frame_index
            while len(self._ring) > self.capacity:
                old, _ = self._ring.popleft()
                del self._index[old]
            self.peak_size = max(self.peak_size, len(self._ring))

    def predict_at(self, T: int) -> StreamPrediction:
        horizon = T - self.sampler.lead
        with self._lock:
            visible = {i: f for i, f in self._index.items() if i <= horizon}
        idx = fill_slots(visible, T, self.sampler)
        if idx is None:
            return StreamPrediction(T, None)
        feats = np.stack([visible[i] for i in idx])
        out = self.model.predict_features(feats)
        return StreamPrediction(T, AffectState(float(out[0]), float(out[1])), tuple(idx))


@dataclass
class StreamTrace:
    predictions: list[StreamPrediction] = field(default_factory=list)
    micros: list[float] = field(default_factory=list)
    peak_buffer: int = 0

    @property
    def produced(self) -> int:
        return sum(not p.insufficient for p in self.predictions)


def run_stream_sim(video: LabeledVideo, model: CapNet, sampler: SamplerConfig,
                   output: Optional[Union[str, Path]] = None, realtime: bool = False,
                   loader: Optional[Callable] = None) -> StreamTrace:
    """Replay ``video`` frame by frame, predicting the affect at every frame index.

    After frame ``T`` arrives (or is found missing) the engine predicts ``T``.
    With ``realtime`` the replay is paced at the sampler's frame rate.
    """
    if loader is None:
        from .training import default_loader
        loader = default_loader(model.extractor)
    engine = StreamEngine(model, sampler)
    trace = StreamTrace()
    last = max(video.frames, default=0)
    t_start = time.perf_counter()
    for T in range(1, last + 1):
        if realtime:
            delay = t_start + (T - 1) / sampler.f - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        ref = video.frames.get(T)
        if ref is not None:
            engine.push_frame(T, loader(ref))
        t0 = time.perf_counter()
        pred = engine.predict_at(T)
        trace.micros.append((time.perf_counter() - t0) * 1e6)
        trace.predictions.append(pred)
    trace.peak_buffer = engine.peak_size
    if output is not None:
        write_trace(trace, output)
    return trace


def write_trace(trace: StreamTrace, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["frame", "valence", "arousal", "insufficient_flag", "micros_per_prediction"])
        for p, us in zip(trace.predictions, trace.micros):
            if p.insufficient:
                wr.writerow([p.target_frame, "", "", 1, f"{us:.1f}"])
            else:
                wr.writerow([p.target_frame, repr(p.state.valence), repr(p.state.arousal), 0, f"{us:.1f}"])


def offline_predictions(video: LabeledVideo, model: CapNet, sampler: SamplerConfig,
                        loader: Optional[Callable] = None) -> dict[int, AffectState]:
    """Predictions for every fillable target frame, computed from the whole recorded video."""
    from .training import extract_all
    table = extract_all(model.extractor, video.frames.values(), loader)
    out = {}
    for T in range(1, max(video.frames, default=0) + 1):
        idx = fill_slots(video.frames, T, sampler)
        if idx is None:
            continue
        feats = np.stack([table[video.frames[i].key] for i in idx])
        y = model.predict_features(feats)
        out[T] = AffectState(float(y[0]), float(y[1]))
    return out
