"""Causal window construction over past frames.

A window for target frame ``T`` holds the frames ``T - (f*d + n)`` for
``n = f*(w-d), ..., 2s, s, 0``, oldest first, paired with the label at ``T``.
A missing frame is replaced by the nearest older frame within one stride,
except for the oldest slot, which has no fallback.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Collection, Iterator, Optional, Union

from .records import AffectState, FrameRef, LabeledVideo, is_valid


class ConfigError(ValueError):
    """Raised when a configuration violates one of its constraints."""


Rational = Union[int, float, str, Fraction]


def as_fraction(value: Rational) -> Fraction:
    if isinstance(value, float):
        # floats such as 1/3 are snapped to a small denominator
        return Fraction(value).limit_denominator(1000)
    return Fraction(value)


@dataclass(frozen=True)
class SamplerConfig:
    """Window geometry: lead ``d`` and size ``w`` in seconds, frame rate ``f``, stride ``s``."""

    d: Fraction = Fraction(1, 3)
    f: int = 30
    w: Fraction = Fraction(3)
    s: int = 10

    def __post_init__(self):
        object.__setattr__(self, "d", as_fraction(self.d))
        object.__setattr__(self, "w", as_fraction(self.w))
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.f, int) or self.f <= 0:
            raise ConfigError(f"frame rate f must be a positive integer, got {self.f!r}")
        if not isinstance(self.s, int) or self.s <= 0:
            raise ConfigError(f"stride s must be a positive integer, got {self.s!r}")
        if not 0 <= self.d <= self.w:
            raise ConfigError(f"need 0 <= d <= w, got d={self.d}, w={self.w}")
        if (self.f * self.d).denominator != 1:
            raise ConfigError(f"f*d must be an integer, got f*d={self.f * self.d}")
        if (self.f * self.w).denominator != 1:
            raise ConfigError(f"f*w must be an integer, got f*w={self.f * self.w}")
        if self.span % self.s != 0:
            raise ConfigError(
                f"f*(w-d)={self.span} must be divisible by stride s={self.s}")

    @property
    def lead(self) -> int:
        """Prediction lead in frames (f*d)."""
        return int(self.f * self.d)

    @property
    def span(self) -> int:
        """Distance in frames between the newest and oldest slot (f*(w-d))."""
        return int(self.f * (self.w - self.d))

    @property
    def window_frames(self) -> int:
        return int(self.f * self.w)

    @property
    def length(self) -> int:
        return self.span // self.s + 1


def build_offsets(config: SamplerConfig) -> list[int]:
    """Negative frame offsets of the window slots, oldest first."""
    config.validate()
    return [-(config.lead + n) for n in range(config.span, -1, -config.s)]


@dataclass(frozen=True)
class SampleWindow:
    video_id: str
    target_frame: int
    slots: tuple[FrameRef, ...]
    label: AffectState

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(ref.frame_index for ref in self.slots)


def fill_slots(available: Collection[int], T: int, config: SamplerConfig) -> Optional[list[int]]:
    """Frame indices filling the window for target ``T``, or None if it cannot be filled.

    ``available`` is any container supporting ``in`` over existing frame indices.
    Shared by the offline sampler and the streaming engine so both resolve
    fallbacks identically.
    """
    offsets = build_offsets(config)
    chosen = []
    for k, off in enumerate(offsets):
        nominal = T + off
        if nominal in available:
            chosen.append(nominal)
            continue
        if k == 0:
            # oldest slot: no fallback
            return None
        for cand in range(nominal - 1, nominal - config.s, -1):
            if cand in available:
                chosen.append(cand)
                break
        else:
            return None
    return chosen


def sample_window(video: LabeledVideo, T: int, config: SamplerConfig) -> Optional[SampleWindow]:
    """Window for target ``T``; None stands for Insufficient."""
    if video.frame_rate != config.f:
        raise ConfigError(
            f"video {video.video_id} has frame rate {video.frame_rate}, sampler expects {config.f}")
    label = video.labels.get(T)
    if not is_valid(label):
        return None
    idx = fill_slots(video.frames, T, config)
    if idx is None:
        return None
    return SampleWindow(video.video_id, T, tuple(video.frames[i] for i in idx), label)


def enumerate_windows(video: LabeledVideo, config: SamplerConfig) -> Iterator[SampleWindow]:
    for T in sorted(video.labels):
        window = sample_window(video, T, config)
        if window is not None:
            yield window


def enumerate_single_pairs(video: LabeledVideo) -> Iterator[tuple[FrameRef, AffectState]]:
    """(current frame, label) pairs: the zero-lead, single-image case."""
    for i in sorted(video.frames.keys() & video.labels.keys()):
        label = video.labels[i]
        if is_valid(label):
            yield video.frames[i], label


def format_manifest_line(window: SampleWindow) -> str:
    idx = ",".join(str(i) for i in window.indices)
    return f"{window.video_id},{window.target_frame},{idx},{window.label.valence!r},{window.label.arousal!r}"
