"""Plain record types shared by the dataset, sampler and streaming modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Union


class AffectState(NamedTuple):
    """A (valence, arousal) pair, both components in [-1, 1]."""

    valence: float
    arousal: float

    @classmethod
    def checked(cls, valence: float, arousal: float) -> "AffectState":
        if not (-1.0 <= valence <= 1.0 and -1.0 <= arousal <= 1.0):
            raise ValueError(f"affect components must lie in [-1, 1], got ({valence}, {arousal})")
        return cls(float(valence), float(arousal))


class InvalidLabel(NamedTuple):
    """A label whose raw values fall outside [-1, 1] (e.g. the -5 marker).

    The raw values are kept so an annotation file can be written back unchanged.
    """

    valence: float
    arousal: float


Label = Union[AffectState, InvalidLabel]


def is_valid(label: Optional[Label]) -> bool:
    return isinstance(label, AffectState)


@dataclass(frozen=True)
class FrameRef:
    video_id: str
    frame_index: int
    path: Optional[Path] = None

    def __post_init__(self):
        if self.frame_index < 1:
            raise ValueError(f"frame_index is 1-based, got {self.frame_index}")

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.frame_index)


@dataclass
class LabeledVideo:
    video_id: str
    frame_rate: int
    frames: dict[int, FrameRef] = field(default_factory=dict)
    labels: dict[int, Label] = field(default_factory=dict)
    skipped_files: int = 0

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")
        bad = [i for i in self.labels if i < 1]
        if bad:
            raise ValueError(f"label indices must be >= 1, got {bad[:5]}")

    @classmethod
    def complete(cls, video_id: str, num_frames: int, frame_rate: int = 30,
                 labels: Optional[dict[int, Label]] = None) -> "LabeledVideo":
        """In-memory video with every frame 1..num_frames present (no files)."""
        frames = {i: FrameRef(video_id, i) for i in range(1, num_frames + 1)}
        if labels is None:
            labels = {i: AffectState(0.0, 0.0) for i in frames}
        return cls(video_id, frame_rate, frames, labels)
