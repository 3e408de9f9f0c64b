"""Frame-indexed video datasets: annotation files, PPM frames, synthetic generation.

On-disk layout::

    <root>/<video_id>.txt          "valence,arousal" header, one line per frame
    <root>/<video_id>/00001.ppm    1-based, zero-padded cropped face frames
    <root>/<video_id>/stimulus.csv synthetic datasets only: "frame,u"
"""

from __future__ import annotations

import io
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, TextIO, Union

import numpy as np

from .records import AffectState, FrameRef, InvalidLabel, Label, LabeledVideo
from .sampler import ConfigError, SamplerConfig, build_offsets

log = logging.getLogger(__name__)

HEADER = "valence,arousal"
INVALID_MARK = -5.0
_FRAME_RE = re.compile(r"^(\d{5})\.ppm$")


class AnnotationFormatError(ValueError):
    pass


class AnnotationParseError(ValueError):
    def __init__(self, line_number: int, line: str):
        super().__init__(f"line {line_number}: cannot parse {line!r}")
        self.line_number = line_number


class DatasetError(RuntimeError):
    pass


# -- annotations -------------------------------------------------------------

def load_annotations(stream: Union[TextIO, str, Path]) -> dict[int, Label]:
    """Parse an annotation file into ``frame_index -> AffectState | InvalidLabel``.

    Line ``i + 1`` of the file holds the label of frame ``i``. Values outside
    [-1, 1] mark the frame invalid.
    """
    if isinstance(stream, (str, Path)):
        with open(stream, encoding="utf-8") as fh:
            return load_annotations(fh)
    lines = stream.read().splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise AnnotationFormatError(f"missing header {HEADER!r}")
    labels: dict[int, Label] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2:
            raise AnnotationParseError(lineno, line)
        try:
            v, a = float(parts[0]), float(parts[1])
        except ValueError:
            raise AnnotationParseError(lineno, line) from None
        if not (np.isfinite(v) and np.isfinite(a)):
            raise AnnotationParseError(lineno, line)
        if -1.0 <= v <= 1.0 and -1.0 <= a <= 1.0:
            labels[lineno - 1] = AffectState(v, a)
        else:
            labels[lineno - 1] = InvalidLabel(v, a)
    return labels


def dump_annotations(labels: dict[int, Label], stream: Optional[TextIO] = None) -> str:
    """Canonical annotation text (floats written with ``repr``).

    Frames 1..max(labels) must all be present since the format is positional.
    """
    n = max(labels) if labels else 0
    missing = [i for i in range(1, n + 1) if i not in labels]
    if missing:
        raise ValueError(f"annotation files are positional; frames {missing[:5]} have no label")
    buf = io.StringIO()
    buf.write(HEADER + "\n")
    for i in range(1, n + 1):
        lab = labels[i]
        buf.write(f"{float(lab.valence)!r},{float(lab.arousal)!r}\n")
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


# -- PPM frames --------------------------------------------------------------

def write_ppm(path: Union[str, Path], image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 uint8 image, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    """Decode a binary P6 PPM with maxval 255 into an HxWx3 uint8 array."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a P6 PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    body = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return body.reshape(h, w, 3)


def load_image(ref: FrameRef, size: int = 224) -> np.ndarray:
    """Read a frame, resize (nearest neighbour) to ``size`` x ``size`` and scale to [0, 1]."""
    if ref.path is None:
        raise DatasetError(f"frame {ref.key} has no file path")
    return prepare_image(read_ppm(ref.path), size)


def prepare_image(img: np.ndarray, size: int = 224) -> np.ndarray:
    h, w, _ = img.shape
    if (h, w) != (size, size):
        rows = (np.arange(size) * h) // size
        cols = (np.arange(size) * w) // size
        img = img[rows][:, cols]
    return img.astype(np.float64) / 255.0


# -- directory scanning ------------------------------------------------------

def scan_video_dir(root: Union[str, Path], frame_rate: int = 30) -> list[LabeledVideo]:
    """Collect every ``<video_id>.txt`` annotation under ``root`` with its frame directory."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    videos = []
    for ann in sorted(root.glob("*.txt")):
        vid = ann.stem
        frame_dir = root / vid
        if not frame_dir.is_dir():
            raise DatasetError(f"annotation {ann.name} has no frame directory {frame_dir}")
        labels = load_annotations(ann)
        frames: dict[int, FrameRef] = {}
        skipped = 0
        for p in frame_dir.iterdir():
            if p.suffix != ".ppm":
                continue
            m = _FRAME_RE.match(p.name)
            if m is None or int(m.group(1)) < 1:
                skipped += 1
                continue
            idx = int(m.group(1))
            frames[idx] = FrameRef(vid, idx, p)
        if skipped:
            log.warning("%s: skipped %d frame files with unparseable names", vid, skipped)
        videos.append(LabeledVideo(vid, frame_rate, dict(sorted(frames.items())), labels, skipped))
    return videos


# -- synthetic data ----------------------------------------------------------

STIMULUS_LAWS = ("WindowMean", "LaggedStep")


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic causal dataset.

    Each frame shows a uniform gray image whose level encodes a stimulus
    ``u_t``; the label at ``t`` depends only on stimuli inside the causal
    window of ``sampler``.
    """

    num_videos: int = 20
    frames_per_video: int = 400
    frame_rate: int = 30
    seed: int = 0
    stimulus_law: str = "WindowMean"
    image_size: int = 16
    sampler: Optional[SamplerConfig] = None
    constant_stimulus: Optional[float] = None

    def __post_init__(self):
        if self.sampler is None:
            self.sampler = SamplerConfig(f=self.frame_rate)

    def validate(self) -> None:
        if self.num_videos < 1:
            raise ConfigError(f"num_videos must be >= 1, got {self.num_videos}")
        if self.stimulus_law not in STIMULUS_LAWS:
            raise ConfigError(f"stimulus_law must be one of {STIMULUS_LAWS}, got {self.stimulus_law!r}")
        if self.sampler.f != self.frame_rate:
            raise ConfigError(f"sampler frame rate {self.sampler.f} != frame_rate {self.frame_rate}")
        need = self.sampler.window_frames + 1
        if self.frames_per_video < need:
            raise ConfigError(
                f"frames_per_video must be >= f*w + 1 = {need}, got {self.frames_per_video}")
        if self.image_size < 1:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        if self.constant_stimulus is not None and not -1 <= self.constant_stimulus <= 1:
            raise ConfigError("constant_stimulus must lie in [-1, 1]")


def stimulus_labels(u: np.ndarray, sampler: SamplerConfig, law: str = "WindowMean") -> dict[int, Label]:
    """Labels for a complete stimulus sequence ``u`` (``u[0]`` is frame 1)."""
    offsets = np.array(build_offsets(sampler))
    older = offsets[: (len(offsets) + 1) // 2]
    n = len(u)
    labels: dict[int, Label] = {}
    for t in range(1, n + 1):
        if t + offsets[0] < 1:
            labels[t] = InvalidLabel(INVALID_MARK, INVALID_MARK)
            continue
        if law == "WindowMean":
            v = float(np.mean(u[t + offsets - 1]))
            a = float(np.mean(u[t + older - 1]))
        else:
            v = float(u[t + offsets[-1] - 1])
            a = 0.5 if v >= 0 else -0.5
        labels[t] = AffectState(min(1.0, max(-1.0, v)), min(1.0, max(-1.0, a)))
    return labels


def generate_synthetic(spec: SyntheticSpec, root: Union[str, Path]) -> list[LabeledVideo]:
    """Write a synthetic dataset under ``root`` and return it as scanned videos.

    Stimuli are drawn as 8-bit gray levels so the image encodes ``u`` exactly:
    ``u = level / 127.5 - 1``.
    """
    spec.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    sz = spec.image_size
    for k in range(spec.num_videos):
        vid = f"synth_{k:03d}"
        vdir = root / vid
        vdir.mkdir(exist_ok=True)
        if spec.constant_stimulus is None:
            levels = rng.integers(0, 256, size=spec.frames_per_video)
            u = levels / 127.5 - 1.0
        else:
            # a constant stimulus is kept exact; only its image is rounded
            u = np.full(spec.frames_per_video, float(spec.constant_stimulus))
            levels = np.full(spec.frames_per_video, int(round((spec.constant_stimulus + 1) * 127.5)))
        with open(vdir / "stimulus.csv", "w", encoding="utf-8") as fh:
            fh.write("frame,u\n")
            for t, val in enumerate(u, start=1):
                fh.write(f"{t},{float(val)!r}\n")
        for t, lvl in enumerate(levels, start=1):
            write_ppm(vdir / f"{t:05d}.ppm", np.full((sz, sz, 3), lvl, dtype=np.uint8))
        labels = stimulus_labels(u, spec.sampler, spec.stimulus_law)
        with open(root / f"{vid}.txt", "w", encoding="utf-8") as fh:
            dump_annotations(labels, fh)
    return scan_video_dir(root, spec.frame_rate)


def read_stimulus(path: Union[str, Path]) -> dict[int, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            t, u = line.strip().split(",")
            out[int(t)] = float(u)
    return out


def split_videos(videos: Iterable[LabeledVideo], val_fraction: float = 0.2) -> tuple[list[LabeledVideo], list[LabeledVideo]]:
    """Deterministic split by video (last videos go to validation)."""
    videos = list(videos)
    n_val = max(1, int(round(len(videos) * val_fraction))) if len(videos) > 1 else 0
    return videos[: len(videos) - n_val], videos[len(videos) - n_val:]
