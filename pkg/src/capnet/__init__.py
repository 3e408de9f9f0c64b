"""Causal affect prediction from past facial frames, in numpy."""

from .records import AffectState, FrameRef, InvalidLabel, LabeledVideo, is_valid
from .sampler import ConfigError, SampleWindow, SamplerConfig, build_offsets, enumerate_single_pairs, enumerate_windows, sample_window
from .metrics import CCCAccumulator, CCCReport, ccc, ccc_loss_and_grad, evaluate
from .models import CapNet, CausalityExtractor, FeatureCache, FerHead, FerModel, ModelConfig, PrecomputedExtractor, TinyCnn
from .training import TrainConfig, TrainResult, train_capnet, train_fer
from .streaming import StreamEngine, run_stream_sim

__version__ = "0.1.0"

__all__ = [
    "AffectState", "FrameRef", "InvalidLabel", "LabeledVideo", "is_valid",
    "ConfigError", "SampleWindow", "SamplerConfig", "build_offsets", "enumerate_single_pairs",
    "enumerate_windows", "sample_window",
    "CCCAccumulator", "CCCReport", "ccc", "ccc_loss_and_grad", "evaluate",
    "CapNet", "CausalityExtractor", "FeatureCache", "FerHead", "FerModel", "ModelConfig",
    "PrecomputedExtractor", "TinyCnn",
    "TrainConfig", "TrainResult", "train_capnet", "train_fer",
    "StreamEngine", "run_stream_sim",
]
