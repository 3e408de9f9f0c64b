"""Command-line entry point: ``capnet <command> [--config FILE] [--key value ...]``.

Every run is described by a flat ``key=value`` RunConfig. Values come from
built-in defaults, then an optional config file, then command-line flags.
The fully resolved config is echoed (as ``key=value`` lines, re-parseable)
before the command runs.

Exit codes: 0 success, 1 runtime failure, 2 configuration/validation failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import dataset, gradcheck, metrics, nn, sampler as smp, streaming, training
from .models import (CapNet, CausalityExtractor, FeatureCache, FerHead, FerModel, ModelConfig,
                     PrecomputedExtractor, TinyCnn)
from .sampler import ConfigError

log = logging.getLogger("capnet")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_bool(text: str) -> Optional[bool]:
    return None if text.strip().lower() in ("", "auto") else _bool(text)


def _opt_str(text: str) -> Optional[str]:
    return text or None


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


def _default_root() -> str:
    return os.environ.get("CAPNET_DATA_ROOT", "data")


KEYS: dict[str, Key] = {
    # paths
    "data_root": Key(str, None, "dataset root (default $CAPNET_DATA_ROOT or ./data)"),
    "out": Key(_opt_str, None, "output file or directory"),
    "checkpoint": Key(_opt_str, None, "model checkpoint (CAPC)"),
    "fer_checkpoint": Key(_opt_str, None, "FER checkpoint providing the feature extractor"),
    "feature_cache": Key(_opt_str, None, "precomputed feature cache (CAPF) instead of the CNN"),
    "log": Key(_opt_str, None, "epoch log CSV"),
    "csv": Key(_opt_str, None, "report CSV"),
    "video": Key(_opt_str, None, "video id (stream-sim)"),
    # sampler
    "d": Key(Fraction, Fraction(1, 3), "prediction lead in seconds"),
    "f": Key(int, 30, "frame rate"),
    "w": Key(Fraction, Fraction(3), "window size in seconds"),
    "s": Key(int, 10, "stride in frames"),
    # model
    "image_size": Key(int, 224, "model input size"),
    "feature_dim": Key(int, 32, "feature dimension D"),
    "lstm_hidden": Key(int, 64, "LSTM hidden size H"),
    "fc_hidden": Key(int, 64, "first FC width M"),
    "dropout": Key(float, 0.2, "dropout rate"),
    # training
    "batch_size": Key(int, 128, "mini-batch size"),
    "lr": Key(float, 1e-5, "Adam learning rate"),
    "patience": Key(int, 4, "early-stopping patience (epochs)"),
    "max_epochs": Key(int, 200, "epoch cap"),
    "freeze_extractor": Key(_opt_bool, None, "true/false/auto"),
    "val_fraction": Key(float, 0.2, "fraction of videos held out"),
    # synthetic data
    "num_videos": Key(int, 20, "synthetic videos"),
    "frames_per_video": Key(int, 400, "synthetic frames per video"),
    "stimulus_law": Key(str, "WindowMean", "WindowMean or LaggedStep"),
    "synth_image_size": Key(int, 16, "side of the synthetic PPM frames"),
    # misc
    "seed": Key(int, 0, "the single source of randomness"),
    "threads": Key(int, 1, "worker threads (the implementation is single-threaded)"),
}


def format_value(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = _parse_value(key, value)
    return out


def _parse_value(key: str, value: str) -> Any:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    if value == "" and KEYS[key].default is None:
        return None
    try:
        return KEYS[key].parse(value)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"bad value for {key}: {value!r} ({e})") from None


def resolve(file_values: dict, flag_values: dict) -> dict[str, Any]:
    cfg = {k: spec.default for k, spec in KEYS.items()}
    cfg["data_root"] = _default_root()
    cfg.update(file_values)
    cfg.update(flag_values)
    return cfg


def render_config(cfg: dict[str, Any]) -> str:
    return "".join(f"{k}={format_value(cfg[k])}\n" for k in KEYS)


def sampler_config(cfg) -> smp.SamplerConfig:
    return smp.SamplerConfig(d=cfg["d"], f=cfg["f"], w=cfg["w"], s=cfg["s"])


def train_config(cfg) -> training.TrainConfig:
    tc = training.TrainConfig(cfg["batch_size"], cfg["lr"], cfg["patience"], cfg["max_epochs"],
                              cfg["seed"], cfg["freeze_extractor"])
    try:
        tc.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return tc


def model_config(cfg) -> ModelConfig:
    mc = ModelConfig(cfg["image_size"], cfg["feature_dim"], cfg["lstm_hidden"], cfg["fc_hidden"],
                     cfg["dropout"], cfg["seed"])
    try:
        mc.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return mc


def validate_all(cfg) -> None:
    """Re-check every config the RunConfig houses before any work starts."""
    sampler_config(cfg)
    model_config(cfg)
    train_config(cfg)
    if not 0.0 <= cfg["val_fraction"] < 1.0:
        raise ConfigError(f"val_fraction must lie in [0, 1), got {cfg['val_fraction']}")
    if cfg["threads"] < 1:
        raise ConfigError(f"threads must be >= 1, got {cfg['threads']}")
    if cfg["stimulus_law"] not in dataset.STIMULUS_LAWS:
        raise ConfigError(f"stimulus_law must be one of {dataset.STIMULUS_LAWS}")


def _require(cfg, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required for this command")
    return cfg[key]


def _videos(cfg):
    root = Path(cfg["data_root"])
    if not root.is_dir():
        raise ConfigError(f"data root {root} does not exist")
    videos = dataset.scan_video_dir(root, cfg["f"])
    if not videos:
        raise ConfigError(f"no annotated videos under {root}")
    return videos


def _extractor_from_cfg(cfg, rng):
    if cfg["feature_cache"]:
        return PrecomputedExtractor(FeatureCache.load(cfg["feature_cache"]))
    return TinyCnn(cfg["feature_dim"], cfg["image_size"], rng=rng)


def _save_config_sidecar(path: str, cfg) -> None:
    Path(path + ".config").write_text(render_config(cfg), encoding="utf-8")


# -- commands ----------------------------------------------------------------

def cmd_synth_gen(cfg, args) -> int:
    out = cfg["out"] or cfg["data_root"]
    spec = dataset.SyntheticSpec(cfg["num_videos"], cfg["frames_per_video"], cfg["f"], cfg["seed"],
                                 cfg["stimulus_law"], cfg["synth_image_size"], sampler_config(cfg))
    spec.validate()
    videos = dataset.generate_synthetic(spec, out)
    print(f"wrote {len(videos)} videos to {out}")
    return 0


def cmd_prepare_pairs(cfg, args) -> int:
    videos = _videos(cfg)
    lines = []
    if args.single:
        for v in videos:
            for ref, lab in smp.enumerate_single_pairs(v):
                lines.append(f"{v.video_id},{ref.frame_index},{lab.valence!r},{lab.arousal!r}")
    else:
        sc = sampler_config(cfg)
        for v in videos:
            lines.extend(smp.format_manifest_line(w) for w in smp.enumerate_windows(v, sc))
    text = "".join(line + "\n" for line in lines)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text, encoding="utf-8")
        print(f"wrote {len(lines)} lines to {cfg['out']}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_train_fer(cfg, args) -> int:
    ckpt = cfg["checkpoint"] or "fer.capc"
    tc = train_config(cfg)
    train_v, val_v = dataset.split_videos(_videos(cfg), cfg["val_fraction"])
    if not val_v:
        raise ConfigError("need at least 2 videos to hold one out for validation")
    rng = np.random.default_rng(cfg["seed"])
    ext = _extractor_from_cfg(cfg, rng)
    head = FerHead(ext.output_dim, rng=rng)
    if args.resume:
        resumed = training.load_fer(args.resume, None if isinstance(ext, TinyCnn) else ext)
        ext, head = resumed.extractor, resumed.head
    model = FerModel(ext, head)
    pairs = lambda vs: [p for v in vs for p in smp.enumerate_single_pairs(v)]
    result = training.train_fer(pairs(train_v), pairs(val_v), model, tc)
    training.save_model(ckpt, model, None, model_config(cfg))
    _save_config_sidecar(ckpt, cfg)
    if cfg["log"]:
        training.write_log(result.history, cfg["log"])
    print(f"best epoch {result.best_epoch}: {result.best_report.row()} -> {ckpt}")
    return 0


def cmd_train_capnet(cfg, args) -> int:
    ckpt = cfg["checkpoint"] or "capnet.capc"
    tc = train_config(cfg)
    sc = sampler_config(cfg)
    rng = np.random.default_rng(cfg["seed"])
    D = cfg["feature_dim"]
    if cfg["fer_checkpoint"]:
        fallback = PrecomputedExtractor(FeatureCache.load(cfg["feature_cache"])) if cfg["feature_cache"] else None
        ext = training.extractor_from_tensors(nn.load_checkpoint(cfg["fer_checkpoint"]), fallback)
    else:
        ext = _extractor_from_cfg(cfg, rng)
    if ext.output_dim != D:
        raise ConfigError(f"feature extractor gives D={ext.output_dim} but feature_dim={D}")
    causality = CausalityExtractor(D, cfg["lstm_hidden"], cfg["fc_hidden"], cfg["dropout"], rng=rng)
    if args.resume:
        tensors = nn.load_checkpoint(args.resume)
        saved = training.header_sampler(tensors)
        if saved is None or saved.length != sc.length:
            raise ConfigError(f"checkpoint window length {saved and saved.length} != configured {sc.length}")
        causality = training.causality_from_tensors(tensors)
        if causality.feature_dim != D:
            raise ConfigError(f"checkpoint expects D={causality.feature_dim}, extractor gives D={D}")
    model = CapNet(ext, causality, sc.length)
    train_v, val_v = dataset.split_videos(_videos(cfg), cfg["val_fraction"])
    if not val_v:
        raise ConfigError("need at least 2 videos to hold one out for validation")
    wins = lambda vs: [w for v in vs for w in smp.enumerate_windows(v, sc)]
    result = training.train_capnet(wins(train_v), wins(val_v), model, tc, sc)
    training.save_model(ckpt, model, sc, model_config(cfg))
    _save_config_sidecar(ckpt, cfg)
    if cfg["log"]:
        training.write_log(result.history, cfg["log"])
    print(f"best epoch {result.best_epoch}: {result.best_report.row()} -> {ckpt}")
    return 0


def cmd_evaluate(cfg, args) -> int:
    videos = _videos(cfg)
    if args.split == "val":
        videos = dataset.split_videos(videos, cfg["val_fraction"])[1]
    if args.oracle == "identity":
        sc = sampler_config(cfg)
        items = [w for v in videos for w in smp.enumerate_windows(v, sc)]
        report = metrics.evaluate(lambda ws: [tuple(w.label) for w in ws], items, cfg["batch_size"])
        rows = [metrics.ReportRow("identity-oracle", "sequence", _fmt_window(sc.w), report)]
    else:
        path = _require(cfg, "checkpoint")
        tensors = nn.load_checkpoint(path)
        fallback = PrecomputedExtractor(FeatureCache.load(cfg["feature_cache"])) if cfg["feature_cache"] else None
        ext = training.extractor_from_tensors(tensors, fallback)
        sc = training.header_sampler(tensors)
        if sc is None:
            model = FerModel(ext, FerHead(ext.output_dim, weights=training._sub(tensors, "fer.")))
            items = [p for v in videos for p in smp.enumerate_single_pairs(v)]
            table = training.extract_all(ext, [r for r, _ in items])
            predict = lambda ps: model.predict_features(np.stack([table[r.key] for r, _ in ps]))
            report = metrics.evaluate(predict, items, cfg["batch_size"], label_of=lambda p: p[1])
            rows = [metrics.ReportRow("FER-Tuned", "single", None, report)]
        else:
            model = CapNet(ext, training.causality_from_tensors(tensors), sc.length)
            items = [w for v in videos for w in smp.enumerate_windows(v, sc)]
            table = training.extract_all(ext, [r for w in items for r in w.slots])
            predict = lambda ws: model.predict_features(
                np.stack([[table[r.key] for r in w.slots] for w in ws]))
            report = metrics.evaluate(predict, items, cfg["batch_size"])
            rows = [metrics.ReportRow("CAPNet", "sequence", _fmt_window(sc.w), report)]
    print(metrics.render_table(rows))
    if cfg["csv"]:
        Path(cfg["csv"]).write_text(metrics.render_csv(rows), encoding="utf-8")
    return 0


def _fmt_window(w: Fraction) -> str:
    return str(w.numerator) if w.denominator == 1 else str(w)


def cmd_gradcheck(cfg, args) -> int:
    names = [n.strip() for n in args.layers.split(",")] if args.layers else list(gradcheck.SUITES)
    unknown = [n for n in names if n not in gradcheck.SUITES]
    if unknown:
        raise ConfigError(f"unknown gradient suites {unknown}; choose from {gradcheck.SUITES}")
    seeds = range(cfg["seed"], cfg["seed"] + args.seeds)
    results = gradcheck.run_suites(names, seeds, inject_bug=args.inject_bug)
    ok = True
    for name, err in results.items():
        passed = err < gradcheck.TOLERANCE
        ok &= passed
        print(f"{name:8s} max rel. error {err:.3e}  {'PASS' if passed else 'FAIL'}")
    print(f"overall max rel. error {max(results.values()):.3e}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_stream_sim(cfg, args) -> int:
    path = _require(cfg, "checkpoint")
    vid = _require(cfg, "video")
    out = cfg["out"] or "trace.csv"
    fallback = PrecomputedExtractor(FeatureCache.load(cfg["feature_cache"])) if cfg["feature_cache"] else None
    tensors = nn.load_checkpoint(path)
    sc = training.header_sampler(tensors)
    if sc is None:
        raise ConfigError(f"{path} is not a sequence-model checkpoint")
    model = CapNet(training.extractor_from_tensors(tensors, fallback),
                   training.causality_from_tensors(tensors), sc.length)
    matches = [v for v in _videos(cfg) if v.video_id == vid]
    if not matches:
        raise ConfigError(f"video {vid!r} not found under {cfg['data_root']}")
    trace = streaming.run_stream_sim(matches[0], model, sc, out, realtime=args.realtime)
    mean_us = float(np.mean(trace.micros)) if trace.micros else 0.0
    print(f"{len(trace.predictions)} rows, {trace.produced} predictions, "
          f"mean {mean_us:.1f} us/prediction, peak buffer {trace.peak_buffer} -> {out}")
    return 0


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "prepare-pairs": cmd_prepare_pairs,
    "train-fer": cmd_train_fer,
    "train-capnet": cmd_train_capnet,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "stream-sim": cmd_stream_sim,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("-v", "--verbose", action="store_true")
    for key, spec in KEYS.items():
        common.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, default=None, metavar="VALUE",
                            help=spec.help)
    parser = argparse.ArgumentParser(prog="capnet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "prepare-pairs":
            p.add_argument("--single", action="store_true", help="emit single-frame pairs")
        if name in ("train-fer", "train-capnet"):
            p.add_argument("--resume", help="start from this checkpoint (its .config sidecar is the base config)")
        if name == "evaluate":
            p.add_argument("--oracle", choices=["identity"], help="score a label-echoing oracle")
            p.add_argument("--split", choices=["all", "val"], default="all")
        if name == "gradcheck":
            p.add_argument("--layers", help=f"comma list from {','.join(gradcheck.SUITES)}")
            p.add_argument("--seeds", type=int, default=20)
            p.add_argument("--inject-bug", action="store_true", help="corrupt gradients (negative control)")
        if name == "stream-sim":
            p.add_argument("--realtime", action="store_true", help="pace replay at the frame rate")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = {}
        resume = getattr(args, "resume", None)
        if resume and Path(resume + ".config").exists():
            file_values.update(parse_config_text(Path(resume + ".config").read_text(encoding="utf-8")))
        if args.config:
            file_values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        flags = {k[4:]: _parse_value(k[4:], v) for k, v in vars(args).items()
                 if k.startswith("cfg_") and v is not None}
        cfg = resolve(file_values, flags)
        validate_all(cfg)
        sys.stdout.write(render_config(cfg))
        sys.stdout.flush()
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - exit-code contract
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
