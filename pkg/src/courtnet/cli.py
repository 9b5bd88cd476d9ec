"""Command-line entry point: ``courtnet <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis
from .config import ConfigError, RunConfig, dataclass_from_kv, format_kv, load_run_config, read_kv
from .data import (
    DatasetError,
    PGMError,
    PlacementError,
    ProbeSpec,
    Sample,
    SceneSpec,
    generate_probe_set,
    generate_random_scenes,
    load_dataset,
    read_pgm,
    write_dataset,
    write_pgm,
)
from .gradcheck import run_suite
from .training import (
    CheckpointError,
    NumericalError,
    TrainState,
    evaluate,
    fit,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.cnt"
LOG_NAME = "train_log.csv"
CONFIG_NAME = "config.txt"

log = logging.getLogger("courtnet")


def _manifest_path(data: str) -> Path:
    """Accept either a manifest file or a directory holding ``manifest.tsv``."""
    p = Path(data)
    return p / "manifest.tsv" if p.is_dir() else p


def _write_config_beside(path: Path, values: dict) -> Path:
    """Effective configuration next to an output file (``<name>.config.txt``)."""
    target = path.with_name(path.name + ".config.txt")
    target.write_text(format_kv(values))
    return target


def _spec_mapping(spec) -> dict[str, str]:
    return {f.name: str(getattr(spec, f.name)) for f in dataclasses.fields(spec)}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_generate(args: argparse.Namespace) -> int:
    values = read_kv(args.spec) if args.spec else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cls = ProbeSpec if args.probe else SceneSpec
    try:
        spec = dataclass_from_kv(cls, values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if args.probe:
        samples = generate_probe_set(spec)
    else:
        if args.count < 0:
            raise ConfigError("--count must be non-negative")
        samples = generate_random_scenes(spec, args.count)
    out = Path(args.out)
    manifest = write_dataset(out, samples)
    kind = "probe" if args.probe else "random"
    (out / CONFIG_NAME).write_text(format_kv({"kind": kind, **_spec_mapping(spec)}))
    areas = [int(s.mask.sum()) for s in samples]
    targets = [len(s.metadata.get("centers", [])) for s in samples]
    print(f"wrote {len(samples)} {kind} frames to {manifest}")
    if samples:
        print(
            f"targets per frame: mean {np.mean(targets):.2f}, "
            f"mask area px: min {min(areas)} mean {np.mean(areas):.2f} max {max(areas)}"
        )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overrides = {"gamma": args.gamma, "epochs": args.epochs, "seed": args.seed}
    if args.no_jury:
        overrides["no_jury"] = "true"
    if args.resume:
        state = load_checkpoint(args.resume)
        extra = {k: v for k, v in overrides.items() if v is not None}
        if args.config:
            extra = {**read_kv(args.config), **extra}
        changed = {k for k, v in extra.items() if str(v) != state.config.to_mapping()[k] and k != "epochs"}
        if changed:
            raise ConfigError(f"cannot change {sorted(changed)} when resuming")
        if "epochs" in extra:
            state.net.config = state.config.replace(epochs=extra["epochs"])
    else:
        config = load_run_config(args.config, **overrides)
        state = TrainState.fresh(config)
    dataset = load_dataset(_manifest_path(args.data))
    if not dataset:
        raise DatasetError(f"{args.data}: training set is empty")
    config = state.config
    (out / CONFIG_NAME).write_text(format_kv(config.to_mapping()))
    log.info("effective config:\n%s", format_kv(config.to_mapping()).rstrip())

    def report(st: TrainState, stats) -> None:
        m = stats.means()
        print(
            f"epoch {st.epoch}: loss_P {m['loss_P']:.4f} loss_D {m['loss_D']:.4f} "
            f"loss_J {m['loss_J']:.4f} soft_pr {m['soft_pr']:.4f} soft_re {m['soft_re']:.4f}",
            flush=True,
        )

    fit(state, dataset, config.train.epochs, out / LOG_NAME, out / CHECKPOINT_NAME, report)
    if state.epoch == 0 or not (out / CHECKPOINT_NAME).exists():
        save_checkpoint(out / CHECKPOINT_NAME, state)
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(_manifest_path(args.data))
    threshold = state.config.threshold if args.threshold is None else args.threshold
    report = evaluate(state.net, dataset, threshold)
    if args.report:
        path = Path(args.report)
        report.write_csv(path)
        _write_config_beside(path, {**state.config.to_mapping(), "threshold": threshold})
    print(f"precision {report.mean_precision:.4f} recall {report.mean_recall:.4f} f1 {report.mean_f1:.4f}")
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    try:
        image = read_pgm(args.image)
    except (OSError, PGMError) as exc:
        raise DatasetError(str(exc)) from None
    cfg = state.config.embed
    if image.shape != (cfg.image_h, cfg.image_w):
        raise DatasetError(f"{args.image}: expected {cfg.image_h}x{cfg.image_w}, got {image.shape}")
    threshold = state.config.threshold if args.threshold is None else args.threshold
    mask = state.net.detect(image[None, None], threshold)[0, 0]
    out = Path(args.out)
    write_pgm(out, mask)
    _write_config_beside(out, {**state.config.to_mapping(), "threshold": threshold})
    print(f"{int(mask.sum())} target pixels -> {out}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rows = run_suite(tuple(args.seeds))
    worst: dict[str, tuple[float, float]] = {}
    for name, _, err, tol in rows:
        if name not in worst or err > worst[name][0]:
            worst[name] = (err, tol)
    failed = 0
    for name, (err, tol) in sorted(worst.items(), key=lambda kv: -kv[1][0]):
        ok = err <= tol
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:16s} worst rel err {err:.3e} (tol {tol:.0e})")
    print(f"{len(worst) - failed}/{len(worst)} operations within tolerance over seeds {list(args.seeds)}")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def _probe_frames(data: str | None, grid: int) -> list[Sample]:
    if data is None:
        return generate_probe_set(ProbeSpec(grid=grid))
    frames = load_dataset(_manifest_path(data))
    if len(frames) != grid * grid * 9:
        raise DatasetError(f"{data}: expected {grid * grid * 9} probe frames, found {len(frames)}")
    for t, s in enumerate(frames):
        s.metadata.update(frame=t, patch_index=t // 9, slot=t % 9)
    return frames


def cmd_probe_attention(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    frames = _probe_frames(args.data, state.config.embed.grid)
    out = Path(args.out)
    result = analysis.probe_attention_report(state.net, frames, out, block=args.block)
    (out / CONFIG_NAME).write_text(format_kv({**state.config.to_mapping(), "block": args.block}))
    print(f"frames: {result['frames']}")
    print(f"coarse attention peaks on the target patch in {result['localization_rate']:.1%} of frames")
    print(f"dominant period: {analysis.format_period(result['dominant_period'])}")
    return EXIT_OK


def cmd_fft(args: argparse.Namespace) -> int:
    try:
        series = analysis.FeatureSeries.read_csv(args.series)
    except (OSError, ValueError) as exc:
        raise DatasetError(str(exc)) from None
    if len(series) < 2:
        raise DatasetError(f"{args.series}: need at least two frames")
    spectrum = analysis.dft_power(series, alpha=args.alpha)
    if args.out:
        out = Path(args.out)
        spectrum.write_csv(out)
        _write_config_beside(out, {"series": args.series, "alpha": args.alpha, "frames": len(series)})
    print(f"dominant period: {analysis.format_period(spectrum.dominant_period)}")
    print(f"peak bin k={spectrum.dominant_k}, peak/mean power {spectrum.peak_ratio:.2f}, "
          f"false-alarm probability {spectrum.false_alarm:.2e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="courtnet", description="Three-network small-target detector.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log the effective configuration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--probe", action="store_true", help="ordered probe frames (one target per frame)")
    kind.add_argument("--random", action="store_true", help="random clutter scenes (default)")
    p.add_argument("--spec", help="key=value file overriding scene or probe parameters")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100, help="number of random scenes")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train all networks")
    p.add_argument("--config", help="key=value run configuration")
    p.add_argument("--data", required=True, help="manifest file or dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=int)
    p.add_argument("--epochs", type=int, help="total epochs (also when resuming)")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-jury", action="store_true", help="train without the jury; fuse by mean")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--report", help="per-image CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="binary mask for one PGM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("probe-attention", help="attention summaries and feature series over the probe set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="probe dataset (generated in memory when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--block", type=int, default=-1, help="denseblock to inspect")
    p.set_defaults(func=cmd_probe_attention)

    p = sub.add_parser("fft", help="power spectrum and dominant period of a feature series")
    p.add_argument("--series", required=True)
    p.add_argument("--out")
    p.add_argument("--alpha", type=float, default=analysis.NONE_ALPHA, help="false-alarm level for 'none'")
    p.set_defaults(func=cmd_fft)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, PlacementError, PGMError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
