"""Command-line entry point: ``evfi <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from evfi import fileio
from evfi.config import ConfigError, RunConfig, load_config
from evfi.data import middle_batch
from evfi.events import EventStream, simulate_sequence, voxelize
from evfi.metrics import psnr

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm")

log = logging.getLogger("evfi")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class OutDir:
    """Every file a subcommand writes goes through here, confined to one directory."""

    def __init__(self, root):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def __call__(self, name: str) -> Path:
        path = (self.root / name).resolve()
        if path != self.root and self.root not in path.parents:
            raise UsageError(f"refusing to write {path} outside --out {self.root}")
        return path


def _comma_ints(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(_existing(args.config)) if getattr(args, "config", None) else RunConfig()
    return cfg.with_env()


def _frame_files(directory: Path) -> list[Path]:
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if len(files) < 2:
        raise DataError(f"{directory} holds fewer than two PPM/PGM frames")
    return files


def _load_models(cfg: RunConfig, flow_path, synth_path):
    from evfi.training import build_flow_net, build_synth_net

    flow_net, synth_net = build_flow_net(cfg), build_synth_net(cfg)
    flow_net.load_state_dict(fileio.load_checkpoint(_existing(flow_path)))
    synth_net.load_state_dict(fileio.load_checkpoint(_existing(synth_path)))
    return flow_net, synth_net


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    files = _frame_files(_existing(args.frames))
    frames = [fileio.read_image(f) for f in files]
    if len({f.shape for f in frames}) != 1:
        raise DataError("frames differ in geometry")
    times = [args.t_start + i * args.dt_us for i in range(len(frames))]
    stream = simulate_sequence(frames, times, args.threshold)
    out = OutDir(args.out)
    fileio.write_events(out("events.evt"), stream)
    if args.csv:
        fileio.write_events_csv(out("events.csv"), stream)
    print(f"{len(stream)} events from {len(frames)} frames -> {out('events.evt')}")
    return EXIT_OK


def cmd_voxelize(args) -> int:
    stream = fileio.read_events(_existing(args.events))
    t0 = stream.t_start if args.t0 is None else args.t0
    t1 = stream.t_end if args.t1 is None else args.t1
    inside = (stream.t >= t0) & (stream.t <= t1)
    grid = voxelize(stream.select(inside, t0, t1), t0, t1, args.bins)
    out = OutDir(args.out)
    np.save(out("voxels.npy"), grid)
    print(f"voxel grid {grid.shape}, |sum| {np.abs(grid).sum():.3f} -> {out('voxels.npy')}")
    return EXIT_OK


def cmd_train(args) -> int:
    from evfi import training

    cfg = replace(_config(args), stage=args.stage)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    out = OutDir(args.out)
    train_set, test_set = training.make_datasets(cfg)
    out("run.cfg").write_text(cfg.serialize(), encoding="utf-8")
    if cfg.stage == 1:
        net, result = training.train_stage_one(cfg, train_set)
        digest = fileio.save_checkpoint(out("flow.ckpt"), net.state_dict())
        training.write_loss_curve(out("loss_stage1.csv"), result.losses)
        print(f"stage 1: {cfg.steps} steps, final loss {result.losses[-1]:.6f}, "
              f"held-out EPE {training.held_out_epe(net, test_set):.3f} px")
        print(f"flow checkpoint sha256 {digest}")
        return EXIT_OK
    flow_path = args.flow_checkpoint or cfg.flow_checkpoint
    if not flow_path:
        raise UsageError("stage 2 needs --flow-checkpoint (or flow_checkpoint in the config)")
    flow_net = training.build_flow_net(cfg)
    flow_net.load_state_dict(fileio.load_checkpoint(_existing(flow_path)))
    synth_net, result = training.train_stage_two(cfg, train_set, flow_net)
    fileio.save_checkpoint(out("synth.ckpt"), synth_net.state_dict())
    training.write_loss_curve(out("loss_stage2.csv"), result.losses)
    batch = middle_batch(test_set, cfg.bins)
    pred = np.clip(training.synthesize(flow_net, synth_net, batch)[-1], 0, 1)
    score = float(np.mean([psnr(p, g) for p, g in zip(pred, batch.gt)]))
    print(f"stage 2: {cfg.steps} steps, final loss {result.losses[-1]:.6f}, held-out PSNR {score:.2f} dB")
    print(f"flow digest unchanged: {result.digest_before}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    from evfi.training import interpolate

    cfg = _config(args)
    i0 = fileio.read_image(_existing(args.frame0))
    i1 = fileio.read_image(_existing(args.frame1))
    if i0.shape != i1.shape:
        raise DataError(f"key frames differ in shape: {i0.shape} vs {i1.shape}")
    if args.events:
        stream = fileio.read_events(_existing(args.events))
    else:
        stream = EventStream.empty(i0.shape[2], i0.shape[1], 0, cfg.substeps * 10_000)
    if (stream.height, stream.width) != i0.shape[1:]:
        raise DataError(f"event geometry {stream.width}x{stream.height} differs from frames {i0.shape[2]}x{i0.shape[1]}")
    flow_net, synth_net = _load_models(cfg, args.flow_checkpoint, args.synth_checkpoint)
    frames = interpolate(flow_net, synth_net, i0, i1, stream, stream.t_start, stream.t_end, args.t)
    out = OutDir(args.out)
    for s, frame in enumerate(frames):
        fileio.write_image(out(f"interp_s{s}.{'ppm' if frame.shape[0] == 3 else 'pgm'}"), frame)
    print(f"wrote {len(frames)} scales to {out.root}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from evfi import training
    from evfi.data import ToySequence, make_toy_dataset

    cfg = _config(args)
    flow_net, synth_net = _load_models(cfg, args.flow_checkpoint, args.synth_checkpoint)
    if args.frames:
        files = _frame_files(_existing(args.frames))
        frames = [fileio.read_image(f) for f in files]
        stream = fileio.read_events(_existing(args.events)) if args.events else None
        if stream is None:
            raise UsageError("--frames needs --events")
        times = np.linspace(stream.t_start, stream.t_end, len(frames)).round().astype(np.int64).tolist()
        sequences = [ToySequence(frames, times, stream, 1, None, "files")]
    else:
        longest = max(args.skips) + 1
        intervals = -(-longest // cfg.substeps)
        sequences = make_toy_dataset(cfg.kind, cfg.n_test, cfg.size, cfg.seed + training.TEST_SEED_OFFSET,
                                     speed=cfg.speed, substeps=cfg.substeps, intervals=intervals,
                                     contrast_threshold=cfg.contrast_threshold)
    rows = training.skip_eval(sequences, args.skips, args.mode, flow_net, synth_net)
    out = OutDir(args.out)
    training.write_metrics_csv(out("metrics.csv"), rows)
    table = training.format_metrics(rows)
    out("metrics.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from evfi.gradsuite import format_report, run_suite

    results = run_suite(seed=args.seed, max_coords=args.max_coords)
    report = format_report(results)
    print(report)
    if args.out:
        OutDir(args.out)("gradcheck.txt").write_text(report + "\n", encoding="utf-8")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_selftest(args) -> int:
    from evfi.selftest import run_selftest

    results = run_selftest(seed=args.seed)
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{name:<{width}}  {'ok' if ok else 'FAIL'}  {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_NUMERIC


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evfi", description="Event + frame video interpolation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("simulate", help="frames -> EVT1 event stream")
    p.add_argument("--frames", required=True, help="directory of PPM/PGM frames, sorted by name")
    p.add_argument("--dt-us", type=int, default=10_000, help="microseconds between frames")
    p.add_argument("--t-start", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.2, help="log-intensity contrast threshold")
    p.add_argument("--csv", action="store_true", help="also write events.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("voxelize", help="events -> voxel grid (.npy)")
    p.add_argument("--events", required=True)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--t0", type=int)
    p.add_argument("--t1", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train", help="train stage 1 (flow) or stage 2 (synthesis) on toy data")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--flow-checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("interpolate", help="two frames + events -> predicted frames at every scale")
    p.add_argument("--frame0", required=True)
    p.add_argument("--frame1", required=True)
    p.add_argument("--events", help="EVT1 or CSV spanning the two key frames")
    p.add_argument("--t", type=float, default=0.5, help="normalized time in (0, 1)")
    p.add_argument("--config")
    p.add_argument("--flow-checkpoint", required=True)
    p.add_argument("--synth-checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="frame-skip PSNR / SSIM table")
    p.add_argument("--skips", type=_comma_ints, required=True)
    p.add_argument("--mode", choices=("middle", "whole"), default="middle")
    p.add_argument("--config")
    p.add_argument("--frames", help="directory of frames (default: held-out toy sequences)")
    p.add_argument("--events")
    p.add_argument("--flow-checkpoint", required=True)
    p.add_argument("--synth-checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=24)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="quick property suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    from evfi.training import FreezeViolation, NonFiniteLoss

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "interpolate" and not 0.0 < args.t < 1.0:
        print(f"evfi interpolate: error: --t must lie strictly inside (0, 1), got {args.t}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"evfi {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, FreezeViolation, FloatingPointError) as exc:
        print(f"evfi {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"evfi {args.command}: error: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ConfigError, fileio.FormatError, ValueError, KeyError) as exc:
        print(f"evfi {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
