"""Command-line entry point: ``vidpred {synth,train,predict,eval}``.

Exit codes: 0 success, 2 usage/input error, 3 training divergence,
4 checkpoint/config mismatch.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .backbones import WeightsError, make_metric
from .config import resolve_config
from .data import (
    INPUT_LEN,
    DataError,
    SynthSpec,
    ingest,
    load_clip,
    preprocess,
    read_frame,
    split_windows,
    synth_dataset,
    write_dataset,
)
from .evaluator import clips_with_horizon, emit_reports, multi_step_eval
from .generator import ConfigError
from .imaging import save_frame, save_strip
from .trainer import (
    CheckpointError,
    ClipData,
    DivergenceError,
    checkpoint_load,
    checkpoint_save,
    load_generator,
    start_run,
    train,
    write_samples,
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CKPT = 0, 2, 3, 4

logger = logging.getLogger("vidpred")


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x80, got {text!r}")
    return h, w


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _echo(out: Path, name: str, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        SynthSpec(canvas=args.size, n_sprites=args.sprites, pan_velocity=min(args.pan), length=args.length)
        if max(args.pan) < 0 or args.sequences < 1:
            raise DataError("need at least one sequence and pan >= 0")
        seqs = synth_dataset(args.size, args.pan, args.sequences, args.length, args.seed, args.sprites)
    except DataError as exc:
        raise UsageError(str(exc))
    out = Path(args.out)
    write_dataset(seqs, out)
    _echo(out, "config.echo", {"command": "synth", "pan": list(args.pan), "sequences": args.sequences,
                               "length": args.length, "size": list(args.size), "sprites": args.sprites,
                               "seed": args.seed})
    h = hashlib.sha256()
    for s in seqs:
        h.update(np.ascontiguousarray(s.frames).tobytes())
    print(f"wrote {len(seqs)} sequences x {args.length} frames to {out} (sha256 {h.hexdigest()[:16]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _overrides(args) -> dict:
    ov: dict = {}
    if args.seed is not None:
        ov["seed"] = args.seed
    sched = {}
    if args.variant:
        sched["variant"] = args.variant
    if args.steps:
        if len(args.steps) != 3:
            raise UsageError("--steps takes three counts: phase1,phase2,phase3")
        sched.update(phase1_steps=args.steps[0], phase2_steps=args.steps[1], phase3_steps=args.steps[2],
                     epochs=None)
    if sched:
        ov["schedule"] = sched
    for flag, key in (("ckpt_every", "ckpt_every"), ("sample_every", "sample_every")):
        if getattr(args, flag) is not None:
            ov[key] = getattr(args, flag)
    return ov


def _train_data(cfg, data_dir) -> ClipData:
    hw = tuple(cfg.data.frame_hw)
    if data_dir is None:
        if not cfg.data.train_sequences:
            raise UsageError("no --data given and the preset defines no synthetic training set")
        seqs = synth_dataset(hw, cfg.data.pans, cfg.data.train_sequences, cfg.data.train_length, cfg.seed + 1000)
        return ClipData.from_clips([c for s in seqs for c in split_windows(s)])
    idx = ingest(data_dir, "train", temporal_factor=cfg.data.temporal_factor)
    if not idx.entries:
        raise UsageError(f"no 10-frame windows found under {data_dir}")
    return ClipData.from_clips([load_clip(idx, e, hw) for e in idx.entries])


def cmd_train(args) -> int:
    try:
        cfg = resolve_config(args.preset, args.config, _overrides(args))
    except (ValueError, TypeError, OSError) as exc:
        raise UsageError(f"bad configuration: {exc}")
    if args.data is not None and not Path(args.data).is_dir():
        raise UsageError(f"dataset path {args.data} does not exist")
    try:
        data = _train_data(cfg, args.data)
    except DataError as exc:
        raise UsageError(str(exc))
    o = cfg.optimizer
    cfg.schedule = cfg.schedule.resolved(len(data), o.batch_size, o.d_updates_per_g)
    out = Path(args.out)
    if args.resume:
        try:
            state = checkpoint_load(args.resume, cfg, run_dir=out)
        except CheckpointError as exc:
            logger.error("%s", exc)
            return EXIT_CKPT
    else:
        state = start_run(cfg, out)
    print(f"training {cfg.schedule.variant}: phases {cfg.schedule.phases()} "
          f"steps {[cfg.schedule.steps(p) for p in cfg.schedule.phases()]} on {len(data)} clips")
    try:
        train(state, data)
    except DivergenceError as exc:
        logger.error("%s", exc)
        return EXIT_DIVERGED
    final = checkpoint_save(state, out / "ckpt" / f"{state.global_step}.bin")
    write_samples(state, data, out / "samples" / str(state.global_step))
    print(f"final checkpoint {final}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def _load_model(path, config=None):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    if config is None:
        return load_generator(path)
    cfg = resolve_config("desk", config)
    state = checkpoint_load(path, cfg, with_optim=False)
    state.G.eval()
    return state.G, state.cfg


def cmd_predict(args) -> int:
    try:
        G, cfg = _load_model(args.checkpoint, args.config)
    except CheckpointError as exc:
        logger.error("%s", exc)
        return EXIT_CKPT
    clip_dir = Path(args.clip_dir)
    if not clip_dir.is_dir():
        raise UsageError(f"clip directory {clip_dir} does not exist")
    files = sorted(p for p in clip_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if len(files) < INPUT_LEN:
        raise UsageError(f"clip has {len(files)} frames; at least {INPUT_LEN} are needed")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    hw = tuple(cfg.generator.input_hw or cfg.data.frame_hw)
    try:
        frames = np.stack([preprocess(read_frame(p), hw) for p in files], axis=1)
    except DataError as exc:
        raise UsageError(str(exc))
    x = torch.from_numpy(frames[:, :INPUT_LEN])
    truth = frames[:, INPUT_LEN:INPUT_LEN + args.steps]
    with torch.no_grad():
        pred = G.rollout(x, args.steps, torch.Generator().manual_seed(args.seed)).numpy()
    out = Path(args.out)
    for k in range(args.steps):
        save_frame(out / f"pred_{k + 1:02d}.png", pred[:, k])
    rows = [[truth[:, k] for k in range(truth.shape[1])], [pred[:, k] for k in range(args.steps)]]
    save_strip(out / "strip.png", rows if truth.shape[1] else rows[1:])
    _echo(out, "config.echo", {"command": "predict", "checkpoint": str(args.checkpoint),
                               "clip_dir": str(clip_dir), "steps": args.steps, "seed": args.seed,
                               "model": cfg.to_dict()})
    print(f"wrote {args.steps} predicted frames and strip.png to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    if args.backbone == "pretrained" and (args.weights is None or args.lin_weights is None):
        raise UsageError("--backbone pretrained needs --weights and --lin-weights")
    try:
        metric = make_metric(args.backbone, args.weights, args.lin_weights)
    except WeightsError as exc:
        raise UsageError(str(exc))
    models = {}
    try:
        for path in args.checkpoint or []:
            G, cfg = _load_model(path, args.config)
            name = cfg.schedule.variant
            models[name if name not in models else f"{name}:{Path(path).stem}"] = (G, cfg)
    except CheckpointError as exc:
        logger.error("%s", exc)
        return EXIT_CKPT
    n_steps = args.multistep
    hw = args.size or next((tuple(c.generator.input_hw or c.data.frame_hw) for _, c in models.values()),
                           (128, 160))
    try:
        idx = ingest(args.data, "eval", window=1 + INPUT_LEN + n_steps, stride=args.stride,
                     temporal_factor=args.temporal_factor)
        clips = [load_clip(idx, e, hw, n_target=n_steps) for e in idx.entries]
    except DataError as exc:
        raise UsageError(str(exc))
    clips, _ = clips_with_horizon(clips, n_steps)
    if not clips:
        raise UsageError("no evaluation windows long enough for the requested horizon")
    data = ClipData.from_clips(clips)
    predictors = {}
    for name, (G, _) in models.items():
        def predict(x, n, G=G):
            return G.rollout(x, n, torch.Generator().manual_seed(args.seed))
        predictors[name] = predict
    records, table = multi_step_eval(predictors, data.inputs, data.targets, metric, n_steps=n_steps,
                                     sample_ids=data.ids, batch_size=args.batch_size)
    out = Path(args.out)
    emit_reports(records, table, out, plots=not args.no_plots)
    _echo(out, "config.echo", {"command": "eval", "checkpoints": [str(c) for c in args.checkpoint or []],
                               "data": str(args.data), "backbone": args.backbone, "multistep": n_steps,
                               "stride": args.stride, "size": list(hw), "seed": args.seed})
    print((out / "table1.txt").read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidpred", description="Hierarchical residual next-frame prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic panning dataset")
    s.add_argument("--pan", type=_int_list, default=(1, 2), help="pan velocity, or a comma list cycled over sequences")
    s.add_argument("--sequences", type=int, default=64)
    s.add_argument("--length", type=int, default=20)
    s.add_argument("--size", type=_size, default=(64, 80), help="HxW, both divisible by 16")
    s.add_argument("--sprites", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run the phase schedule for one variant")
    t.add_argument("--variant", choices=["GAN-VGG", "G-VGG", "GAN-MAE", "G-MAE"])
    t.add_argument("--preset", choices=["desk", "paper"], default="desk")
    t.add_argument("--config", help="JSON file layered over the preset")
    t.add_argument("--data", help="frame-directory dataset (default: the preset's synthetic set)")
    t.add_argument("--steps", type=_int_list, help="phase1,phase2,phase3 step counts")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--ckpt-every", type=int)
    t.add_argument("--sample-every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="recursive prediction from one clip directory")
    r.add_argument("checkpoint")
    r.add_argument("clip_dir")
    r.add_argument("n_steps", nargs="?", type=int)
    r.add_argument("--steps", type=int, default=None, help="same as the positional n_steps")
    r.add_argument("--config", help="expected model config; a shape mismatch exits with code 4")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="metrics and reports against a frame-directory dataset")
    e.add_argument("--checkpoint", action="append", help="repeat for several models")
    e.add_argument("--data", required=True)
    e.add_argument("--backbone", choices=["stub", "pretrained"], default="stub")
    e.add_argument("--weights", help="AlexNet weights for --backbone pretrained")
    e.add_argument("--lin-weights", help="per-channel metric weights for --backbone pretrained")
    e.add_argument("--multistep", type=int, default=1, help="recursive horizon")
    e.add_argument("--stride", type=int, default=None, help="window stride (default one per ten frames)")
    e.add_argument("--temporal-factor", type=int, default=1)
    e.add_argument("--size", type=_size, help="HxW (default: the model's input size)")
    e.add_argument("--config")
    e.add_argument("--batch-size", type=int, default=16)
    e.add_argument("--no-plots", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "predict":
        if args.steps is None:
            args.steps = args.n_steps if args.n_steps is not None else 1
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
