"""Command-line entry point: synth | train | track | eval | gradcheck | bench.

Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric failure.
`--threads N` (or env XIC_THREADS) caps BLAS worker threads; N=1 guarantees
bit-determinism, so it is applied before numerical modules are imported.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_threads(n: int | None) -> None:
    if n is None:
        n = int(os.environ.get("XIC_THREADS", 0)) or None
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xictrack",
                                 description="Self-supervised RGB-T tracking toolkit")
    ap.add_argument("--threads", type=int, default=None,
                    help="cap BLAS threads (XIC_THREADS as fallback)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGB-T dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="self-supervised training")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset root of sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default=None,
                   choices=["xic2", "xic3", "three-branch", "cycle2", "cycle3"])
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("track", help="run the RGB-T tracker over sequences")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="sequence dir or dataset root")
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="x,y,w,h override for frame 1")

    p = sub.add_parser("eval", help="score trajectories against ground truth")
    p.add_argument("--pred", required=True, help="directory of <sequence>.txt files")
    p.add_argument("--data", required=True, help="dataset root with ground truth")
    p.add_argument("--threshold", type=float, default=5.0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--coords", type=int, default=None,
                   help="sample this many coordinates per tensor (default: all)")

    p = sub.add_parser("bench", help="tracker throughput on synthetic frames")
    p.add_argument("--config", default=None)
    p.add_argument("--frames", type=int, default=50)
    return ap


def _echo_config(cfg, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_used.txt"), "w") as fh:
        fh.write(cfg.dump())


def cmd_synth(args) -> int:
    from .config import load_config
    from .data import SynthConfig, synth_generate

    cfg = load_config(args.config)
    base = dict(canvas=cfg.synth_canvas, velocity=cfg.synth_velocity,
                noise_level=cfg.synth_noise)
    train_cfg = SynthConfig(frames=cfg.synth_train_frames, seed=cfg.seed, **base)
    test_cfg = SynthConfig(frames=cfg.synth_test_frames, seed=cfg.seed + 777, **base)
    train_dirs = synth_generate(train_cfg, os.path.join(args.out, "train"),
                                cfg.synth_train_sequences, prefix="train")
    test_dirs = synth_generate(test_cfg, os.path.join(args.out, "test"),
                               cfg.synth_test_sequences, prefix="test")
    _echo_config(cfg, args.out)
    print(f"wrote {len(train_dirs)} train + {len(test_dirs)} test sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .config import load_config
    from .data import load_training_pairs
    from .features import load_params
    from .selfsup import train

    cfg = load_config(args.config)
    if args.variant:
        cfg.variant = args.variant
        cfg.validate()
    model_cfg = cfg.model_config()
    schedule = cfg.schedule()
    pairs = load_training_pairs(args.data, cfg.crop_ratio, cfg.patch_size,
                                cfg.stride, model_cfg.sequence_length)
    if not pairs:
        print("no training pairs found", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)
    params = None
    start_epoch = 0
    if args.resume:
        latest = os.path.join(args.out, "checkpoint_latest.bin")
        if os.path.exists(latest):
            params, meta = load_params(latest)
            start_epoch = int(meta.get("epoch", -1)) + 1
            print(f"resuming from epoch {start_epoch}")
    print(f"training {cfg.variant} on {len(pairs)} pairs, "
          f"{schedule.epochs} epochs, batch {schedule.batch_size}")
    _, log = train(pairs, model_cfg, schedule, out_dir=args.out, params=params,
                   start_epoch=start_epoch,
                   log_path=os.path.join(args.out, "training_log.jsonl"))
    epoch_means = [e["mean_loss"] for e in log if "mean_loss" in e]
    if epoch_means:
        print(f"epoch losses: first={epoch_means[0]:.6g} last={epoch_means[-1]:.6g}")
    return 0


def _parse_init(text: str):
    from .data import BoundingBox
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise ValueError("--init expects x,y,w,h")
    return BoundingBox(*parts)


def cmd_track(args) -> int:
    import json

    from .config import load_config
    from .data import list_sequences, load_sequence
    from .features import load_params
    from .tracker import run_sequence

    cfg = load_config(args.config)
    if not os.path.exists(args.checkpoint):
        print(f"checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 1
    params, meta = load_params(args.checkpoint)
    model_cfg = cfg.model_config()
    if "feature_channels" in meta:
        model_cfg.feature_channels = int(meta["feature_channels"])
    model_cfg.share_weights = "thermal" not in params
    init_box = _parse_init(args.init) if args.init else None

    seq_dirs = [args.data] if os.path.isdir(os.path.join(args.data, "visible")) \
        else list_sequences(args.data)
    if not seq_dirs:
        print(f"no sequences under {args.data}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)
    all_fps = []
    for d in seq_dirs:
        seq = load_sequence(d)
        boxes, stats = run_sequence(seq, init_box, params, model_cfg,
                                    cfg.tracker_config())
        with open(os.path.join(args.out, f"{seq.name}.txt"), "w") as fh:
            for b in boxes:
                fh.write(f"{b.x:.2f},{b.y:.2f},{b.w:.2f},{b.h:.2f}\n")
        with open(os.path.join(args.out, f"{seq.name}_timing.json"), "w") as fh:
            json.dump(stats, fh)
        all_fps.append(stats["fps"])
        print(f"{seq.name}: {stats['frames']} frames at {stats['fps']:.1f} FPS")
    print(f"mean FPS (excluding I/O): {sum(all_fps) / len(all_fps):.1f}")
    return 0


def cmd_eval(args) -> int:
    from .data import list_sequences, load_sequence, parse_groundtruth
    from .evalkit import EvalRecord, attribute_report, emit_report, mpr_msr

    seq_dirs = list_sequences(args.data)
    records = []
    missing = []
    for d in seq_dirs:
        seq = load_sequence(d)
        pred_path = os.path.join(args.pred, f"{seq.name}.txt")
        if not os.path.exists(pred_path):
            missing.append(seq.name)
            continue
        preds = parse_groundtruth(pred_path)
        records.append(EvalRecord(seq.name, preds,
                                  {"visible": seq.ground_truth.get("visible", []),
                                   "infrared": seq.ground_truth.get("infrared", [])},
                                  seq.attributes))
    if missing:
        print("missing predictions for: " + ", ".join(missing), file=sys.stderr)
        return 1
    if not records:
        print("no sequences to evaluate", file=sys.stderr)
        return 1
    report = mpr_msr(records, args.threshold)
    if any(rec.attributes for rec in records):
        report.attribute_msr = attribute_report(records, args.threshold)
    print(f"MPR@{args.threshold:g}px = {report.mpr:.4f}  MSR = {report.msr:.4f}  "
          f"mean center error = {report.mean_center_error:.2f} px")
    for tag, v in sorted(report.attribute_msr.items()):
        print(f"  {tag}: MSR = {v:.4f}")
    if args.out:
        emit_report(report, args.out)
        print(f"report written to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_all

    results = run_all(args.size, args.channels, args.batch, args.coords)
    ok = True
    for stage, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{stage:12s} max relative error {err:.3e}  [{status}]")
        ok = ok and err < TOLERANCE
    return 0 if ok else 2


def cmd_bench(args) -> int:
    import time

    import numpy as np

    from .config import load_config
    from .data import BoundingBox, SynthConfig, synth_sequence
    from .selfsup import build_params
    from .tracker import init, track_frame

    cfg = load_config(args.config)
    model_cfg = cfg.model_config()
    params = build_params(model_cfg, cfg.seed)
    rgb_frames, t_frames, boxes = synth_sequence(
        SynthConfig(frames=args.frames, canvas=cfg.synth_canvas, seed=cfg.seed),
        "bench", 1234)
    frames = [(r.transpose(2, 0, 1).astype(np.float64) / 255.0, t[None].astype(np.float64) / 255.0)
              for r, t in zip(rgb_frames, t_frames)]
    state = init(frames[0][0], frames[0][1], boxes[0], params, model_cfg,
                 cfg.tracker_config())
    t0 = time.perf_counter()
    for rgb, tir in frames[1:]:
        _, state = track_frame(state, rgb, tir)
    dt = time.perf_counter() - t0
    print(f"{len(frames) - 1} frames in {dt:.2f}s -> {(len(frames) - 1) / dt:.1f} FPS "
          f"(patch {model_cfg.patch_size}, {model_cfg.feature_channels} channels)")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    _apply_threads(args.threads)
    from .errors import InvalidConfigError, InvalidInputError, XicError

    try:
        return _COMMANDS[args.command](args)
    except (InvalidConfigError, InvalidInputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except XicError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
