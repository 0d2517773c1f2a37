"""Command-line surface: synthesize data, split it, train, evaluate, predict.

Every subcommand exits 0 on success; failures print a machine-readable
JSON error record to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, synth
from .model import DiffUNet, NetworkConfig, load_checkpoint
from .train import SampleDataset, TrainConfig, fit_phase

logger = logging.getLogger(__name__)


def _parse_pair(text: str, cast=float) -> tuple:
    parts = [cast(p) for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'lo,hi', got {text!r}")
    return tuple(parts)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_bank(args) -> int:
    manifests = data.load_manifest(args.dataset)
    pairs = []
    for m in manifests:
        if not m.has_masks:
            continue
        n = min(args.frames_per_clip, m.num_frames)
        for idx in np.linspace(0, m.num_frames - 1, n).astype(int):
            pairs.append((data.load_frame(m.frame_paths[idx]),
                          data.load_mask(m.mask_paths[idx])))
    if not pairs:
        raise ValueError("no annotated frames found in dataset")
    bank = synth.build_bank(pairs, seed=args.seed)
    bank.save(args.out)
    print(json.dumps({"real": len(bank.real), "fake": len(bank.fake),
                      "out": str(args.out)}))
    return 0


def cmd_synth(args) -> int:
    backgrounds = data.load_manifest(args.backgrounds)
    bank = synth.CutoutBank.load(args.bank)
    overrides = {"clip_length": args.clip_length}
    if args.n_real:
        overrides["n_real"] = _parse_pair(args.n_real, int)
    if args.n_fake:
        overrides["n_fake"] = _parse_pair(args.n_fake, int)
    if args.speed:
        overrides["speed"] = _parse_pair(args.speed, float)
    cfg = synth.SynthConfig.default_for_canvas(args.canvas, **overrides)

    out = Path(args.out)
    usable = [m for m in backgrounds if m.num_frames >= cfg.clip_length]
    if not usable:
        raise ValueError(f"no background clip has >= {cfg.clip_length} frames")
    manifests = []
    for i in range(args.n_clips):
        rng = np.random.default_rng((args.seed, i))
        bg = usable[int(rng.integers(len(usable)))]
        window = synth.extract_background_windows(bg, cfg.clip_length, cfg.canvas, 1, rng)[0]
        clip = synth.synthesize_clip(window, bank, cfg, rng, out, f"synth_{i:04d}",
                                     source_group=bg.source_group or bg.clip_id)
        manifests.append(clip)
        logger.info("synthesized clip %d/%d", i + 1, args.n_clips)
    data.save_manifest(out / "manifest.json", manifests)
    print(json.dumps({"clips": len(manifests), "manifest": str(out / "manifest.json")}))
    return 0


def cmd_split(args) -> int:
    manifests = data.load_manifest(args.manifest)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    train_m, valid_m, test_m = data.group_split(manifests, fractions, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, part in (("train", train_m), ("valid", valid_m), ("test", test_m)):
        data.save_manifest(out / f"{name}.json", part)
        counts[name] = len(part)
    print(json.dumps({"out": str(out), **counts}))
    return 0


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    with open(cfg_path) as fh:
        raw = json.load(fh)
    base = cfg_path.parent
    net = NetworkConfig(**raw.get("network", {}))
    dcfg = raw["data"]
    out_dir = Path(args.out) if args.out else _resolve(base, dcfg["out_dir"])
    stride = int(dcfg.get("stride", 1))
    preload = bool(dcfg.get("preload", False))

    val_ds = SampleDataset(data.load_manifest(_resolve(base, dcfg["val_manifest"])),
                           net.tau, stride=stride, preload=preload)
    if args.phase == 1:
        tcfg = TrainConfig(**raw.get("train_phase1", {}))
        if tcfg.phase != "synthetic":
            raise ValueError("phase 1 config must have phase='synthetic'")
        train_ds = SampleDataset(
            data.load_manifest(_resolve(base, dcfg["synthetic_manifest"])),
            net.tau, stride=stride, preload=preload)
        model = DiffUNet(net)
    else:
        tcfg = TrainConfig(**raw.get("train_phase2", {}))
        if tcfg.phase != "weak" or tcfg.weight_decay != 0.0:
            raise ValueError("phase 2 config must have phase='weak' and weight_decay=0")
        train_ds = SampleDataset(
            data.load_manifest(_resolve(base, dcfg["weak_manifest"])),
            net.tau, stride=stride, preload=preload)
        init = Path(args.init) if args.init else out_dir / "phase1_best.ckpt"
        model, _ = load_checkpoint(init)
        if model.config != net:
            raise ValueError("checkpoint network config differs from the config file")
    best = fit_phase(model, train_ds, val_ds, tcfg, out_dir, phase_num=args.phase)
    print(json.dumps({"best_checkpoint": str(best)}))
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    manifests = data.load_manifest(args.dataset)
    ds = SampleDataset(manifests, model.config.tau, stride=args.stride)
    records = metrics.eval_samples(model, ds, eval_crop=args.eval_crop,
                                   threshold=args.threshold)
    reports = [metrics.make_report(records, "dataset", args.threshold, args.skip_empty)]
    if args.per_video:
        reports.append(metrics.make_report(records, "per_video", args.threshold,
                                           args.skip_empty))
    for rep in reports:
        print(rep.format_table())
        print()
    if args.out:
        payload = [rep.to_dict() for rep in reports]
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
    return 0


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    sample_dir = Path(args.sample)
    frame_paths = sorted((sample_dir / "frames").glob("*.png"))
    if not frame_paths:
        raise ValueError(f"no frames under {sample_dir / 'frames'}")
    mask_dir = sample_dir / "masks"
    mask_paths = sorted(mask_dir.glob("*.png")) if mask_dir.is_dir() else []
    clip = data.ClipManifest(
        clip_id=sample_dir.name,
        frame_paths=[str(p) for p in frame_paths],
        mask_paths=[str(p) for p in mask_paths],
        label_kind="manual" if mask_paths else "none",
    )
    t = args.query_index if args.query_index >= 0 else clip.num_frames - 1
    sample = data.load_sample(clip, t, model.config.tau)
    paths = metrics.predict_and_overlay(model, sample, args.out,
                                        threshold=args.threshold,
                                        eval_crop=args.eval_crop)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densevos",
        description="Synthesize dense-object clips and train/evaluate the segmenter.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bank", help="build a cutout bank from annotated clips")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames-per-clip", type=int, default=1)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("synth", help="synthesize annotated clips onto backgrounds")
    p.add_argument("--backgrounds", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int, required=True)
    p.add_argument("--canvas", type=int, default=1024)
    p.add_argument("--clip-length", type=int, default=60)
    p.add_argument("--n-real", default="")
    p.add_argument("--n-fake", default="")
    p.add_argument("--speed", default="")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="group-wise train/valid/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.5,0.25,0.25")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one phase from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", default="")
    p.add_argument("--init", default="", help="phase-2 starting checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--per-video", action="store_true")
    p.add_argument("--eval-crop", type=int, default=512)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--skip-empty", action="store_true")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="emit mask/recon/overlay for one clip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="clip directory with frames/")
    p.add_argument("--out", required=True)
    p.add_argument("--query-index", type=int, default=-1)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--eval-crop", type=int, default=512)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except Exception as exc:  # error record contract: JSON on stderr, exit 1
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
