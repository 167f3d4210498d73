"""``hourglass`` command line: data synthesis, training, inversion, rendering and evaluation.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import config as C
from . import evaluation as ev
from .datasets import (make_synthetic_dataset, read_image, resize_bytes, to_numpy, to_tensor,
                       write_image, write_manifest)
from .exceptions import ConfigError, DataError, HourglassError, NumericalAbort
from .pipeline import load_dataset, make_extractor, stage_dir, train
from .training import fit_latent_baseline, finetune_image, l1_255

log = logging.getLogger("hourglass")

INVERT_FIELDS = ("id", "method", "azimuth", "elevation", "scale", "l1_255", "ssim", "seconds")


def _config(args) -> C.RunConfig:
    cfg = C.load(args.config) if getattr(args, "config", None) else C.desk_config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = str(args.out)
    return cfg


def _load_images(paths, resolution: int) -> torch.Tensor:
    images = []
    for p in paths:
        raw = read_image(p)
        if raw.shape[0] != raw.shape[1]:
            raise DataError(f"{p} is not square; preprocess it first")
        images.append(resize_bytes(raw, resolution))
    return to_tensor(np.stack(images))


def _networks(path):
    state, cfg, manifest = ckpt.load_checkpoint(path)
    for m in (state.decoder, state.encoder, state.discriminator):
        m.eval()
    return state, cfg, manifest


def _write_rows(path, rows, fields=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    ds = cfg.dataset
    splits = make_synthetic_dataset(args.n_objects or ds.n_objects, args.views or ds.views_per_object,
                                    ds.pose_range, cfg.seed, cfg.model.resolution)
    path = write_manifest(args.out, splits)
    print(f"wrote {sum(len(s) for s in splits.values())} images to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    C.save(cfg, out / "config.yaml")
    init_from = None
    if args.stage == 2 and args.resume is None:
        init_from = args.init_from or stage_dir(out, 1) / "last"
    try:
        state = train(cfg, args.stage, out_dir=out, resume=args.resume, init_from=init_from)
    except NumericalAbort as exc:
        if isinstance(exc.snapshot, dict):
            torch.save(exc.snapshot, out / "abort_snapshot.pt")
            exc.snapshot = str(out / "abort_snapshot.pt")
        raise
    print(f"stage {args.stage} finished at epoch {state.epoch}, step {state.step}; "
          f"checkpoint {stage_dir(out, args.stage) / 'last'}")
    return 0


def cmd_finetune(args) -> int:
    state, cfg, manifest = _networks(args.checkpoint)
    ckpt.require_stage(manifest, 2)
    ft = copy.deepcopy(cfg.finetune)
    if args.steps is not None:
        ft.steps = args.steps
    if args.lr is not None:
        ft.lr = args.lr
    target = _load_images([args.image], cfg.model.resolution)
    result = finetune_image(state.decoder, state.encoder, state.discriminator, target, ft,
                            make_extractor(cfg), cfg.weights_for(2))
    out = Path(args.out)
    state.decoder = result.decoder
    ckpt.save_checkpoint(out / "checkpoint", state, cfg,
                         {"initial_l1": result.initial_l1, "final_l1": result.final_l1})
    _write_rows(out / "trace.csv", [{"step": i, "loss": float(t), "l1_255": float(l)}
                                    for i, (t, l) in enumerate(zip(result.trace, result.l1_trace))])
    with torch.no_grad():
        final = result.decoder(result.z, result.pose)
    write_image(out / "reconstruction.png", to_numpy(final)[0])
    print(f"L1 {result.initial_l1:.3f} -> {result.final_l1:.3f} after {ft.steps} steps")
    return 0


def _invert_one(method, state, cfg, extractor, target, rng):
    if method == "encoder":
        with torch.no_grad():
            z, pose = state.encoder(target)
            return pose, state.decoder(z, pose)
    if method in ("fit", "encoder+fit"):
        init = "random" if method == "fit" else "encoder"
        res = fit_latent_baseline(state.decoder, target, cfg.fit, extractor, init=init,
                                  encoder=state.encoder, rng=rng)
        return res.pose, res.reconstruction
    res = finetune_image(state.decoder, state.encoder, state.discriminator, target, cfg.finetune,
                         extractor, cfg.weights_for(2))
    with torch.no_grad():
        return res.pose, res.decoder(res.z, res.pose)


def cmd_invert(args) -> int:
    state, cfg, manifest = _networks(args.checkpoint)
    if args.method == "finetune":
        ckpt.require_stage(manifest, 2)
    if args.steps is not None:
        cfg.fit.steps = args.steps
        cfg.finetune.steps = args.steps
    images = _load_images(args.images, cfg.model.resolution)
    extractor = make_extractor(cfg)
    rng = torch.Generator().manual_seed(cfg.seed)
    out = Path(args.out)
    rows, seconds = [], []
    for i, path in enumerate(args.images):
        target = images[i:i + 1]
        (pose, recon), dt = ev.timed(_invert_one, args.method, state, cfg, extractor, target, rng)
        seconds.append(dt)
        write_image(out / f"{Path(path).stem}_{args.method}.png", to_numpy(recon)[0])
        rows.append({"id": Path(path).stem, "method": args.method,
                     "azimuth": float(pose[0, 0]), "elevation": float(pose[0, 1]), "scale": float(pose[0, 2]),
                     "l1_255": float(l1_255(target, recon)[0]), "ssim": float(ev.metric_ssim(recon, target)[0]),
                     "seconds": dt})
    _write_rows(out / "inversion.csv", rows, INVERT_FIELDS)
    mean, std = ev.timing_stats(seconds)
    l1 = float(np.mean([r["l1_255"] for r in rows]))
    print(f"{args.method}: L1 {l1:.2f}  time {mean:.3f}s ± {std:.3f} over {len(rows)} images")
    return 0


def cmd_render(args) -> int:
    state, cfg, _ = _networks(args.checkpoint)
    if args.views < 1:
        raise ConfigError("--views must be at least 1")
    image = _load_images([args.image], cfg.model.resolution)
    strip = ev.theta_interpolation_strip(state.decoder, state.encoder, image[0], args.views)
    write_image(args.out, strip)
    print(f"wrote {args.views + 1} tiles to {args.out}")
    return 0


def cmd_eval(args) -> int:
    state, cfg, _ = _networks(args.checkpoint)
    if args.data:
        cfg.dataset.path = str(args.data)
    splits = load_dataset(cfg)
    if args.split not in splits:
        raise DataError(f"split {args.split!r} not available (have {sorted(splits)})")
    split = splits[args.split]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.task in ("nvs", "pose"):
        labelled = [splits[n] for n in ("train", "val") if n in splits]
        frame = ev.fit_frame_on_splits(state.encoder, labelled, cfg.dataset.pose_range)
        (out / "frame.json").write_text(json.dumps(frame.r2, indent=2))
        if args.task == "nvs":
            report = ev.eval_nvs(state.decoder, state.encoder, split, frame, args.max_pairs)
        else:
            report = ev.eval_pose(state.encoder, split, frame)
    elif args.task == "recon":
        report = ev.eval_reconstruction(state.decoder, state.encoder, split.tensors(), split.ids)
    else:
        n = min(args.grid, len(split))
        imgs = split.tensors()
        pick = np.linspace(0, len(split) - 1, n).round().astype(int)
        grid = ev.pose_swap_grid(state.decoder, state.encoder, imgs[pick], imgs[pick[::-1].copy()])
        write_image(out / "pose_swap.png", grid)
        report = ev.eval_reconstruction(state.decoder, state.encoder, imgs[pick], [split.ids[i] for i in pick])
    report.write_csv(out / f"{args.task}_{args.split}.csv")
    report.write_summary(out / f"{args.task}_{args.split}_summary.json")
    print(report.format())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hourglass", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render the synthetic cuboid corpus to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-objects", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="run stage 1 or stage 2")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config")
    p.add_argument("--resume", help="checkpoint directory to resume the same stage from")
    p.add_argument("--init-from", help="stage-1 checkpoint for stage 2 (default: <out>/stage1/last)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="adapt a stage-2 checkpoint to one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("invert", help="recover (z, pose) for images")
    p.add_argument("--method", choices=("encoder", "fit", "encoder+fit", "finetune"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("render", help="azimuth sweep strip for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--views", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluation protocols")
    p.add_argument("--task", choices=("nvs", "pose", "recon", "swap"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--data", help="dataset manifest (default: from the checkpoint config)")
    p.add_argument("--max-pairs", type=int, help="cap on view pairs per object (nvs)")
    p.add_argument("--grid", type=int, default=6, help="rows/columns of the pose-swap grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HourglassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3 if isinstance(exc, FileNotFoundError) else 2


if __name__ == "__main__":
    sys.exit(main())
