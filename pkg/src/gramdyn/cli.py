"""Command-line interface: composable stages over frameset directories.

Exit codes: 0 success, 1 stage contract violation (error name + message
on stderr), 2 usage error. Set GRAMDYN_LOG=debug|info|warning for logs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .errors import GramdynError, ValidationError
from .frameset import PLY_MODES, export_ply, read_frameset
from .gramstats import WindowSpec
from .intervene import MODES as SUPPRESS_MODES
from .masking import DynamicMask
from .pipeline import PipelineConfig
from .refine import RefineConfig
from .saliency import SaliencyConfig, SaliencyMap
from .synth import default_fixture_spec, gen_scene, spec_from_json, spec_to_json
from .vg4t import read_blob


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="pipeline config JSON")
    p.add_argument("--threads", type=int, default=1, help="worker thread cap")


def _add_tuning(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-n", type=int, help="source frames per window side")
    p.add_argument("--window-stride", type=int, help="window frame step")
    p.add_argument("--layers-shallow", type=_int_list, help="shallow band layers")
    p.add_argument("--layers-middle", type=_int_list, help="middle band layers")
    p.add_argument("--layers-deep", type=_int_list, help="deep band mean layers")
    p.add_argument("--layers-deep-var", type=_int_list, help="deep band variance layers")
    p.add_argument("--kmeans-k", type=int, help="token cluster count")
    p.add_argument("--per-token", action="store_true", help="threshold tokens directly")
    p.add_argument("--lambda", dest="lam", type=float, help="photometric weight")
    p.add_argument("--tau", type=float, help="fixed refinement threshold")
    p.add_argument("--sor-k", type=int, help="SOR neighbor count")
    p.add_argument("--sor-sigma", type=float, help="SOR std-dev multiplier")
    p.add_argument("--pixel-stride", type=int, help="refinement cloud pixel stride")
    p.add_argument("--suppress-layers", type=_int_list, help="early-stage masking layers")
    p.add_argument("--mode", choices=SUPPRESS_MODES, help="key suppression mode")


def _build_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if getattr(args, "config", None) else PipelineConfig()
    window = cfg.window
    if getattr(args, "window_n", None) or getattr(args, "window_stride", None):
        window = WindowSpec(
            half_count=args.window_n or window.half_count,
            stride=args.window_stride or window.stride,
        )
        cfg.window = window
    sal = cfg.saliency
    updates = {}
    if getattr(args, "layers_shallow", None):
        updates["shallow_layers"] = args.layers_shallow
    if getattr(args, "layers_middle", None):
        updates["middle_layers"] = args.layers_middle
    if getattr(args, "layers_deep", None):
        updates["deep_mean_layers"] = args.layers_deep
    if getattr(args, "layers_deep_var", None):
        updates["deep_var_layers"] = args.layers_deep_var
    cfg.saliency = dataclasses.replace(sal, window=window, **updates)
    if getattr(args, "kmeans_k", None):
        cfg.kmeans_k = args.kmeans_k
    if getattr(args, "per_token", False):
        cfg.per_token = True
    ref = {}
    for src, dst in (("lam", "lam"), ("tau", "tau"), ("sor_k", "sor_k"),
                     ("sor_sigma", "sor_sigma"), ("pixel_stride", "pixel_stride")):
        val = getattr(args, src, None)
        if val is not None:
            ref[dst] = val
    if ref:
        cfg.refine = dataclasses.replace(cfg.refine, **ref)
    if getattr(args, "suppress_layers", None):
        cfg.suppress_layers = args.suppress_layers
    if getattr(args, "mode", None):
        cfg.suppress_mode = args.mode
    return cfg


def _load_saliency(mine_dir: Path) -> SaliencyMap:
    return SaliencyMap(
        dyn=read_blob(mine_dir / "dyn.vg4t").astype(np.float64),
        w_shallow=read_blob(mine_dir / "w_shallow.vg4t").astype(np.float64),
        w_middle=read_blob(mine_dir / "w_middle.vg4t").astype(np.float64),
        w_deep=read_blob(mine_dir / "w_deep.vg4t").astype(np.float64),
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gramdyn",
        description="Mine dynamic-object masks from multi-view attention statistics.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic scene into a frameset directory")
    p.add_argument("--config", type=Path, help="scene spec JSON (default: built-in fixture)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-spec", action="store_true", help="print the scene spec and exit")

    p = sub.add_parser("mine", help="gram statistics + saliency -> dyn blobs")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    _add_tuning(p)

    p = sub.add_parser("mask", help="threshold saliency into a patch mask")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--dyn", type=Path, required=True, help="directory holding dyn.vg4t")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0, help="k-means seed")
    _add_common(p)
    _add_tuning(p)

    p = sub.add_parser("refine", help="projection-gradient refinement -> pixel mask + PLY")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True, help="mask_patch.vg4t")
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    _add_tuning(p)

    p = sub.add_parser("suppress", help="build the early-stage key suppression blob")
    p.add_argument("--mask", type=Path, required=True, help="mask_patch.vg4t")
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    _add_tuning(p)

    p = sub.add_parser("eval", help="evaluate predictions against frameset ground truth")
    p.add_argument("what", choices=("seg", "pose", "recon"))
    p.add_argument("--in", dest="in_dir", type=Path, required=True, help="frameset with GT")
    p.add_argument("--masks", type=Path, help="seg: mask blob (patch or pixel)")
    p.add_argument("--est", type=Path, help="pose: frameset whose cameras are the estimate")
    p.add_argument("--points", type=Path, help="recon: prediction PLY or frameset dir")
    p.add_argument("--out", type=Path, help="write report JSON here")

    p = sub.add_parser("export-ply", help="unproject a frameset to a (filtered) PLY")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=PLY_MODES, default="merged")
    p.add_argument("--mask", type=Path, help="flag points from this mask blob")
    p.add_argument("--stride", type=int, default=1)

    p = sub.add_parser("pipeline", help="gen -> mine -> mask -> refine -> suppress -> eval")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--in", dest="in_dir", type=Path, help="existing frameset (skips gen)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--file-mediated", action="store_true",
                   help="re-read every intermediate from disk instead of memory")
    _add_common(p)
    _add_tuning(p)

    p = sub.add_parser("validate", help="read a frameset directory and report its shape")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    return ap


def _mask_from_blob(path: Path, fs) -> DynamicMask:
    values = read_blob(path).astype(bool)
    if values.ndim == 2:
        return DynamicMask(values=values, alpha=0.0, resolution="patch")
    return DynamicMask(values=values, alpha=0.0, resolution="pixel")


def _read_ply_positions(path: Path) -> np.ndarray:
    # minimal reader for the PLY layout export_ply writes
    with open(path, "rb") as fh:
        header = b""
        while not header.endswith(b"end_header\n"):
            chunk = fh.readline()
            if not chunk:
                raise ValidationError(f"{path}: truncated PLY header")
            header += chunk
        n = int([l for l in header.decode().splitlines() if l.startswith("element vertex")][0].split()[-1])
        data = np.frombuffer(fh.read(), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                               ("r", "u1"), ("g", "u1"), ("b", "u1"), ("d", "u1")],
                             count=n)
    return np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)


def _cmd_eval(args) -> dict:
    fs = read_frameset(args.in_dir)
    if args.what == "seg":
        if not args.masks:
            raise ValidationError("eval seg needs --masks")
        report = pl.evaluate_masks(fs, _mask_from_blob(args.masks, fs))
    elif args.what == "pose":
        est = read_frameset(args.est).cameras if args.est else None
        report = pl.evaluate_pose(fs, est)
    else:
        if not args.points:
            raise ValidationError("eval recon needs --points")
        if args.points.is_dir():
            pred = pl.frameset_cloud(read_frameset(args.points), stride=4)
        else:
            from .frameset import PointCloud

            pos = _read_ply_positions(args.points)
            pred = PointCloud(
                positions=pos,
                colors=np.zeros_like(pos),
                dynamic_flag=np.zeros(len(pos), bool),
                source=np.zeros((len(pos), 3), np.int64),
            )
        report = pl.evaluate_recon(fs, pred)
    text = json.dumps(report, indent=1)
    print(text)
    if args.out:
        args.out.write_text(text)
    return report


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("GRAMDYN_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "gen":
            spec = (
                spec_from_json(args.config.read_text())
                if args.config
                else default_fixture_spec(args.seed)
            )
            if args.config and args.seed is not None:
                spec = dataclasses.replace(spec, seed=args.seed)
            if args.dump_spec:
                print(spec_to_json(spec))
                return 0
            gen_scene(spec, args.out)
            print(f"wrote frameset: {args.out}")
        elif args.command == "mine":
            cfg = _build_config(args)
            fs = read_frameset(args.in_dir)
            pl.stage_mine(fs, cfg, args.out, threads=args.threads)
            print(f"wrote saliency blobs: {args.out}")
        elif args.command == "mask":
            cfg = _build_config(args)
            cfg.kmeans_seed = args.seed
            fs = read_frameset(args.in_dir)
            sal = _load_saliency(args.dyn)
            mask, _ = pl.stage_mask(fs, sal, cfg, args.out)
            print(f"wrote mask_patch.vg4t (alpha={mask.alpha:.4f}): {args.out}")
        elif args.command == "refine":
            cfg = _build_config(args)
            fs = read_frameset(args.in_dir)
            mask = pl.load_patch_mask(args.mask)
            pl.stage_refine(fs, mask, cfg, args.out, threads=args.threads)
            print(f"wrote mask_pixel.vg4t + points.ply: {args.out}")
        elif args.command == "suppress":
            cfg = _build_config(args)
            mask = pl.load_patch_mask(args.mask)
            ks = pl.stage_suppress(mask, cfg, args.out)
            print(f"wrote key_mask.vg4t (layers {list(ks.layers)}, {ks.mode}): {args.out}")
        elif args.command == "eval":
            _cmd_eval(args)
        elif args.command == "export-ply":
            fs = read_frameset(args.in_dir)
            mask = _mask_from_blob(args.mask, fs) if args.mask else None
            cloud = pl.frameset_cloud(fs, mask, stride=args.stride)
            export_ply(cloud, args.out, mode=args.mode)
            print(f"wrote {args.out}")
        elif args.command == "pipeline":
            cfg = _build_config(args)
            report = pl.run_pipeline(
                args.out, cfg, seed=args.seed, in_dir=args.in_dir,
                threads=args.threads, in_memory=not args.file_mediated,
            )
            print(pl._format_report_lines(report))
        elif args.command == "validate":
            fs = read_frameset(args.in_dir)
            H, W = fs.image_size
            print(
                f"valid frameset: F={fs.frame_count} size={H}x{W} P={fs.patch_size} "
                f"Np={fs.token_count} c={fs.channel_dim} layers={fs.layer_ids}"
            )
    except GramdynError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
