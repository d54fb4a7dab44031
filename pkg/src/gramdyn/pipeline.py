"""File-mediated pipeline stages and the end-to-end driver.

Every stage reads and writes VG4T blobs inside an output directory, so
any intermediate can be inspected, replaced, or re-run in isolation.
``run_pipeline`` chains gen -> mine -> mask -> refine -> suppress ->
eval and writes a JSON + plain-text report. An in-memory mode skips the
intermediate re-reads; its outputs are verified byte-identical to the
file-mediated path in the test suite.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .frameset import FrameSet, export_ply, read_frameset
from .geometry import unproject
from .gramstats import WindowSpec
from .intervene import build_key_suppression, save_key_suppression
from .masking import (
    ClusterAssignment,
    DynamicMask,
    binarize,
    binarize_per_token,
    kmeans_tokens,
    patch_to_pixel,
)
from .metrics import Trajectory, recon_metrics, seg_report, traj_metrics
from .refine import RefineConfig, refine_scene
from .saliency import SaliencyConfig, SaliencyMap, collect_stats, compute_band, compute_dyn
from .synth import SceneSpec, default_fixture_spec, gen_scene, spec_from_json
from .vg4t import read_blob, write_blob

log = logging.getLogger("gramdyn")


@dataclass
class PipelineConfig:
    """Every stage's knobs in one place, defaults as published."""

    window: WindowSpec = field(default_factory=WindowSpec)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    kmeans_k: int = 8
    kmeans_seed: int = 0
    per_token: bool = False
    refine: RefineConfig = field(default_factory=RefineConfig)
    suppress_layers: tuple[int, ...] = (1, 2, 3, 4, 5)
    suppress_mode: str = "neg-inf-bias"
    scene: SceneSpec | None = None

    def validate_against(self, fs: FrameSet) -> None:
        self.saliency.validate_against(fs)
        self.refine.validate()
        if self.kmeans_k < 2:
            raise ValidationError("kmeans k must be >= 2")

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        d = json.loads(Path(path).read_text())
        cfg = cls()
        if "window" in d:
            cfg.window = WindowSpec(**d["window"])
        if "saliency" in d:
            s = {k: tuple(v) if isinstance(v, list) else v for k, v in d["saliency"].items()}
            cfg.saliency = SaliencyConfig(**s, window=cfg.window)
        else:
            cfg.saliency = SaliencyConfig(window=cfg.window)
        for key in ("kmeans_k", "kmeans_seed", "per_token"):
            if key in d:
                setattr(cfg, key, d[key])
        if "refine" in d:
            cfg.refine = RefineConfig(**d["refine"])
        if "suppress_layers" in d:
            cfg.suppress_layers = tuple(d["suppress_layers"])
        if "suppress_mode" in d:
            cfg.suppress_mode = d["suppress_mode"]
        if "scene" in d:
            cfg.scene = spec_from_json(json.dumps(d["scene"]))
        return cfg

    def to_file(self, path: str | Path) -> None:
        d = dataclasses.asdict(self)
        Path(path).write_text(json.dumps(d, indent=1, default=str))


def stage_gen(cfg: PipelineConfig, seed: int, out_dir: Path) -> FrameSet:
    spec = cfg.scene if cfg.scene is not None else default_fixture_spec(seed)
    if cfg.scene is not None and seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    log.info("rendering %d-frame synthetic scene (seed %d)", spec.frame_count, spec.seed)
    return gen_scene(spec, out_dir)


def stage_mine(fs: FrameSet, cfg: PipelineConfig, out_dir: Path, threads: int = 1) -> SaliencyMap:
    """Gram statistics + saliency; writes dyn, band, and stat blobs."""
    cfg.validate_against(fs)
    stats = collect_stats(fs, cfg.saliency, threads=threads)
    out_dir.mkdir(parents=True, exist_ok=True)
    for (kind, layers), maps in stats.items():
        tag = f"{kind}_{min(layers)}-{max(layers)}"
        write_blob(out_dir / f"S_{tag}.vg4t", maps.S.astype(np.float32))
        write_blob(out_dir / f"V_{tag}.vg4t", maps.V.astype(np.float32))
    sal = compute_dyn(
        compute_band("shallow", stats, cfg.saliency),
        compute_band("middle", stats, cfg.saliency),
        compute_band("deep", stats, cfg.saliency),
    )
    write_blob(out_dir / "dyn.vg4t", sal.dyn.astype(np.float32))
    for name in ("w_shallow", "w_middle", "w_deep"):
        write_blob(out_dir / f"{name}.vg4t", getattr(sal, name).astype(np.float32))
    return sal


def stage_mask(
    fs: FrameSet, sal: SaliencyMap, cfg: PipelineConfig, out_dir: Path
) -> tuple[DynamicMask, ClusterAssignment | None]:
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.per_token:
        mask = binarize_per_token(sal)
        clusters = None
    else:
        clusters = kmeans_tokens(fs.features, cfg.kmeans_k, cfg.kmeans_seed)
        mask = binarize(sal, clusters)
    write_blob(out_dir / "mask_patch.vg4t", mask.values.astype(np.uint8))
    (out_dir / "alpha.txt").write_text(f"{mask.alpha:.9f}\n")
    return mask, clusters


def load_patch_mask(path: Path, alpha: float = 0.0) -> DynamicMask:
    return DynamicMask(values=read_blob(path).astype(bool), alpha=alpha, resolution="patch")


def stage_refine(
    fs: FrameSet, mask: DynamicMask, cfg: PipelineConfig, out_dir: Path, threads: int = 1
):
    out_dir.mkdir(parents=True, exist_ok=True)
    res = refine_scene(fs, mask, cfg.refine, threads=threads)
    write_blob(out_dir / "mask_pixel.vg4t", res.mask.values.astype(np.uint8))
    export_ply(res.cloud, out_dir / "points.ply", mode="merged")
    write_blob(
        out_dir / "scores.vg4t",
        np.stack([res.scores.agg_proj, res.scores.agg_photo, res.scores.agg_total]).astype(
            np.float32
        ),
    )
    return res


def stage_suppress(mask: DynamicMask, cfg: PipelineConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    ks = build_key_suppression(mask, cfg.suppress_layers, cfg.suppress_mode)
    save_key_suppression(ks, out_dir / "key_mask.vg4t")
    return ks


def evaluate_masks(fs: FrameSet, mask: DynamicMask) -> dict:
    """Segmentation report of one mask stack against the pixel-level GT.

    Patch masks are upsampled so both resolutions face the same ground
    truth.
    """
    if fs.gt_masks is None:
        raise ValidationError("frame set carries no ground-truth masks")
    if mask.resolution == "patch":
        H, W = fs.image_size
        pred = patch_to_pixel(mask.values, H, W, fs.patch_size)
    else:
        pred = mask.values
    rep = seg_report([pred], [fs.gt_masks])
    return {"JM": rep.JM, "JR": rep.JR, "FM": rep.FM, "FR": rep.FR}


def evaluate_pose(fs: FrameSet, est: list | None = None) -> dict:
    if fs.gt_trajectory is None:
        raise ValidationError("frame set carries no ground-truth trajectory")
    est_traj = Trajectory.from_cameras(est if est is not None else fs.cameras)
    gt_traj = Trajectory.from_cameras(fs.gt_trajectory)
    ate, rte, rre = traj_metrics(est_traj, gt_traj)
    return {"ATE": ate, "RTE": rte, "RRE": rre}


def evaluate_recon(fs: FrameSet, pred_cloud, max_points: int = 200_000) -> dict:
    if fs.gt_points is None:
        raise ValidationError("frame set carries no ground-truth point cloud")
    pred = pred_cloud
    if len(pred) > max_points:
        pred = pred.subset(np.arange(0, len(pred), len(pred) // max_points + 1))
    rep = recon_metrics(pred, fs.gt_points)
    return {
        "accuracy_mean": rep.accuracy_mean,
        "accuracy_median": rep.accuracy_median,
        "completeness_mean": rep.completeness_mean,
        "completeness_median": rep.completeness_median,
        "distance_mean": rep.distance_mean,
        "distance_median": rep.distance_median,
    }


def run_pipeline(
    out_dir: str | Path,
    cfg: PipelineConfig | None = None,
    seed: int = 7,
    in_dir: str | Path | None = None,
    threads: int = 1,
    in_memory: bool = True,
) -> dict:
    """gen (or load) -> mine -> mask -> refine -> suppress -> eval.

    With ``in_memory`` the stages pass arrays directly; otherwise each
    stage re-reads its predecessor's files. Both paths write identical
    files.
    """
    cfg = cfg or PipelineConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if in_dir is None:
        fs_dir = out / "frameset"
        fs = stage_gen(cfg, seed, fs_dir)
        if not in_memory:
            fs = read_frameset(fs_dir)
    else:
        fs_dir = Path(in_dir)
        fs = read_frameset(fs_dir)
    cfg.validate_against(fs)

    log.info("mining saliency")
    sal = stage_mine(fs, cfg, out, threads=threads)
    if not in_memory:
        sal = SaliencyMap(
            dyn=read_blob(out / "dyn.vg4t").astype(np.float64),
            w_shallow=read_blob(out / "w_shallow.vg4t").astype(np.float64),
            w_middle=read_blob(out / "w_middle.vg4t").astype(np.float64),
            w_deep=read_blob(out / "w_deep.vg4t").astype(np.float64),
        )

    log.info("thresholding masks")
    mask, _ = stage_mask(fs, sal, cfg, out)
    if not in_memory:
        mask = load_patch_mask(out / "mask_patch.vg4t", mask.alpha)

    log.info("refining masks")
    res = stage_refine(fs, mask, cfg, out, threads=threads)
    stage_suppress(mask, cfg, out)

    report: dict = {"seed": seed, "frames": fs.frame_count, "tokens": fs.token_count}
    if fs.gt_masks is not None:
        report["seg_patch"] = evaluate_masks(fs, mask)
        report["seg_refined"] = evaluate_masks(fs, res.mask)
    if fs.gt_trajectory is not None:
        report["pose"] = evaluate_pose(fs)
    if fs.gt_points is not None:
        static = res.cloud.subset(~res.cloud.dynamic_flag)
        if len(static) and len(fs.gt_points):
            report["recon_static"] = evaluate_recon(fs, static)

    (out / "report.json").write_text(json.dumps(report, indent=1))
    lines = [_format_report_lines(report)]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    return report


def _format_report_lines(report: dict) -> str:
    parts = [f"frames={report.get('frames')} tokens={report.get('tokens')} seed={report.get('seed')}"]
    for key in ("seg_patch", "seg_refined"):
        if key in report:
            r = report[key]
            parts.append(
                f"{key}: JM={r['JM']:.4f} JR={r['JR']:.4f} FM={r['FM']:.4f} FR={r['FR']:.4f}"
            )
    if "pose" in report:
        p = report["pose"]
        parts.append(f"pose: ATE={p['ATE']:.6f} RTE={p['RTE']:.6f} RRE={p['RRE']:.6f}")
    if "recon_static" in report:
        r = report["recon_static"]
        parts.append(
            "recon_static: "
            f"acc={r['accuracy_mean']:.5f}/{r['accuracy_median']:.5f} "
            f"comp={r['completeness_mean']:.5f}/{r['completeness_median']:.5f} "
            f"dist={r['distance_mean']:.5f}/{r['distance_median']:.5f}"
        )
    return "\n".join(parts)


def frameset_cloud(fs: FrameSet, mask: DynamicMask | None = None, stride: int = 1):
    """Unproject a whole frame set, flagging points from a mask if given."""
    from .frameset import concat_clouds

    clouds = []
    for f in range(fs.frame_count):
        pc = unproject(
            fs.depths[f].astype(np.float64), fs.cameras[f], fs.images[f], f, stride=stride
        )
        if mask is not None:
            if mask.resolution == "pixel":
                vals = mask.values[f][pc.source[:, 1], pc.source[:, 2]]
            else:
                H, W = fs.image_size
                pix = patch_to_pixel(mask.values[f : f + 1], H, W, fs.patch_size)[0]
                vals = pix[pc.source[:, 1], pc.source[:, 2]]
            pc.dynamic_flag = vals.astype(bool)
        clouds.append(pc)
    return concat_clouds(clouds)
