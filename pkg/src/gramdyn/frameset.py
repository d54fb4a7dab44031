"""On-disk frame-set format: manifest.json plus VG4T tensor blobs.

Directory layout::

    manifest.json        scalar metadata, cameras, relative blob paths
    tensors/*.vg4t       images, depths, features, per-layer Q/K
    gt/*.vg4t            optional ground truth

Images are stored as uint8 and scaled to [0, 1] on load. Depth 0 means
"invalid". All multi-byte integers are little-endian.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoError, NotFound, SchemaError, ValidationError
from .geometry import CameraParams
from .vg4t import expect_shape, read_blob, write_blob

MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "gramdyn-frameset"
FORMAT_VERSION = 1


@dataclass
class PointCloud:
    """Attributed 3D points: position, color, dynamic flag, source pixel."""

    positions: np.ndarray  # N x 3, scene units
    colors: np.ndarray  # N x 3 in [0, 1]
    dynamic_flag: np.ndarray  # N bool
    source: np.ndarray  # N x 3 int: (frame, row, col)

    def __len__(self) -> int:
        return len(self.positions)

    def validate(self) -> None:
        n = len(self.positions)
        if self.positions.shape != (n, 3):
            raise SchemaError(f"positions must be Nx3, got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("point cloud contains non-finite positions")
        for name, arr, shape in (
            ("colors", self.colors, (n, 3)),
            ("dynamic_flag", self.dynamic_flag, (n,)),
            ("source", self.source, (n, 3)),
        ):
            if tuple(arr.shape) != shape:
                raise SchemaError(f"{name} must have shape {shape}, got {arr.shape}")

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            positions=self.positions[idx],
            colors=self.colors[idx],
            dynamic_flag=self.dynamic_flag[idx],
            source=self.source[idx],
        )


def concat_clouds(clouds: list[PointCloud]) -> PointCloud:
    return PointCloud(
        positions=np.concatenate([c.positions for c in clouds]),
        colors=np.concatenate([c.colors for c in clouds]),
        dynamic_flag=np.concatenate([c.dynamic_flag for c in clouds]),
        source=np.concatenate([c.source for c in clouds]),
    )


@dataclass
class FrameSet:
    """A validated multi-view sequence with attention tensors.

    ``q`` / ``k`` map layer id to an (F, Np, c) array. Optional ground
    truth: per-pixel dynamic masks, camera trajectory, static point cloud.
    """

    images: np.ndarray  # F x H x W x 3, [0, 1]
    depths: np.ndarray  # F x H x W, 0 = invalid
    cameras: list[CameraParams]
    patch_size: int
    q: dict[int, np.ndarray]
    k: dict[int, np.ndarray]
    features: np.ndarray  # F x Np x Cf
    gt_masks: np.ndarray | None = None  # F x H x W bool
    gt_trajectory: list[CameraParams] | None = None
    gt_points: PointCloud | None = None
    meta: dict = field(default_factory=dict)

    @property
    def frame_count(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def grid_size(self) -> tuple[int, int]:
        H, W = self.image_size
        return H // self.patch_size, W // self.patch_size

    @property
    def token_count(self) -> int:
        gh, gw = self.grid_size
        return gh * gw

    @property
    def channel_dim(self) -> int:
        first = next(iter(self.q.values()))
        return first.shape[2]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    @property
    def layer_ids(self) -> list[int]:
        return sorted(self.q.keys())

    def validate(self) -> None:
        F = self.frame_count
        if F < 2:
            raise ValidationError(f"a frame set needs F >= 2 frames, got {F}")
        H, W = self.image_size
        P = self.patch_size
        if P < 1 or H % P or W % P:
            raise ValidationError(f"image size {H}x{W} is not a multiple of patch size {P}")
        Np = self.token_count
        expect_shape(self.images, (F, H, W, 3), "images")
        expect_shape(self.depths, (F, H, W), "depths")
        expect_shape(self.features, (F, Np, self.feature_dim), "features")
        if len(self.cameras) != F:
            raise SchemaError(f"expected {F} cameras, got {len(self.cameras)}")
        for cam in self.cameras:
            cam.validate()
        if sorted(self.k.keys()) != self.layer_ids:
            raise SchemaError("Q and K layer id sets differ")
        c = self.channel_dim
        for lid in self.layer_ids:
            expect_shape(self.q[lid], (F, Np, c), f"Q_{lid}")
            expect_shape(self.k[lid], (F, Np, c), f"K_{lid}")
        if self.gt_masks is not None:
            expect_shape(self.gt_masks, (F, H, W), "gt_masks")
        if self.gt_trajectory is not None and len(self.gt_trajectory) != F:
            raise SchemaError("gt trajectory length != frame count")
        if self.gt_points is not None:
            self.gt_points.validate()


def _camera_to_json(cam: CameraParams) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
    }


def _camera_from_json(obj: dict) -> CameraParams:
    return CameraParams(
        fx=obj["fx"], fy=obj["fy"], cx=obj["cx"], cy=obj["cy"],
        rotation=np.array(obj["rotation"], dtype=np.float64),
        translation=np.array(obj["translation"], dtype=np.float64),
    )


def write_frameset(fs: FrameSet, path: str | Path) -> None:
    """Write a frame set directory; write-then-read is the identity.

    Files owned by the format (manifest, tensors/, gt/) are overwritten;
    anything else in the directory is left alone.
    """
    fs.validate()
    root = Path(path)
    try:
        (root / "tensors").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {root}: {exc}") from exc

    tensors: dict = {}

    def _dump(rel: str, arr: np.ndarray) -> str:
        write_blob(root / rel, arr)
        return rel

    images_u8 = np.clip(np.rint(fs.images * 255.0), 0, 255).astype(np.uint8)
    tensors["images"] = _dump("tensors/images.vg4t", images_u8)
    tensors["depths"] = _dump("tensors/depths.vg4t", fs.depths.astype(np.float32))
    tensors["features"] = _dump("tensors/features.vg4t", fs.features.astype(np.float32))
    tensors["q"] = {
        str(lid): _dump(f"tensors/Q_{lid:02d}.vg4t", fs.q[lid].astype(np.float32))
        for lid in fs.layer_ids
    }
    tensors["k"] = {
        str(lid): _dump(f"tensors/K_{lid:02d}.vg4t", fs.k[lid].astype(np.float32))
        for lid in fs.layer_ids
    }

    gt: dict = {}
    if fs.gt_masks is not None or fs.gt_points is not None:
        (root / "gt").mkdir(exist_ok=True)
    if fs.gt_masks is not None:
        gt["masks"] = _dump("gt/masks.vg4t", fs.gt_masks.astype(np.uint8))
    if fs.gt_trajectory is not None:
        gt["trajectory"] = [_camera_to_json(c) for c in fs.gt_trajectory]
    if fs.gt_points is not None:
        pc = fs.gt_points
        gt["points"] = _dump("gt/points.vg4t", pc.positions.astype(np.float32))
        gt["point_colors"] = _dump(
            "gt/point_colors.vg4t",
            np.clip(np.rint(pc.colors * 255.0), 0, 255).astype(np.uint8),
        )
        gt["point_flags"] = _dump("gt/point_flags.vg4t", pc.dynamic_flag.astype(np.uint8))
        gt["point_source"] = _dump("gt/point_source.vg4t", pc.source.astype(np.float32))

    H, W = fs.image_size
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "frame_count": fs.frame_count,
        "image_size": [H, W],
        "patch_size": fs.patch_size,
        "token_count": fs.token_count,
        "channel_dim": fs.channel_dim,
        "feature_dim": fs.feature_dim,
        "layer_ids": fs.layer_ids,
        "cameras": [_camera_to_json(c) for c in fs.cameras],
        "tensors": tensors,
    }
    if gt:
        manifest["gt"] = gt
    if fs.meta:
        manifest["meta"] = fs.meta
    try:
        (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    except OSError as exc:
        raise IoError(f"cannot write manifest: {exc}") from exc


def read_frameset(path: str | Path) -> FrameSet:
    """Load and fully validate a frame-set directory."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not root.is_dir() or not manifest_path.exists():
        raise NotFound(f"no frameset at {root} (missing {MANIFEST_NAME})")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise SchemaError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise SchemaError(f"{manifest_path}: unsupported version {manifest.get('version')!r}")

    F = int(manifest["frame_count"])
    H, W = (int(x) for x in manifest["image_size"])
    P = int(manifest["patch_size"])
    Np = int(manifest["token_count"])
    c = int(manifest["channel_dim"])
    Cf = int(manifest["feature_dim"])
    layer_ids = [int(x) for x in manifest["layer_ids"]]
    if P < 1 or H % P or W % P:
        raise SchemaError(f"image size {H}x{W} not a multiple of patch size {P}")
    if Np != (H // P) * (W // P):
        raise SchemaError(f"token_count {Np} inconsistent with {H}x{W} / {P}")

    paths = manifest["tensors"]

    def _load(rel: str, shape: tuple[int, ...], name: str) -> np.ndarray:
        return expect_shape(read_blob(root / rel), shape, name)

    images = _load(paths["images"], (F, H, W, 3), "images").astype(np.float32) / 255.0
    depths = _load(paths["depths"], (F, H, W), "depths")
    features = _load(paths["features"], (F, Np, Cf), "features")
    q = {int(l): _load(rel, (F, Np, c), f"Q_{l}") for l, rel in paths["q"].items()}
    k = {int(l): _load(rel, (F, Np, c), f"K_{l}") for l, rel in paths["k"].items()}
    if sorted(q.keys()) != sorted(layer_ids) or sorted(k.keys()) != sorted(layer_ids):
        raise SchemaError("manifest layer_ids disagree with Q/K tensor entries")

    gt = manifest.get("gt", {})
    gt_masks = None
    if "masks" in gt:
        gt_masks = _load(gt["masks"], (F, H, W), "gt_masks").astype(bool)
    gt_traj = None
    if "trajectory" in gt:
        gt_traj = [_camera_from_json(o) for o in gt["trajectory"]]
    gt_points = None
    if "points" in gt:
        pos = read_blob(root / gt["points"])
        npts = pos.shape[0]
        gt_points = PointCloud(
            positions=expect_shape(pos, (npts, 3), "gt_points").astype(np.float64),
            colors=_load(gt["point_colors"], (npts, 3), "gt_point_colors").astype(np.float64) / 255.0,
            dynamic_flag=_load(gt["point_flags"], (npts,), "gt_point_flags").astype(bool),
            source=_load(gt["point_source"], (npts, 3), "gt_point_source").astype(np.int64),
        )

    fs = FrameSet(
        images=images,
        depths=depths,
        cameras=[_camera_from_json(o) for o in manifest["cameras"]],
        patch_size=P,
        q=q,
        k=k,
        features=features,
        gt_masks=gt_masks,
        gt_trajectory=gt_traj,
        gt_points=gt_points,
        meta=manifest.get("meta", {}),
    )
    fs.validate()
    return fs


PLY_MODES = ("merged", "static-only", "dynamic-only")


def export_ply(pc: PointCloud, path: str | Path, mode: str = "merged") -> None:
    """Write a binary-little-endian PLY with a uchar ``dynamic`` property."""
    if mode not in PLY_MODES:
        raise ValidationError(f"unknown PLY mode {mode!r}, expected one of {PLY_MODES}")
    pc.validate()
    keep = np.ones(len(pc), dtype=bool)
    if mode == "static-only":
        keep = ~pc.dynamic_flag
    elif mode == "dynamic-only":
        keep = pc.dynamic_flag.astype(bool)

    pos = pc.positions[keep].astype("<f4")
    rgb = np.clip(np.rint(pc.colors[keep] * 255.0), 0, 255).astype(np.uint8)
    dyn = pc.dynamic_flag[keep].astype(np.uint8)
    n = len(pos)

    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property uchar dynamic\nend_header\n"
    )
    rec = np.zeros(
        n,
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
               ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("dynamic", "u1")],
    )
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    rec["dynamic"] = dyn
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write PLY {path}: {exc}") from exc
