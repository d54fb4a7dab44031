"""Deterministic synthetic scenes with exact ground truth.

Scenes are rendered by analytic ray casting against spheres and
(optionally finite) planes: exact closest-hit depths, flat-shaded
procedural albedo, per-pixel dynamic masks, and a ground-truth camera
trajectory. Attention tensors are synthesized from per-primitive
prototypes so that the shallow/middle/deep statistics of a real
multi-view transformer are reproduced in a controlled way:

* shallow layers: keys of dynamic tokens are rotated away from the
  background prototype (semantic contrast) with an extra per-frame
  wobble, and their queries align with the wobble plane;
* middle layers: queries of dynamic tokens rotate toward a fresh random
  direction every frame (motion variability);
* deep layers: stable vectors whose magnitude falls off radially from
  the image center (a spatial prior), with no temporal drift.

All randomness flows through counter-style Philox streams keyed by the
scene seed and a purpose tag, so output is bit-identical across runs and
independent of any evaluation order. The feature model is part of the
test fixture, not a claim about any particular network.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .frameset import FrameSet, PointCloud, write_frameset
from .geometry import CameraParams

RAY_T_MIN = 1e-2


@dataclass
class Albedo:
    """Solid color or two-color checker over surface coordinates."""

    kind: str = "solid"  # "solid" | "checker"
    color: tuple[float, float, float] = (0.7, 0.7, 0.7)
    color2: tuple[float, float, float] = (0.3, 0.3, 0.3)
    cell: float = 0.5

    def sample(self, su: np.ndarray, sv: np.ndarray) -> np.ndarray:
        if self.kind == "solid":
            return np.broadcast_to(np.asarray(self.color, float), su.shape + (3,)).copy()
        if self.kind != "checker":
            raise ValidationError(f"unknown albedo kind {self.kind!r}")
        parity = (np.floor(su / self.cell) + np.floor(sv / self.cell)) % 2 == 0
        out = np.empty(su.shape + (3,))
        out[parity] = self.color
        out[~parity] = self.color2
        return out


@dataclass
class Motion:
    """Rigid per-frame motion: constant linear and angular velocity."""

    linear_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angular_axis: tuple[float, float, float] = (0.0, 1.0, 0.0)
    angular_speed: float = 0.0  # radians per frame

    def offset(self, frame: int) -> np.ndarray:
        return np.asarray(self.linear_velocity, float) * frame

    def rotation(self, frame: int) -> np.ndarray:
        angle = self.angular_speed * frame
        if angle == 0.0:
            return np.eye(3)
        axis = np.asarray(self.angular_axis, float)
        axis = axis / np.linalg.norm(axis)
        K = np.array([
            [0, -axis[2], axis[1]],
            [axis[2], 0, -axis[0]],
            [-axis[1], axis[0], 0],
        ])
        return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


@dataclass
class Primitive:
    """A sphere or an (optionally finite) plane with albedo and motion."""

    kind: str  # "sphere" | "plane"
    center: tuple[float, float, float]  # sphere center / plane point
    radius: float = 1.0  # spheres only
    normal: tuple[float, float, float] = (0.0, -1.0, 0.0)  # planes only
    extent: tuple[float, float] | None = None  # plane half-sizes, None = infinite
    albedo: Albedo = field(default_factory=Albedo)
    motion: Motion | None = None

    def validate(self) -> None:
        if self.kind not in ("sphere", "plane"):
            raise ValidationError(f"unknown primitive kind {self.kind!r}")
        if self.kind == "sphere" and self.radius <= 0:
            raise ValidationError("sphere radius must be positive")
        if self.kind == "plane" and np.linalg.norm(self.normal) == 0:
            raise ValidationError("plane normal must be non-zero")

    def _plane_axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        au = np.cross(n, helper)
        au /= np.linalg.norm(au)
        av = np.cross(n, au)
        return n, au, av

    def intersect(self, origin: np.ndarray, dirs: np.ndarray, frame: int):
        """Ray parameter t per pixel (inf = miss) and hit points."""
        pos = np.asarray(self.center, float)
        if self.motion is not None:
            pos = pos + self.motion.offset(frame)
        if self.kind == "sphere":
            oc = origin - pos
            a = np.einsum("...i,...i->...", dirs, dirs)
            b = 2.0 * dirs @ oc
            c0 = oc @ oc - self.radius**2
            disc = b * b - 4 * a * c0
            t = np.full(dirs.shape[:-1], np.inf)
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t1 = (-b - sq) / (2 * a)
            t2 = (-b + sq) / (2 * a)
            tt = np.where(t1 > RAY_T_MIN, t1, t2)
            good = ok & (tt > RAY_T_MIN)
            t[good] = tt[good]
            return t
        n, au, av = self._plane_axes()
        denom = dirs @ n
        t = np.full(dirs.shape[:-1], np.inf)
        ok = np.abs(denom) > 1e-12
        tt = np.where(ok, ((pos - origin) @ n) / np.where(ok, denom, 1.0), np.inf)
        good = ok & (tt > RAY_T_MIN)
        if self.extent is not None:
            hit = origin + tt[..., None] * dirs
            local = hit - pos
            good = good & (np.abs(local @ au) <= self.extent[0]) & (
                np.abs(local @ av) <= self.extent[1]
            )
        t[good] = tt[good]
        return t

    def surface_coords(self, hits: np.ndarray, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """Object-anchored 2D texture coordinates for the hit points."""
        pos = np.asarray(self.center, float)
        if self.motion is not None:
            pos = pos + self.motion.offset(frame)
        local = hits - pos
        if self.motion is not None:
            local = local @ self.motion.rotation(frame)  # world -> object frame
        if self.kind == "sphere":
            r = max(self.radius, 1e-9)
            su = np.arctan2(local[..., 1], local[..., 0]) * r
            sv = np.arccos(np.clip(local[..., 2] / r, -1, 1)) * r
            return su, sv
        _, au, av = self._plane_axes()
        return local @ au, local @ av


@dataclass
class CameraPath:
    """Orbit arc or straight segment, always looking at a target point."""

    kind: str = "orbit"  # "orbit" | "linear"
    target: tuple[float, float, float] = (0.0, 0.0, 4.0)
    radius: float = 6.0  # orbit only
    height: float = -0.8  # orbit only: y offset of the ring
    start_angle: float = -0.3
    sweep: float = 0.6
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)  # linear only
    end: tuple[float, float, float] = (1.0, 0.0, 0.0)
    hfov_deg: float = 60.0

    def positions(self, frame_count: int) -> np.ndarray:
        ts = np.linspace(0.0, 1.0, frame_count)
        tgt = np.asarray(self.target, float)
        if self.kind == "orbit":
            ang = self.start_angle + ts * self.sweep
            return np.stack(
                [
                    tgt[0] + self.radius * np.sin(ang),
                    np.full_like(ang, tgt[1] + self.height),
                    tgt[2] - self.radius * np.cos(ang),
                ],
                axis=1,
            )
        if self.kind == "linear":
            a = np.asarray(self.start, float)
            b = np.asarray(self.end, float)
            return a[None, :] + ts[:, None] * (b - a)[None, :]
        raise ValidationError(f"unknown camera path kind {self.kind!r}")

    def cameras(self, frame_count: int, H: int, W: int) -> list[CameraParams]:
        fx = W / (2.0 * math.tan(math.radians(self.hfov_deg) / 2.0))
        cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
        tgt = np.asarray(self.target, float)
        cams = []
        for pos in self.positions(frame_count):
            fwd = tgt - pos
            norm = np.linalg.norm(fwd)
            if norm < 1e-9:
                raise ValidationError("camera position coincides with its target")
            z = fwd / norm
            x = np.cross(np.array([0.0, 1.0, 0.0]), z)  # world +y is down
            xn = np.linalg.norm(x)
            if xn < 1e-9:
                raise ValidationError("camera forward is parallel to the vertical axis")
            x /= xn
            y = np.cross(z, x)
            R = np.stack([x, y, z])
            cams.append(CameraParams(fx=fx, fy=fx, cx=cx, cy=cy, rotation=R, translation=-R @ pos))
        return cams


@dataclass
class FeatureModel:
    """Parameters of the synthetic attention/feature generator."""

    channel_dim: int = 32
    feature_dim: int = 32
    noise: float = 0.05
    pos_scale: float = 0.3
    drift_shallow: float = 1.0  # semantic rotation + per-frame wobble, radians
    drift_middle: float = 0.9  # per-frame rotation of dynamic queries, radians
    deep_bowl: float = 0.5  # radial magnitude falloff realizing the spatial prior
    shallow_layers: tuple[int, ...] = (1,)
    middle_layers: tuple[int, ...] = (4, 5, 6, 7, 8)
    deep_layers: tuple[int, ...] = (18, 19, 20, 21, 22)

    @property
    def layer_ids(self) -> list[int]:
        return sorted({*self.shallow_layers, *self.middle_layers, *self.deep_layers})


@dataclass
class SceneSpec:
    seed: int = 7
    frame_count: int = 24
    image_size: tuple[int, int] = (518, 518)
    patch_size: int = 14
    static_primitives: list[Primitive] = field(default_factory=list)
    dynamic_primitives: list[Primitive] = field(default_factory=list)
    camera: CameraPath = field(default_factory=CameraPath)
    features: FeatureModel = field(default_factory=FeatureModel)

    def validate(self) -> None:
        if self.frame_count < 2:
            raise ValidationError("a scene needs at least 2 frames")
        H, W = self.image_size
        if H % self.patch_size or W % self.patch_size:
            raise ValidationError(
                f"image size {H}x{W} must be a multiple of patch size {self.patch_size}"
            )
        if not self.static_primitives:
            raise ValidationError("a scene needs at least one static primitive")
        for p in [*self.static_primitives, *self.dynamic_primitives]:
            p.validate()
        pos = self.camera.positions(self.frame_count)
        if np.allclose(pos.std(axis=0), 0):
            raise ValidationError("camera path is degenerate (no motion)")

    @property
    def primitives(self) -> list[Primitive]:
        return [*self.static_primitives, *self.dynamic_primitives]

    def dynamic_ids(self) -> set[int]:
        n_static = len(self.static_primitives)
        return set(range(n_static, n_static + len(self.dynamic_primitives)))


def default_fixture_spec(seed: int = 7) -> SceneSpec:
    """The standard desk-scale fixture: a sphere crossing two checkered planes."""
    ground = Primitive(
        kind="plane", center=(0.0, 1.2, 4.0), normal=(0.0, -1.0, 0.0),
        albedo=Albedo(kind="checker", color=(0.75, 0.72, 0.65), color2=(0.45, 0.42, 0.4), cell=0.6),
    )
    wall = Primitive(
        kind="plane", center=(0.0, 0.0, 8.0), normal=(0.0, 0.0, -1.0),
        albedo=Albedo(kind="checker", color=(0.55, 0.6, 0.7), color2=(0.3, 0.32, 0.4), cell=0.8),
    )
    mover = Primitive(
        kind="sphere", center=(-1.4, 0.15, 4.2), radius=0.55,
        albedo=Albedo(kind="checker", color=(0.9, 0.25, 0.2), color2=(0.8, 0.55, 0.15), cell=0.7),
        motion=Motion(linear_velocity=(0.12, 0.0, 0.0)),
    )
    return SceneSpec(
        seed=seed,
        static_primitives=[ground, wall],
        dynamic_primitives=[mover],
        camera=CameraPath(kind="orbit", target=(0.0, 0.3, 4.5), radius=5.5, height=-1.0,
                          start_angle=-0.28, sweep=0.56),
    )


def _stream(seed: int, *tags) -> np.random.Generator:
    """Counter-style stream: an independent generator per (seed, purpose)."""
    digest = hashlib.blake2s(repr((seed,) + tags).encode(), digest_size=8).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class RenderedScene:
    depths: np.ndarray  # F x H x W, 0 = no hit
    images: np.ndarray  # F x H x W x 3 in [0, 1]
    prim_ids: np.ndarray  # F x H x W int16, -1 = no hit
    gt_masks: np.ndarray  # F x H x W bool
    cameras: list[CameraParams]


def render_scene(spec: SceneSpec) -> RenderedScene:
    """Analytic closest-hit rendering of every frame."""
    spec.validate()
    H, W = spec.image_size
    F = spec.frame_count
    cams = spec.camera.cameras(F, H, W)
    prims = spec.primitives
    dyn_ids = spec.dynamic_ids()

    depths = np.zeros((F, H, W), np.float64)
    images = np.zeros((F, H, W, 3), np.float64)
    ids = np.full((F, H, W), -1, np.int16)

    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    for f, cam in enumerate(cams):
        d_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
        dirs = d_cam @ cam.rotation  # rows of R span camera axes; this is R^T applied
        origin = cam.center
        t_all = np.stack([p.intersect(origin, dirs, f) for p in prims])
        best = np.argmin(t_all, axis=0)
        t_best = np.take_along_axis(t_all, best[None], axis=0)[0]
        hit = np.isfinite(t_best)
        ids[f][hit] = best[hit]
        depths[f][hit] = t_best[hit]  # rays have unit camera-z: t equals z-depth
        hits_w = origin + t_best[..., None] * dirs
        for pi, prim in enumerate(prims):
            sel = hit & (best == pi)
            if not sel.any():
                continue
            su, sv = prim.surface_coords(hits_w[sel], f)
            images[f][sel] = prim.albedo.sample(su, sv)
    gt = np.isin(ids, sorted(dyn_ids)) if dyn_ids else np.zeros_like(ids, bool)
    return RenderedScene(
        depths=depths, images=images, prim_ids=ids, gt_masks=gt, cameras=cams
    )


def token_primitive_ids(prim_ids: np.ndarray, patch_size: int) -> np.ndarray:
    """Majority primitive id per patch token (ties to the lower id)."""
    F, H, W = prim_ids.shape
    P = patch_size
    gh, gw = H // P, W // P
    blocks = prim_ids.reshape(F, gh, P, gw, P)
    n_ids = int(prim_ids.max()) + 2  # shift -1 (no hit) to 0
    counts = np.zeros((n_ids, F, gh, gw), np.int32)
    for i in range(n_ids):
        counts[i] = (blocks == i - 1).sum(axis=(2, 4))
    return (counts.argmax(axis=0) - 1).reshape(F, gh * gw).astype(np.int16)


def _orthonormal_rows(rng: np.random.Generator, n: int, c: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(c, n)))
    return q.T[:n]


def synth_features(scene: RenderedScene, spec: SceneSpec) -> tuple[dict, dict, np.ndarray]:
    """Per-layer Q/K tensors plus backbone features for the rendered scene.

    Returns (q, k, features) with q/k mapping layer id to (F, Np, c).
    """
    fm = spec.features
    F = spec.frame_count
    H, W = spec.image_size
    P = spec.patch_size
    gh, gw = H // P, W // P
    Np = gh * gw
    c = fm.channel_dim
    seed = spec.seed

    token_ids = token_primitive_ids(scene.prim_ids, P)  # F x Np, -1..n-1
    dyn_ids = spec.dynamic_ids()
    dyn_tok = np.isin(token_ids, sorted(dyn_ids)) if dyn_ids else np.zeros_like(token_ids, bool)

    gy, gx = np.meshgrid(np.linspace(-1, 1, gh), np.linspace(-1, 1, gw), indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)  # Np x 2 in [-1, 1]
    radial = (grid**2).sum(axis=1) / 2.0  # 0 center .. 1 corner

    def build_layer(lid: int, side: str) -> np.ndarray:
        band = (
            "shallow" if lid in fm.shallow_layers
            else "middle" if lid in fm.middle_layers
            else "deep"
        )
        basis = _orthonormal_rows(_stream(seed, "basis", lid, side), 3, c)
        base, u1, u2 = basis
        pos_dirs = _stream(seed, "pos", lid, side).normal(size=(2, c)) / math.sqrt(c)
        pos = grid @ pos_dirs * (fm.pos_scale * 0.3)

        out = np.broadcast_to(base, (F, Np, c)).copy()
        if band == "deep":
            out *= (1.0 + fm.deep_bowl * (1.0 - radial))[None, :, None]
        elif band == "shallow" and dyn_tok.any() and fm.drift_shallow > 0:
            a = fm.drift_shallow
            if side == "k":
                wob = _stream(seed, "wobble", lid).normal(size=F) * (0.5 * a)
                for f in range(F):
                    vec = (
                        math.cos(a) * base
                        + math.sin(a) * (math.cos(wob[f]) * u1 + math.sin(wob[f]) * u2)
                    )
                    out[f][dyn_tok[f]] = vec
            else:  # queries of dynamic tokens align with the wobble plane
                out[np.nonzero(dyn_tok)] = u1
        elif band == "middle" and side == "q" and dyn_tok.any() and fm.drift_middle > 0:
            th = fm.drift_middle
            psi = _stream(seed, "drift", lid).uniform(0, 2 * math.pi, size=F)
            for f in range(F):
                e = math.cos(psi[f]) * u1 + math.sin(psi[f]) * u2
                out[f][dyn_tok[f]] = math.cos(th) * base + math.sin(th) * e
        out = out + pos[None, :, :]
        if fm.noise > 0:
            out = out + _stream(seed, "noise", lid, side).normal(size=(F, Np, c)) * fm.noise
        return out.astype(np.float32)

    q = {lid: build_layer(lid, "q") for lid in fm.layer_ids}
    k = {lid: build_layer(lid, "k") for lid in fm.layer_ids}

    n_prims = len(spec.primitives)
    protos = _orthonormal_rows(_stream(seed, "feat-protos"), n_prims + 1, fm.feature_dim)
    feat_pos = _stream(seed, "feat-pos").normal(size=(2, fm.feature_dim)) / math.sqrt(fm.feature_dim)
    features = protos[token_ids + 1] + (grid @ feat_pos * fm.pos_scale)[None, :, :]
    if fm.noise > 0:
        features = features + _stream(seed, "feat-noise").normal(size=features.shape) * fm.noise
    return q, k, features.astype(np.float32)


def build_frameset(spec: SceneSpec) -> FrameSet:
    """Render a scene and assemble the full in-memory frame set."""
    scene = render_scene(spec)
    q, k, features = synth_features(scene, spec)
    gt_points = _static_cloud(scene, stride=4)
    return FrameSet(
        images=scene.images.astype(np.float32),
        depths=scene.depths.astype(np.float32),
        cameras=scene.cameras,
        patch_size=spec.patch_size,
        q=q,
        k=k,
        features=features,
        gt_masks=scene.gt_masks,
        gt_trajectory=scene.cameras,
        gt_points=gt_points,
        meta={"scene_seed": spec.seed},
    )


def _static_cloud(scene: RenderedScene, stride: int = 4) -> PointCloud:
    from .geometry import unproject

    clouds = []
    for f, cam in enumerate(scene.cameras):
        depth = np.where(scene.gt_masks[f], 0.0, scene.depths[f])
        pc = unproject(depth.astype(np.float64), cam, scene.images[f], f, stride=stride)
        clouds.append(pc)
    from .frameset import concat_clouds

    return concat_clouds(clouds)


def gen_scene(spec: SceneSpec, out_dir: str | Path) -> FrameSet:
    """Render, synthesize tensors, and write a frameset directory."""
    fs = build_frameset(spec)
    write_frameset(fs, out_dir)
    return fs


# -- scene spec (de)serialization for the CLI ------------------------------

def spec_to_json(spec: SceneSpec) -> str:
    return json.dumps(asdict(spec), indent=1)


def _primitive_from_dict(d: dict) -> Primitive:
    alb = d.get("albedo") or {}
    mot = d.get("motion")
    return Primitive(
        kind=d["kind"],
        center=tuple(d["center"]),
        radius=d.get("radius", 1.0),
        normal=tuple(d.get("normal", (0.0, -1.0, 0.0))),
        extent=tuple(d["extent"]) if d.get("extent") else None,
        albedo=Albedo(
            kind=alb.get("kind", "solid"),
            color=tuple(alb.get("color", (0.7, 0.7, 0.7))),
            color2=tuple(alb.get("color2", (0.3, 0.3, 0.3))),
            cell=alb.get("cell", 0.5),
        ),
        motion=None if mot is None else Motion(
            linear_velocity=tuple(mot.get("linear_velocity", (0, 0, 0))),
            angular_axis=tuple(mot.get("angular_axis", (0, 1, 0))),
            angular_speed=mot.get("angular_speed", 0.0),
        ),
    )


def spec_from_json(text: str) -> SceneSpec:
    d = json.loads(text)
    cam = d.get("camera") or {}
    feat = d.get("features") or {}
    defaults = SceneSpec()
    return SceneSpec(
        seed=d.get("seed", defaults.seed),
        frame_count=d.get("frame_count", defaults.frame_count),
        image_size=tuple(d.get("image_size", defaults.image_size)),
        patch_size=d.get("patch_size", defaults.patch_size),
        static_primitives=[_primitive_from_dict(p) for p in d.get("static_primitives", [])],
        dynamic_primitives=[_primitive_from_dict(p) for p in d.get("dynamic_primitives", [])],
        camera=CameraPath(**{k: tuple(v) if isinstance(v, list) else v for k, v in cam.items()}),
        features=FeatureModel(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in feat.items()
        }),
    )
