"""Projection-gradient mask refinement.

Every frame's depth map is lifted to a world point cloud; each point is
re-projected into every other view and scored by the magnitude of its
weighted depth-residual gradient and photometric residual, where the
weight zeroes out views whose initial mask already marks the landing
pixel dynamic. Scores are stabilized by statistical outlier removal and
voxel-connected-component averaging, then thresholded (Otsu over cluster
means unless a fixed value is given) and rasterized back to pixels.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateRefinement, ValidationError
from .frameset import FrameSet, PointCloud, concat_clouds
from .geometry import (
    _residual_gradients_batch,
    bilinear_sample,
    depth_gradient,
    project,
    unproject,
)
from .masking import DynamicMask, otsu_threshold, patch_to_pixel

OCCLUSION_MARGIN_FRACTION = 0.05  # of the scene median depth


@dataclass
class RefineConfig:
    lam: float = 1.0  # photometric weight on normalized scores
    tau: float | None = None  # None = Otsu over cluster means
    sor_k: int = 20
    sor_sigma: float = 2.5
    occlusion_margin: float | None = None  # None = fraction of median depth
    voxel_size: float | None = None  # None = 2x median nearest-neighbor spacing
    pixel_stride: int = 2  # unprojection grid step for the refinement cloud

    def validate(self) -> None:
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.sor_k < 1 or self.sor_sigma <= 0:
            raise ValidationError("SOR needs k >= 1 and sigma > 0")
        if self.pixel_stride < 1:
            raise ValidationError("pixel stride must be >= 1")


@dataclass
class RefineScores:
    """Per-point scores, each min-max normalized before combination."""

    agg_proj: np.ndarray
    agg_photo: np.ndarray
    agg_total: np.ndarray


@dataclass
class RefineResult:
    mask: DynamicMask  # pixel resolution
    cloud: PointCloud  # all points, dynamic_flag filled
    scores: RefineScores  # over kept (post-SOR) points
    kept: np.ndarray
    removed: np.ndarray
    clusters: np.ndarray  # cluster id per kept point
    tau: float
    degenerate: bool


def resolve_occlusion_margin(fs: FrameSet, cfg: RefineConfig) -> float:
    if cfg.occlusion_margin is not None:
        return cfg.occlusion_margin
    valid = fs.depths[fs.depths > 0]
    if valid.size == 0:
        return np.inf
    return OCCLUSION_MARGIN_FRACTION * float(np.median(valid))


def _mask_lookup(masks: DynamicMask, fs: FrameSet, frame: int, u: np.ndarray, v: np.ndarray):
    """Nearest-neighbor mask sample at continuous pixel coordinates."""
    H, W = fs.image_size
    iu = np.clip(np.rint(u).astype(np.int64), 0, W - 1)
    iv = np.clip(np.rint(v).astype(np.int64), 0, H - 1)
    if masks.resolution == "pixel":
        return masks.values[frame, iv, iu]
    P = fs.patch_size
    gw = W // P
    return masks.values[frame, (iv // P) * gw + (iu // P)]


def view_scores(
    pc: PointCloud,
    fs: FrameSet,
    masks: DynamicMask,
    cfg: RefineConfig = RefineConfig(),
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw (un-normalized) projection and photometric scores per point.

    Each view i contributes ||w_i r_d grad(r_d)|| and ||w_i (c - C_i)||
    with w_i = visible * (1 - M_i); a point's own source frame is
    skipped and the sum is divided by the number of other frames.
    """
    F = fs.frame_count
    if F < 2:
        raise ValidationError("view scores need at least one other view")
    margin = resolve_occlusion_margin(fs, cfg)
    grads = [depth_gradient(fs.depths[i]) for i in range(F)]

    def one_view(i: int) -> tuple[np.ndarray, np.ndarray]:
        proj_acc = np.zeros(len(pc))
        photo_acc = np.zeros(len(pc))
        other = pc.source[:, 0] != i
        if not other.any():
            return proj_acc, photo_acc
        pts = pc.positions[other]
        cam = fs.cameras[i]
        sample = project(pts, cam, fs.depths[i], occlusion_margin=margin)
        vis = sample.visible
        if vis.any():
            u, v = sample.u[vis], sample.v[vis]
            w = 1.0 - _mask_lookup(masks, fs, i, u, v).astype(np.float64)
            r = sample.r_d[vis]
            g = _residual_gradients_batch(pts[vis], cam, grads[i], u, v)
            proj = w * np.abs(r) * np.linalg.norm(g, axis=1)
            colors = bilinear_sample(fs.images[i].astype(np.float64), u, v)
            photo = w * np.linalg.norm(pc.colors[other][vis] - colors, axis=1)
            idx = np.nonzero(other)[0][vis]
            proj_acc[idx] = proj
            photo_acc[idx] = photo
        return proj_acc, photo_acc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one_view, range(F)))
    else:
        parts = [one_view(i) for i in range(F)]
    proj_total = np.zeros(len(pc))
    photo_total = np.zeros(len(pc))
    for p, q in parts:  # fixed accumulation order keeps results deterministic
        proj_total += p
        photo_total += q
    n_other = F - 1
    return proj_total / n_other, photo_total / n_other


def agg_proj(pc, fs, masks, cfg: RefineConfig = RefineConfig(), threads: int = 1) -> np.ndarray:
    """Aggregated projection-gradient score per point (the geometric cue)."""
    return view_scores(pc, fs, masks, cfg, threads)[0]


def agg_photo(pc, fs, masks, cfg: RefineConfig = RefineConfig(), threads: int = 1) -> np.ndarray:
    """Aggregated photometric-residual score per point."""
    return view_scores(pc, fs, masks, cfg, threads)[1]


def sor_filter(pc: PointCloud, k: int = 20, sigma: float = 2.5) -> tuple[np.ndarray, np.ndarray]:
    """Statistical outlier removal: drop points whose mean k-NN distance
    exceeds mean + sigma * std of all such means. Returns (kept, removed)
    index arrays."""
    n = len(pc)
    if n <= k:
        raise ValidationError(f"SOR needs more than k={k} points, got {n}")
    tree = cKDTree(pc.positions)
    dists, _ = tree.query(pc.positions, k=k + 1, workers=-1)
    mean_d = dists[:, 1:].mean(axis=1)
    thr = mean_d.mean() + sigma * mean_d.std()
    removed = np.nonzero(mean_d > thr)[0]
    kept = np.nonzero(mean_d <= thr)[0]
    return kept, removed


def cluster_points(pc: PointCloud, voxel: float) -> np.ndarray:
    """Connected components over the 26-neighborhood of occupied voxels.

    Labels are dense ints ordered by each component's minimum point index.
    """
    if voxel <= 0:
        raise ValidationError("voxel size must be positive")
    coords = np.floor(pc.positions / voxel).astype(np.int64)
    lo = coords.min(axis=0)
    coords = coords - lo  # non-negative, keeps the packing compact
    span = int(coords.max()) + 3
    def pack(c):
        return (c[:, 0] * span + c[:, 1]) * span + c[:, 2]

    keys = pack(coords)
    uniq, first_idx, inv = np.unique(keys, return_index=True, return_inverse=True)
    ucoords = coords[first_idx]
    n_vox = len(uniq)

    # half the 26-neighborhood; adjacency is symmetric
    offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
        if (dx, dy, dz) > (0, 0, 0)
    ]
    rows, cols = [np.arange(n_vox)], [np.arange(n_vox)]
    for off in offsets:
        nb_keys = pack(ucoords + np.asarray(off))
        pos = np.clip(np.searchsorted(uniq, nb_keys), 0, n_vox - 1)
        hit = uniq[pos] == nb_keys
        rows.append(np.nonzero(hit)[0])
        cols.append(pos[hit])
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(r), np.int8), (r, c)), shape=(n_vox, n_vox))
    _, vox_labels = connected_components(graph, directed=False)

    point_labels = vox_labels[inv]
    n_comp = int(point_labels.max()) + 1
    comp_first = np.full(n_comp, len(pc), dtype=np.int64)
    np.minimum.at(comp_first, point_labels, np.arange(len(pc)))
    remap = np.empty(n_comp, dtype=np.int64)
    remap[np.argsort(comp_first, kind="stable")] = np.arange(n_comp)
    return remap[point_labels]


def _default_voxel(pc: PointCloud) -> float:
    """2x the median nearest-neighbor spacing of one frame's sub-cloud.

    Measuring within a single frame reflects the sampling-grid density;
    across frames, coincident samples of the same static surface would
    drive the median toward zero.
    """
    frames, counts = np.unique(pc.source[:, 0], return_counts=True)
    sel = pc.source[:, 0] == frames[np.argmax(counts)]
    pts = pc.positions[sel]
    probe = pts[:: max(1, len(pts) // 50_000)]
    if len(pts) < 2:
        return 1e-6
    d1 = cKDTree(pts).query(probe, k=2, workers=-1)[0][:, 1]
    voxel = 2.0 * float(np.median(d1))
    return voxel if voxel > 0 else 1e-6


def _minmax(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min() if x.size else 0.0
    if span <= 0:
        return np.zeros_like(x)
    return (x - x.min()) / span


def refine_scene(
    fs: FrameSet,
    initial: DynamicMask,
    cfg: RefineConfig = RefineConfig(),
    threads: int = 1,
) -> RefineResult:
    """Full refinement pipeline; see module docstring for the stages."""
    cfg.validate()
    if initial.resolution != "patch":
        raise ValidationError("refinement expects a patch-level initial mask")
    F = fs.frame_count
    H, W = fs.image_size
    base_pixel = patch_to_pixel(initial.values, H, W, fs.patch_size)

    clouds = [
        unproject(fs.depths[f].astype(np.float64), fs.cameras[f], fs.images[f], f,
                  stride=cfg.pixel_stride)
        for f in range(F)
    ]
    cloud = concat_clouds(clouds)
    if len(cloud) == 0:
        raise ValidationError("no valid-depth pixels to refine")

    if len(cloud) > cfg.sor_k:
        kept, removed = sor_filter(cloud, cfg.sor_k, cfg.sor_sigma)
    else:
        kept = np.arange(len(cloud))
        removed = np.array([], dtype=np.int64)
    kept_cloud = cloud.subset(kept)

    proj_raw, photo_raw = view_scores(kept_cloud, fs, initial, cfg, threads)
    total_raw = proj_raw + cfg.lam * photo_raw

    flags = np.zeros(len(cloud), dtype=bool)
    src = cloud.source
    inherited = base_pixel[src[:, 0], src[:, 1], src[:, 2]]

    degenerate = total_raw.size == 0 or total_raw.max() == total_raw.min()
    if not degenerate:
        proj_n = _minmax(proj_raw)
        photo_n = _minmax(photo_raw)
        total = proj_n + cfg.lam * photo_n
        scale = 1.0 + cfg.lam if cfg.lam > 0 else 1.0

        voxel = cfg.voxel_size if cfg.voxel_size is not None else _default_voxel(kept_cloud)
        clusters = cluster_points(kept_cloud, voxel)
        n_clusters = clusters.max() + 1
        sums = np.bincount(clusters, weights=total, minlength=n_clusters)
        counts = np.bincount(clusters, minlength=n_clusters)
        cluster_means = sums / counts
        if cfg.tau is not None:
            tau = cfg.tau
        elif n_clusters >= 2:
            tau = otsu_threshold(cluster_means / scale) * scale
        else:
            degenerate = True
            tau = float("nan")
        if not degenerate:
            point_scores = cluster_means[clusters]
            flags[kept] = point_scores > tau
            scores = RefineScores(agg_proj=proj_n, agg_photo=photo_n, agg_total=total)

    if degenerate:
        warnings.warn(
            "refinement scores carry no signal; keeping the initial mask",
            DegenerateRefinement,
        )
        flags = inherited.copy()
        clusters = np.zeros(len(kept), dtype=np.int64)
        tau = float("nan")
        z = np.zeros(len(kept))
        scores = RefineScores(agg_proj=z, agg_photo=z.copy(), agg_total=z.copy())
    else:
        flags[removed] = inherited[removed]

    cloud.dynamic_flag = flags

    # rasterize: stamp each sampled point's flag over its stride block,
    # anything never sampled keeps the initial label
    pixel = base_pixel.copy()
    s = cfg.pixel_stride
    gh = -(-H // s)
    gw = -(-W // s)
    for f in range(F):
        in_f = src[:, 0] == f
        if not in_f.any():
            continue
        small = np.full((gh, gw), -1, dtype=np.int8)
        small[src[in_f, 1] // s, src[in_f, 2] // s] = flags[in_f]
        up = np.repeat(np.repeat(small, s, axis=0), s, axis=1)[:H, :W]
        pixel[f] = np.where(up >= 0, up.astype(bool), pixel[f])

    alpha = 0.0 if degenerate else float(min(max(tau / (1.0 + cfg.lam), 0.0), 1.0))
    mask = DynamicMask(values=pixel, alpha=alpha, resolution="pixel")
    return RefineResult(
        mask=mask, cloud=cloud, scores=scores, kept=kept, removed=removed,
        clusters=clusters, tau=tau, degenerate=degenerate,
    )


def refine_masks(
    fs: FrameSet,
    initial: DynamicMask,
    cfg: RefineConfig = RefineConfig(),
    threads: int = 1,
) -> tuple[DynamicMask, PointCloud]:
    """Refined pixel-level masks plus the flagged refinement cloud."""
    res = refine_scene(fs, initial, cfg, threads)
    return res.mask, res.cloud
