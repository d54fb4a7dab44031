import numpy as np
import pytest
from scipy import ndimage

from gramdyn.errors import DegenerateRefinement, ValidationError
from gramdyn.frameset import PointCloud
from gramdyn.geometry import unproject
from gramdyn.masking import DynamicMask, patch_to_pixel, pixel_to_patch
from gramdyn.metrics import boundary_f, iou
from gramdyn.refine import (
    RefineConfig,
    agg_photo,
    agg_proj,
    cluster_points,
    refine_masks,
    refine_scene,
    sor_filter,
    view_scores,
)
from gramdyn.synth import (
    Albedo,
    CameraPath,
    Motion,
    Primitive,
    SceneSpec,
    build_frameset,
)

from .conftest import small_scene_spec


def empty_mask(fs):
    return DynamicMask(
        values=np.zeros((fs.frame_count, fs.token_count), bool),
        alpha=0.0, resolution="patch",
    )


def gt_patch_mask(fs):
    return DynamicMask(
        values=pixel_to_patch(fs.gt_masks, fs.patch_size), alpha=0.5, resolution="patch"
    )


def sample_points(fs, dynamic: bool, frame=0, count=40, rng_seed=0):
    """Unproject a handful of GT-dynamic or GT-static pixels of one frame."""
    sel = fs.gt_masks[frame] if dynamic else ~fs.gt_masks[frame]
    depth = np.where(sel, fs.depths[frame], 0.0).astype(np.float64)
    pc = unproject(depth, fs.cameras[frame], fs.images[frame], frame)
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(len(pc), size=min(count, len(pc)), replace=False)
    return pc.subset(idx)


def cloud_from(pos, colors=None, frame=0):
    pos = np.asarray(pos, float)
    return PointCloud(
        positions=pos,
        colors=np.zeros_like(pos) if colors is None else np.asarray(colors, float),
        dynamic_flag=np.zeros(len(pos), bool),
        source=np.column_stack([
            np.full(len(pos), frame), np.zeros(len(pos)), np.zeros(len(pos)),
        ]).astype(np.int64),
    )


# -- aggregated scores -------------------------------------------------------


def test_static_surface_points_score_near_zero():
    # camera translating parallel to a wall: depth maps are constant, the
    # bilinear sample is exact and the residual vanishes
    wall = Primitive(kind="plane", center=(0, 0, 5), normal=(0, 0, -1),
                     albedo=Albedo(kind="checker", cell=0.5))
    mover = Primitive(kind="sphere", center=(-1.5, -1.2, 3.0), radius=0.4,
                      motion=Motion(linear_velocity=(0.4, 0, 0)))
    spec = SceneSpec(
        seed=1, frame_count=6, image_size=(126, 126), patch_size=14,
        static_primitives=[wall], dynamic_primitives=[mover],
        camera=CameraPath(kind="linear", start=(-0.5, 0, 0), end=(0.5, 0, 0),
                          target=(0, 0, 1e9)),
    )
    fs = build_frameset(spec)
    sel = ~fs.gt_masks[0]
    sel[:20] = False  # stay clear of image borders
    sel[-20:] = False
    depth = np.where(sel, fs.depths[0], 0.0).astype(np.float64)
    pc = unproject(depth, fs.cameras[0], fs.images[0], 0, stride=8)
    scores = agg_proj(pc, fs, empty_mask(fs))
    assert scores.max() < 1e-6


def test_static_surface_scores_small_on_slanted_views(small_fs):
    # slanted planes at coarse resolution: bounded by bilinear sampling error
    frame = 0
    wall = ~small_fs.gt_masks[frame]
    wall[40:, :] = False
    depth = np.where(wall, small_fs.depths[frame], 0.0).astype(np.float64)
    pc = unproject(depth, small_fs.cameras[frame], small_fs.images[frame], frame, stride=8)
    scores = agg_proj(pc, small_fs, empty_mask(small_fs))
    assert scores.max() < 1e-4


def test_full_mask_zeroes_all_scores(small_fs):
    ones = DynamicMask(
        values=np.ones((small_fs.frame_count, small_fs.token_count), bool),
        alpha=0.0, resolution="patch",
    )
    pc = sample_points(small_fs, dynamic=True)
    proj, photo = view_scores(pc, small_fs, ones)
    assert np.all(proj == 0.0)
    assert np.all(photo == 0.0)


def test_dynamic_scores_dominate_static(small_fs):
    masks = gt_patch_mask(small_fs)
    dyn = agg_proj(sample_points(small_fs, True), small_fs, masks)
    sta = agg_proj(sample_points(small_fs, False), small_fs, masks)
    wins = (dyn[:, None] > sta[None, :]).mean()
    assert wins >= 0.95


def test_photo_uniform_color_scene():
    gray = Albedo(kind="solid", color=(0.5, 0.5, 0.5))
    spec = SceneSpec(
        seed=2, frame_count=4, image_size=(70, 70), patch_size=14,
        static_primitives=[
            Primitive(kind="plane", center=(0, 1.2, 4), normal=(0, -1, 0), albedo=gray),
            Primitive(kind="plane", center=(0, 0, 8), normal=(0, 0, -1), albedo=gray),
        ],
        dynamic_primitives=[
            Primitive(kind="sphere", center=(-0.8, 0.1, 4.2), radius=0.7, albedo=gray,
                      motion=Motion(linear_velocity=(0.3, 0, 0))),
        ],
        camera=CameraPath(kind="orbit", target=(0, 0.3, 4.5), radius=5.5, height=-1.0,
                          start_angle=-0.2, sweep=0.4),
    )
    fs = build_frameset(spec)
    pc = sample_points(fs, dynamic=False, count=30)
    photo = agg_photo(pc, fs, empty_mask(fs))
    assert photo.max() < 1e-12


def test_photo_single_view_unit_residual():
    from .conftest import tiny_frameset

    fs = tiny_frameset(F=2, size=98, P=14, c=4)
    fs.images[:] = 0.0  # black frames
    fs.depths[:] = 1.0
    for cam in fs.cameras:
        cam.translation = np.zeros(3)
        cam.cx = cam.cy = 48.5
    pc = cloud_from([[0.0, 0.0, 1.0]], colors=[[1.0, 0.0, 0.0]], frame=0)
    photo = agg_photo(pc, fs, empty_mask(fs))
    assert photo[0] == pytest.approx(1.0, abs=1e-9)


def test_textureless_wall_photo_separates_where_proj_fails():
    wall = Primitive(kind="plane", center=(0, 0, 5), normal=(0, 0, -1),
                     albedo=Albedo(kind="solid", color=(0.5, 0.5, 0.5)))
    slider = Primitive(
        kind="plane", center=(0, 0, 4.999), normal=(0, 0, -1), extent=(0.7, 0.7),
        albedo=Albedo(kind="solid", color=(0.9, 0.1, 0.1)),
        motion=Motion(linear_velocity=(0.35, 0.0, 0.0)),
    )
    spec = SceneSpec(
        seed=5, frame_count=8, image_size=(126, 126), patch_size=14,
        static_primitives=[wall], dynamic_primitives=[slider],
        camera=CameraPath(kind="linear", start=(-0.5, -0.2, 0), end=(0.5, 0.2, 0),
                          target=(0, 0, 5)),
    )
    fs = build_frameset(spec)
    masks = gt_patch_mask(fs)
    dyn_pc = sample_points(fs, True, count=40, rng_seed=1)
    sta_pc = sample_points(fs, False, count=40, rng_seed=1)
    dyn_proj, dyn_photo = view_scores(dyn_pc, fs, masks)
    sta_proj, sta_photo = view_scores(sta_pc, fs, masks)
    # flush geometry: the depth residual carries no information
    assert dyn_proj.max() < 5e-3
    # color carries all of it
    wins = (dyn_photo[:, None] > sta_photo[None, :]).mean()
    assert wins >= 0.95
    assert dyn_photo.mean() > 10 * max(sta_photo.mean(), 1e-9)


# -- SOR ----------------------------------------------------------------------


def brute_force_sor(positions, k, sigma):
    n = len(positions)
    means = np.empty(n)
    for i in range(n):
        d = np.sqrt(((positions - positions[i]) ** 2).sum(axis=1))
        d = np.sort(d)[1 : k + 1]  # drop self
        means[i] = d.mean()
    thr = means.mean() + sigma * means.std()
    return set(np.nonzero(means > thr)[0].tolist())


def test_sor_removes_single_far_point():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    pts /= np.maximum(np.linalg.norm(pts, axis=1, keepdims=True), 1.0)  # unit ball
    pts = np.vstack([pts, [[100.0, 0.0, 0.0]]])
    kept, removed = sor_filter(cloud_from(pts), k=20, sigma=2.5)
    assert list(removed) == [50]
    assert len(kept) == 50


def test_sor_coincident_points_none_removed():
    pts = np.zeros((30, 3))
    kept, removed = sor_filter(cloud_from(pts), k=5, sigma=2.5)
    assert len(removed) == 0


def uniform_ball(rng, n, center):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(size=(n, 1)) ** (1 / 3) + center


def test_sor_two_dense_clusters_none_removed():
    # uniform balls (no density tails); the oracle confirms every mean
    # k-NN distance stays within mean + 2.5 sigma for this instance
    rng = np.random.default_rng(0)
    pts = np.vstack([uniform_ball(rng, 100, (0, 0, 0)), uniform_ball(rng, 100, (50, 0, 0))])
    assert brute_force_sor(pts, 20, 2.5) == set()
    kept, removed = sor_filter(cloud_from(pts), k=20, sigma=2.5)
    assert len(removed) == 0


def test_sor_matches_brute_force_oracle():
    rng = np.random.default_rng(42)
    for _ in range(20):
        n = int(rng.integers(30, 300))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.5, 3.0)
        if rng.uniform() < 0.5:  # sprinkle outliers
            m = int(rng.integers(1, 5))
            pts[:m] += rng.normal(scale=30.0, size=(m, 3))
        kept, removed = sor_filter(cloud_from(pts), k=20, sigma=2.5)
        assert set(removed.tolist()) == brute_force_sor(pts, 20, 2.5)
        assert set(kept.tolist()) | set(removed.tolist()) == set(range(n))


def test_sor_needs_more_points_than_k():
    with pytest.raises(ValidationError):
        sor_filter(cloud_from(np.zeros((5, 3))), k=10)


# -- voxel clustering ---------------------------------------------------------


def test_cluster_two_blobs():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(50, 3))
    b = rng.uniform(size=(50, 3)) + [10.0, 0, 0]
    labels = cluster_points(cloud_from(np.vstack([a, b])), voxel=1.0)
    assert labels[:50].max() == labels[:50].min() == 0
    assert labels[50:].max() == labels[50:].min() == 1


def test_cluster_single_blob():
    rng = np.random.default_rng(4)
    labels = cluster_points(cloud_from(rng.uniform(size=(80, 3))), voxel=0.5)
    assert np.all(labels == 0)


def test_cluster_labels_ordered_by_first_point():
    pts = np.array([[5.0, 0, 0], [0.0, 0, 0], [5.1, 0, 0], [0.1, 0, 0]])
    labels = cluster_points(cloud_from(pts), voxel=0.5)
    assert labels[0] == 0  # the cluster containing point 0 gets id 0
    assert labels[1] == 1
    assert np.array_equal(labels, [0, 1, 0, 1])


def test_cluster_diagonal_voxels_connect():
    pts = np.array([[0.0, 0, 0], [0.9, 0.9, 0.9]])  # adjacent corners
    labels = cluster_points(cloud_from(pts), voxel=0.5)
    assert labels[0] == labels[1]


def test_moving_object_forms_own_cluster(small_fs):
    res = refine_scene(small_fs, gt_patch_mask(small_fs), RefineConfig())
    kept_src = res.cloud.source[res.kept]
    gt_dyn = small_fs.gt_masks[kept_src[:, 0], kept_src[:, 1], kept_src[:, 2]]
    dyn_labels = np.unique(res.clusters[gt_dyn])
    sta_labels = np.unique(res.clusters[~gt_dyn])
    # the dominant dynamic cluster contains (almost) no static points
    main = np.bincount(res.clusters[gt_dyn]).argmax()
    assert main in dyn_labels
    overlap = (res.clusters[~gt_dyn] == main).mean()
    assert overlap < 0.01
    assert len(sta_labels) >= 1


# -- full refinement ----------------------------------------------------------


def pixel_jm(values, gt):
    return float(np.mean([iou(values[f], gt[f]) for f in range(len(gt))]))


def pixel_fm(values, gt):
    return float(np.mean([boundary_f(values[f], gt[f]) for f in range(len(gt))]))


def test_refine_no_regression_from_gt_mask(small_fs):
    initial = gt_patch_mask(small_fs)
    H, W = small_fs.image_size
    up = patch_to_pixel(initial.values, H, W, small_fs.patch_size)
    base_jm = pixel_jm(up, small_fs.gt_masks)
    mask, cloud = refine_masks(small_fs, initial, RefineConfig())
    refined_jm = pixel_jm(mask.values, small_fs.gt_masks)
    assert refined_jm >= base_jm - 0.01
    assert mask.resolution == "pixel"
    assert cloud.dynamic_flag.any()


def test_refine_improves_dilated_mask_boundaries(small_fs):
    gt_tokens = pixel_to_patch(small_fs.gt_masks, small_fs.patch_size)
    F = small_fs.frame_count
    gh, gw = small_fs.grid_size
    grid = gt_tokens.reshape(F, gh, gw)
    dilated = np.stack([ndimage.binary_dilation(g, iterations=2) for g in grid])
    initial = DynamicMask(values=dilated.reshape(F, -1), alpha=0.5, resolution="patch")

    H, W = small_fs.image_size
    up = patch_to_pixel(initial.values, H, W, small_fs.patch_size)
    base_fm = pixel_fm(up, small_fs.gt_masks)
    mask, _ = refine_masks(small_fs, initial, RefineConfig())
    refined_fm = pixel_fm(mask.values, small_fs.gt_masks)
    assert refined_fm > base_fm


def test_refine_all_dynamic_mask_falls_back(small_fs):
    ones = DynamicMask(
        values=np.ones((small_fs.frame_count, small_fs.token_count), bool),
        alpha=0.0, resolution="patch",
    )
    with pytest.warns(DegenerateRefinement):
        mask, cloud = refine_masks(small_fs, ones, RefineConfig())
    assert mask.values.all()  # fell back to the initial all-dynamic mask
    assert cloud.dynamic_flag.all()


def test_refine_requires_patch_mask(small_fs):
    pix = DynamicMask(
        values=np.ones((small_fs.frame_count, *small_fs.image_size), bool),
        alpha=0.0, resolution="pixel",
    )
    with pytest.raises(ValidationError):
        refine_masks(small_fs, pix, RefineConfig())


def test_refine_scores_total_is_weighted_sum(small_fs):
    cfg = RefineConfig(lam=0.7)
    res = refine_scene(small_fs, gt_patch_mask(small_fs), cfg)
    assert not res.degenerate
    total = res.scores.agg_proj + 0.7 * res.scores.agg_photo
    assert np.allclose(res.scores.agg_total, total, atol=1e-12)
    assert res.scores.agg_proj.min() >= 0.0
    assert res.scores.agg_proj.max() <= 1.0


def test_refine_fixed_tau_override(small_fs):
    res = refine_scene(small_fs, gt_patch_mask(small_fs), RefineConfig(tau=1e9))
    assert not res.cloud.dynamic_flag[res.kept].any()
