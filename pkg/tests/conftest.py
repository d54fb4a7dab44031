import numpy as np
import pytest

from gramdyn.frameset import FrameSet
from gramdyn.geometry import CameraParams
from gramdyn.synth import (
    Albedo,
    CameraPath,
    FeatureModel,
    Motion,
    Primitive,
    SceneSpec,
    build_frameset,
    default_fixture_spec,
)


def small_scene_spec(seed: int = 3, **feature_overrides) -> SceneSpec:
    """12-frame 126x126 scene (9x9 tokens): fast enough for unit tests."""
    ground = Primitive(
        kind="plane", center=(0, 1.2, 4), normal=(0, -1, 0),
        albedo=Albedo(kind="checker", color=(0.75, 0.7, 0.65), color2=(0.45, 0.42, 0.4), cell=0.6),
    )
    wall = Primitive(
        kind="plane", center=(0, 0, 8), normal=(0, 0, -1),
        albedo=Albedo(kind="checker", color=(0.55, 0.6, 0.7), color2=(0.3, 0.32, 0.4), cell=0.8),
    )
    mover = Primitive(
        kind="sphere", center=(-1.2, -0.15, 4.2), radius=0.9,
        albedo=Albedo(kind="checker", color=(0.9, 0.25, 0.2), color2=(0.8, 0.55, 0.15), cell=0.7),
        motion=Motion(linear_velocity=(0.22, 0.0, 0.0)),
    )
    return SceneSpec(
        seed=seed, frame_count=12, image_size=(126, 126), patch_size=14,
        static_primitives=[ground, wall], dynamic_primitives=[mover],
        camera=CameraPath(kind="orbit", target=(0, 0.3, 4.5), radius=5.5, height=-1.0,
                          start_angle=-0.25, sweep=0.5),
        features=FeatureModel(**feature_overrides),
    )


@pytest.fixture(scope="session")
def small_fs() -> FrameSet:
    return build_frameset(small_scene_spec())


@pytest.fixture(scope="session")
def small_dir(tmp_path_factory):
    from gramdyn.synth import gen_scene

    out = tmp_path_factory.mktemp("scene") / "small"
    gen_scene(small_scene_spec(), out)
    return out


@pytest.fixture(scope="session")
def fixture_fs() -> FrameSet:
    """The standard 24-frame 518x518 fixture (seed 7), built once."""
    return build_frameset(default_fixture_spec(7))


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    from gramdyn.frameset import write_frameset
    from gramdyn.synth import default_fixture_spec, build_frameset

    out = tmp_path_factory.mktemp("fixture") / "default"
    write_frameset(build_frameset(default_fixture_spec(7)), out)
    return out


def tiny_frameset(F: int = 2, size: int = 28, P: int = 14, c: int = 4, cf: int = 3,
                  layers=(1, 4), seed: int = 0) -> FrameSet:
    """Hand-rolled minimal frame set with u8-exact image values."""
    rng = np.random.default_rng(seed)
    H = W = size
    Np = (H // P) * (W // P)
    images = rng.integers(0, 256, size=(F, H, W, 3)).astype(np.float32) / 255.0
    depths = rng.uniform(1.0, 5.0, size=(F, H, W)).astype(np.float32)
    cams = []
    for _ in range(F):
        cams.append(CameraParams(fx=100.0, fy=100.0, cx=(W - 1) / 2, cy=(H - 1) / 2,
                                 rotation=np.eye(3), translation=rng.normal(size=3)))
    q = {l: rng.normal(size=(F, Np, c)).astype(np.float32) for l in layers}
    k = {l: rng.normal(size=(F, Np, c)).astype(np.float32) for l in layers}
    features = rng.normal(size=(F, Np, cf)).astype(np.float32)
    return FrameSet(images=images, depths=depths, cameras=cams, patch_size=P,
                    q=q, k=k, features=features)
