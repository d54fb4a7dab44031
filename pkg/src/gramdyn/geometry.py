"""Pinhole camera kernels.

Conventions: x right, y down, z forward. ``rotation`` / ``translation``
map world to camera (X_c = R X + t). Pixel coordinates are continuous,
with integer (u, v) at pixel centers; u indexes columns, v rows.
Depth value 0 marks an invalid measurement everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ValidationError


@dataclass
class CameraParams:
    """Pinhole intrinsics plus a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3, world-to-camera
    translation: np.ndarray  # 3-vector, world-to-camera

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self, tol: float = 1e-5) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise ValidationError("camera pose contains non-finite values")
        if np.abs(R @ R.T - np.eye(3)).max() > tol:
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > tol:
            raise ValidationError("rotation determinant is not +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class ProjectionSample:
    """Projection of one or more world points into a view.

    Arrays share the leading shape of the input points. Where ``visible``
    is False, ``r_d`` is NaN and must not be consumed.
    """

    u: np.ndarray
    v: np.ndarray
    d: np.ndarray
    visible: np.ndarray
    r_d: np.ndarray


@dataclass
class ResidualGradient:
    """Gradient of the depth residual w.r.t. the world point."""

    grad: np.ndarray = field(default_factory=lambda: np.zeros(3))


def bilinear_sample(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinearly sample ``grid`` (H x W or H x W x C) at continuous (u, v).

    Coordinates must already be inside [0, W-1] x [0, H-1].
    """
    H, W = grid.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, W - 2) if W > 1 else np.zeros_like(u, np.int64)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, H - 2) if H > 1 else np.zeros_like(v, np.int64)
    u1, v1 = u0 + (1 if W > 1 else 0), v0 + (1 if H > 1 else 0)
    fu, fv = u - u0, v - v0
    if grid.ndim == 3:
        fu, fv = fu[..., None], fv[..., None]
    g00, g01 = grid[v0, u0], grid[v0, u1]
    g10, g11 = grid[v1, u0], grid[v1, u1]
    return (
        g00 * (1 - fu) * (1 - fv)
        + g01 * fu * (1 - fv)
        + g10 * (1 - fu) * fv
        + g11 * fu * fv
    )


def bilinear_depth(depth: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth sample plus validity.

    A sample is invalid if any of its four support pixels has depth 0.
    """
    H, W = depth.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    support_valid = (
        (depth[v0, u0] > 0)
        & (depth[v0, u1] > 0)
        & (depth[v1, u0] > 0)
        & (depth[v1, u1] > 0)
    )
    return bilinear_sample(depth, u, v), support_valid


def project(
    X: np.ndarray,
    cam: CameraParams,
    depth_map: np.ndarray,
    mask: np.ndarray | None = None,
    occlusion_margin: float = np.inf,
) -> ProjectionSample:
    """Project world points into a view and compare against its depth map.

    A point is visible iff it is in front of the camera, lands inside the
    image, its bilinear depth sample is valid, and its depth residual does
    not exceed ``occlusion_margin`` (a point far behind the observed
    surface is occluded; points in front keep their residual). ``mask``
    (optional, H x W) marks pixels whose samples are invalid.
    """
    pts = np.asarray(X, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    H, W = depth_map.shape

    Xc = pts @ cam.rotation.T + cam.translation
    d = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * Xc[:, 0] / d + cam.cx
        v = cam.fy * Xc[:, 1] / d + cam.cy
    in_front = d > 0
    in_bounds = in_front & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)

    r_d = np.full(len(pts), np.nan)
    visible = in_bounds.copy()
    if in_bounds.any():
        uu, vv = u[in_bounds], v[in_bounds]
        sample, valid = bilinear_depth(depth_map, uu, vv)
        if mask is not None:
            valid = valid & ~mask[np.rint(vv).astype(np.int64), np.rint(uu).astype(np.int64)]
        res = d[in_bounds] - sample
        valid = valid & (res <= occlusion_margin)
        res = np.where(valid, res, np.nan)
        visible[in_bounds] = valid
        r_d[in_bounds] = res
    r_d[~visible] = np.nan

    if single:
        return ProjectionSample(
            u=float(u[0]), v=float(v[0]), d=float(d[0]),
            visible=bool(visible[0]), r_d=float(r_d[0]),
        )
    return ProjectionSample(u=u, v=v, d=d, visible=visible, r_d=r_d)


def unproject(
    depth: np.ndarray,
    cam: CameraParams,
    image: np.ndarray | None = None,
    frame_index: int = 0,
    stride: int = 1,
):
    """Lift every valid-depth pixel (on a stride grid) to a world point.

    Returns a :class:`~gramdyn.frameset.PointCloud` with colors from
    ``image`` (zeros if absent) and (frame, row, col) source indices.
    """
    from .frameset import PointCloud  # avoid a module cycle

    H, W = depth.shape
    vs = np.arange(0, H, stride)
    us = np.arange(0, W, stride)
    dd = depth[np.ix_(vs, us)]
    valid = dd > 0
    rows, cols = np.nonzero(valid)
    v = vs[rows].astype(np.float64)
    u = us[cols].astype(np.float64)
    d = dd[valid].astype(np.float64)

    x = (u - cam.cx) / cam.fx * d
    y = (v - cam.cy) / cam.fy * d
    Xc = np.stack([x, y, d], axis=1)
    Xw = (Xc - cam.translation) @ cam.rotation

    if image is not None:
        colors = image[vs[rows], us[cols]].astype(np.float64)
    else:
        colors = np.zeros((len(d), 3))
    source = np.stack(
        [np.full(len(d), frame_index, dtype=np.int64), vs[rows], us[cols]], axis=1
    )
    return PointCloud(
        positions=Xw,
        colors=colors,
        dynamic_flag=np.zeros(len(d), dtype=bool),
        source=source,
    )


def depth_gradient(depth: np.ndarray) -> np.ndarray:
    """Spatial gradient of a depth map, H x W x 2 as (d/du, d/dv).

    Central differences inside, one-sided at borders; any invalid-depth
    pixel in the stencil (or the pixel itself) zeroes the gradient there.
    """
    D = depth.astype(np.float64)
    valid = D > 0
    H, W = D.shape
    grad = np.zeros((H, W, 2))

    def _axis_gradient(arr, ok, axis):
        g = np.zeros_like(arr)
        good = np.zeros_like(ok)
        sl = [slice(None)] * 2

        def at(s):
            sl2 = list(sl)
            sl2[axis] = s
            return tuple(sl2)

        n = arr.shape[axis]
        if n >= 3:
            g[at(slice(1, -1))] = (arr[at(slice(2, None))] - arr[at(slice(None, -2))]) / 2.0
            good[at(slice(1, -1))] = (
                ok[at(slice(2, None))] & ok[at(slice(1, -1))] & ok[at(slice(None, -2))]
            )
        if n >= 2:
            g[at(0)] = arr[at(1)] - arr[at(0)]
            good[at(0)] = ok[at(0)] & ok[at(1)]
            g[at(n - 1)] = arr[at(n - 1)] - arr[at(n - 2)]
            good[at(n - 1)] = ok[at(n - 1)] & ok[at(n - 2)]
        return np.where(good, g, 0.0)

    grad[..., 0] = _axis_gradient(D, valid, axis=1)
    grad[..., 1] = _axis_gradient(D, valid, axis=0)
    return grad


def residual_gradient(
    X: np.ndarray,
    cam: CameraParams,
    depth_map: np.ndarray,
    depth_grad: np.ndarray,
    occlusion_margin: float = np.inf,
) -> ResidualGradient:
    """Analytic gradient of the depth residual w.r.t. the world point.

    grad = R_row3 - (dD/du * J_u + dD/dv * J_v) with the projection
    Jacobians J_u = (fx/z) R_row1 - (fx x / z^2) R_row3 and the
    symmetric J_v, all evaluated at the point's projection.
    """
    sample = project(X, cam, depth_map, occlusion_margin=occlusion_margin)
    if not sample.visible:
        raise ContractViolation("residual_gradient requires a visible point")
    grad = _residual_gradients_batch(
        np.asarray(X, dtype=np.float64)[None, :],
        cam,
        depth_grad,
        np.array([sample.u]),
        np.array([sample.v]),
    )[0]
    return ResidualGradient(grad=grad)


def _residual_gradients_batch(
    pts: np.ndarray,
    cam: CameraParams,
    depth_grad: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
) -> np.ndarray:
    """Batched residual gradients for points already known to be visible."""
    R = cam.rotation
    Xc = pts @ R.T + cam.translation
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    Du = bilinear_sample(depth_grad[..., 0], u, v)
    Dv = bilinear_sample(depth_grad[..., 1], u, v)
    Ju = (cam.fx / z)[:, None] * R[0] - (cam.fx * x / z**2)[:, None] * R[2]
    Jv = (cam.fy / z)[:, None] * R[1] - (cam.fy * y / z**2)[:, None] * R[2]
    return R[2] - (Du[:, None] * Ju + Dv[:, None] * Jv)
