"""Evaluation metrics: segmentation, camera trajectory, reconstruction.

Trajectory errors follow the usual conventions for scale-ambiguous
pipelines: ATE is the RMSE of camera-center errors after a similarity
(Sim3) alignment, RTE/RRE compare consecutive relative motions, RRE in
degrees. Reconstruction metrics are directed nearest-neighbor distances
(prediction to GT = accuracy, GT to prediction = completeness) plus
their symmetric union.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import NumericalError, SchemaError, ValidationError
from .frameset import PointCloud
from .geometry import CameraParams

DEFAULT_BOUNDARY_TOL_FRACTION = 0.008  # of the image diagonal


@dataclass
class Trajectory:
    """Per-frame camera-to-world poses."""

    rotations: np.ndarray  # F x 3 x 3
    translations: np.ndarray  # F x 3 (camera centers)

    def __len__(self) -> int:
        return len(self.rotations)

    @classmethod
    def from_cameras(cls, cams: list[CameraParams]) -> "Trajectory":
        R = np.stack([c.rotation.T for c in cams])
        t = np.stack([c.center for c in cams])
        return cls(rotations=R, translations=t)

    def validate(self) -> None:
        for R in self.rotations:
            if np.abs(R @ R.T - np.eye(3)).max() > 1e-5 or abs(np.linalg.det(R) - 1) > 1e-5:
                raise ValidationError("trajectory rotation not orthonormal det +1")


@dataclass
class SegReport:
    JM: float
    JR: float
    FM: float
    FR: float
    per_sequence: list[dict]


@dataclass
class ReconReport:
    accuracy_mean: float
    accuracy_median: float
    completeness_mean: float
    completeness_median: float
    distance_mean: float
    distance_median: float

    def validate(self) -> None:
        vals = [
            self.accuracy_mean, self.accuracy_median,
            self.completeness_mean, self.completeness_median,
            self.distance_mean, self.distance_median,
        ]
        if any(v < 0 for v in vals):
            raise ValidationError("reconstruction distances must be non-negative")


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    if pred.shape != gt.shape:
        raise SchemaError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def _boundary(mask: np.ndarray) -> np.ndarray:
    """4-neighborhood transition pixels; outside the image is background."""
    m = mask.astype(bool)
    eroded = ndimage.binary_erosion(
        m, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool), border_value=0
    )
    return m & ~eroded


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: float | None = None) -> float:
    """Boundary F-measure with a pixel distance tolerance.

    Default tolerance is 0.8% of the image diagonal. Both boundaries
    empty scores 1, exactly one empty scores 0.
    """
    if pred.shape != gt.shape:
        raise SchemaError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    H, W = pred.shape
    if tol is None:
        tol = DEFAULT_BOUNDARY_TOL_FRACTION * np.hypot(H, W)
    pb = _boundary(pred)
    gb = _boundary(gt)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gb)
    dist_to_pred = ndimage.distance_transform_edt(~pb)
    precision = float((dist_to_gt[pb] <= tol).mean())
    recall = float((dist_to_pred[gb] <= tol).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def seg_report(
    pred: list[np.ndarray], gt: list[np.ndarray], tol: float | None = None
) -> SegReport:
    """Per-sequence means of IoU / boundary F, then averaged across sequences.

    ``pred`` and ``gt`` are aligned lists of per-sequence mask stacks
    (F x H x W each). Recall counts frames whose score exceeds 0.5.
    """
    if len(pred) == 0 or len(pred) != len(gt):
        raise ValidationError("seg_report needs equal, non-empty sequence lists")
    rows = []
    for seq_pred, seq_gt in zip(pred, gt):
        if seq_pred.shape != seq_gt.shape:
            raise SchemaError(f"sequence shapes differ: {seq_pred.shape} vs {seq_gt.shape}")
        js = np.array([iou(p, g) for p, g in zip(seq_pred, seq_gt)])
        fs = np.array([boundary_f(p, g, tol) for p, g in zip(seq_pred, seq_gt)])
        rows.append({
            "JM": float(js.mean()), "JR": float((js > 0.5).mean()),
            "FM": float(fs.mean()), "FR": float((fs > 0.5).mean()),
        })
    return SegReport(
        JM=float(np.mean([r["JM"] for r in rows])),
        JR=float(np.mean([r["JR"] for r in rows])),
        FM=float(np.mean([r["FM"] for r in rows])),
        FR=float(np.mean([r["FR"] for r in rows])),
        per_sequence=rows,
    )


def align_umeyama(
    est: Trajectory, gt: Trajectory, with_scale: bool = True
) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity (s, R, t) with gt ~= s R est + t on centers."""
    if len(est) != len(gt):
        raise ValidationError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    x = est.translations.astype(np.float64)
    y = gt.translations.astype(np.float64)
    n = len(x)
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    cov = yc.T @ xc / n
    var_x = (xc**2).sum() / n
    if var_x <= 0:
        raise NumericalError("degenerate trajectory: coincident camera centers")
    U, D, Vt = np.linalg.svd(cov)
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        raise NumericalError("degenerate trajectory: collinear camera centers")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return s, R, t


def _rotation_angle_deg(R: np.ndarray) -> float:
    # atan2 form stays accurate near 0 where arccos loses precision
    skew = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(np.linalg.norm(skew), cos)))


def traj_metrics(est: Trajectory, gt: Trajectory) -> tuple[float, float, float]:
    """(ATE, RTE, RRE): absolute center RMSE after Sim3 alignment, relative
    translation RMSE after scale correction, mean relative rotation angle
    in degrees, over consecutive frame pairs."""
    if len(est) != len(gt):
        raise ValidationError("trajectories must have equal length")
    if len(est) < 2:
        raise ValidationError("trajectory metrics need at least 2 frames")
    s, R, t = align_umeyama(est, gt, with_scale=True)
    aligned = est.translations @ R.T * s + t
    ate = float(np.sqrt(((aligned - gt.translations) ** 2).sum(axis=1).mean()))

    rte_sq = []
    rre = []
    for i in range(len(est) - 1):
        dt_est = s * (est.rotations[i].T @ (est.translations[i + 1] - est.translations[i]))
        dt_gt = gt.rotations[i].T @ (gt.translations[i + 1] - gt.translations[i])
        rte_sq.append(((dt_est - dt_gt) ** 2).sum())
        dR_est = est.rotations[i].T @ est.rotations[i + 1]
        dR_gt = gt.rotations[i].T @ gt.rotations[i + 1]
        rre.append(_rotation_angle_deg(dR_gt.T @ dR_est))
    rte = float(np.sqrt(np.mean(rte_sq)))
    return ate, rte, float(np.mean(rre))


def recon_metrics(
    pred: PointCloud,
    gt: PointCloud,
    align: tuple[float, np.ndarray, np.ndarray] | None = None,
) -> ReconReport:
    """Distance-based reconstruction quality after an optional alignment."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValidationError("recon_metrics needs non-empty point clouds")
    p = pred.positions.astype(np.float64)
    g = gt.positions.astype(np.float64)
    if align is not None:
        s, R, t = align
        p = p @ R.T * s + t
    d_pred = cKDTree(g).query(p, k=1, workers=-1)[0]
    d_gt = cKDTree(p).query(g, k=1, workers=-1)[0]
    both = np.concatenate([d_pred, d_gt])
    report = ReconReport(
        accuracy_mean=float(d_pred.mean()),
        accuracy_median=float(np.median(d_pred)),
        completeness_mean=float(d_gt.mean()),
        completeness_median=float(np.median(d_gt)),
        distance_mean=float(both.mean()),
        distance_median=float(np.median(both)),
    )
    report.validate()
    return report
