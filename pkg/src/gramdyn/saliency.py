"""Dynamic saliency: fuse per-band Gram statistics into one map.

Band recipes (operands min-max normalized per frame first, outputs
re-normalized):

* shallow: (1 - S_KK) * V_QK on the shallow layers
* middle:   1 - S_QQ        on the middle layers
* deep:    (1 - V_QQ) * S_QQ with separate variance/mean layer sets

The final saliency is the elementwise product of the three bands.
A constant row normalizes to all zeros: a statistic with no spread
carries no evidence of dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, SchemaError
from .frameset import FrameSet
from .gramstats import GramStatMaps, LayerGroup, WindowSpec, aggregate_stats

BANDS = ("shallow", "middle", "deep")


@dataclass
class SaliencyConfig:
    shallow_layers: tuple[int, ...] = (1,)
    middle_layers: tuple[int, ...] = (4, 5, 6, 7, 8)
    deep_var_layers: tuple[int, ...] = (19, 20)
    deep_mean_layers: tuple[int, ...] = (18, 19, 20, 21, 22)
    window: WindowSpec = field(default_factory=WindowSpec)

    def required_groups(self) -> list[LayerGroup]:
        return [
            LayerGroup("KK", tuple(self.shallow_layers)),
            LayerGroup("QK", tuple(self.shallow_layers)),
            LayerGroup("QQ", tuple(self.middle_layers)),
            LayerGroup("QQ", tuple(self.deep_var_layers)),
            LayerGroup("QQ", tuple(self.deep_mean_layers)),
        ]

    def validate_against(self, fs: FrameSet) -> None:
        available = set(fs.layer_ids)
        for grp in self.required_groups():
            missing = [l for l in grp.layers if l not in available]
            if missing:
                raise SchemaError(
                    f"saliency config needs layer(s) {missing} ({grp.kind}) "
                    f"not present in frame set (has {sorted(available)})"
                )


@dataclass
class SaliencyMap:
    """Per-frame, per-token saliency with its three band components."""

    dyn: np.ndarray  # F x Np in [0, 1]
    w_shallow: np.ndarray
    w_middle: np.ndarray
    w_deep: np.ndarray


StatsKey = tuple[str, tuple[int, ...]]


CONSTANT_ROW_SPAN = 1e-12


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max normalize each frame row to [0, 1]; constant rows map to 0.

    A row whose span is below 1e-12 counts as constant: stretching
    floating-point dust to full scale would fabricate signal.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericalError("normalize_map requires finite input")
    lo = m.min(axis=-1, keepdims=True)
    hi = m.max(axis=-1, keepdims=True)
    span = hi - lo
    out = np.zeros_like(m)
    np.divide(m - lo, span, out=out, where=span > CONSTANT_ROW_SPAN)
    return out


def compute_band(
    kind: str,
    stats: dict[StatsKey, GramStatMaps],
    cfg: SaliencyConfig | None = None,
) -> np.ndarray:
    """One band of the saliency product, already re-normalized to [0, 1]."""
    cfg = cfg or SaliencyConfig()

    def need(stat_kind: str, layers: tuple[int, ...], which: str) -> np.ndarray:
        maps = stats.get((stat_kind, tuple(layers)))
        if maps is None:
            raise SchemaError(
                f"band {kind!r} needs {which} of {stat_kind} over layers {tuple(layers)}"
            )
        return maps.S if which == "S" else maps.V

    if kind == "shallow":
        s_kk = normalize_map(need("KK", cfg.shallow_layers, "S"))
        v_qk = normalize_map(need("QK", cfg.shallow_layers, "V"))
        band = (1.0 - s_kk) * v_qk
    elif kind == "middle":
        band = 1.0 - normalize_map(need("QQ", cfg.middle_layers, "S"))
    elif kind == "deep":
        v_qq = normalize_map(need("QQ", cfg.deep_var_layers, "V"))
        s_qq = normalize_map(need("QQ", cfg.deep_mean_layers, "S"))
        band = (1.0 - v_qq) * s_qq
    else:
        raise SchemaError(f"unknown band {kind!r}, expected one of {BANDS}")
    return normalize_map(band)


def compute_dyn(
    w_shallow: np.ndarray, w_middle: np.ndarray, w_deep: np.ndarray
) -> SaliencyMap:
    """Elementwise product of the three bands, re-normalized per frame."""
    if not (w_shallow.shape == w_middle.shape == w_deep.shape):
        raise SchemaError(
            f"band shapes differ: {w_shallow.shape} {w_middle.shape} {w_deep.shape}"
        )
    dyn = normalize_map(w_shallow * w_middle * w_deep)
    return SaliencyMap(dyn=dyn, w_shallow=w_shallow, w_middle=w_middle, w_deep=w_deep)


def collect_stats(
    fs: FrameSet, cfg: SaliencyConfig, threads: int = 1
) -> dict[StatsKey, GramStatMaps]:
    """Run aggregate_stats for every group the config needs."""
    cfg.validate_against(fs)
    out: dict[StatsKey, GramStatMaps] = {}
    for grp in cfg.required_groups():
        key = (grp.kind, grp.layers)
        if key not in out:
            out[key] = aggregate_stats(fs, grp, cfg.window, threads=threads)
    return out


def mine_saliency(fs: FrameSet, cfg: SaliencyConfig | None = None, threads: int = 1) -> SaliencyMap:
    """Full mining stage: statistics for all groups, then band fusion."""
    cfg = cfg or SaliencyConfig()
    stats = collect_stats(fs, cfg, threads=threads)
    return compute_dyn(
        compute_band("shallow", stats, cfg),
        compute_band("middle", stats, cfg),
        compute_band("deep", stats, cfg),
    )
