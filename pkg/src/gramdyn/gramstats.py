"""Windowed Gram-similarity statistics over attention Q/K tensors.

For a reference frame t and each source frame s in its temporal window,
the per-token signal is the row mean of the scaled Gram map between the
two frames, averaged over the layers of a group. Its mean and population
variance across the window form the S and V maps.

The row mean of (A B^T) / sqrt(c) equals A @ colmean(B) / sqrt(c), so the
streaming path never materializes an Np x Np matrix; peak transient
memory stays O(Np) per (layer, t, s) work item plus the F x Np outputs,
i.e. linear in the frame count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError, ValidationError
from .frameset import FrameSet

KINDS = ("QQ", "QK", "KK")


@dataclass(frozen=True)
class WindowSpec:
    """Strided temporal window: n source frames on each side of t."""

    half_count: int = 3
    stride: int = 2

    def __post_init__(self):
        if self.half_count < 1 or self.stride < 1:
            raise ValidationError(
                f"window needs half_count >= 1 and stride >= 1, got {self}"
            )


@dataclass(frozen=True)
class LayerGroup:
    """A statistic kind (QQ, QK or KK) over a contiguous-or-not layer set."""

    kind: str
    layers: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if len(self.layers) == 0:
            raise ValidationError("layer group must name at least one layer")
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))


@dataclass
class GramStatMaps:
    """Windowed mean (S) and population variance (V), both F x Np."""

    S: np.ndarray
    V: np.ndarray
    group: LayerGroup
    window: WindowSpec


def gram_similarity(A: np.ndarray, B: np.ndarray, c: int) -> np.ndarray:
    """Scaled dot-product map A B^T / sqrt(c); no softmax, no normalization."""
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1] or A.shape[1] != c:
        raise SchemaError(
            f"gram_similarity needs Np x c operands with matching c={c}, "
            f"got {A.shape} and {B.shape}"
        )
    return (A @ B.T) / math.sqrt(c)


def window_indices(t: int, w: WindowSpec, frame_count: int) -> list[int]:
    """Source frames {t +/- k*stride, 1 <= k <= n} clipped to the sequence.

    Never empty for frame_count >= 2: if the strided set misses the
    sequence entirely, the nearest distinct frame is used instead.
    """
    if not 0 <= t < frame_count:
        raise ValidationError(f"frame index {t} outside [0, {frame_count})")
    out = []
    for k in range(w.half_count, 0, -1):
        s = t - k * w.stride
        if 0 <= s < frame_count:
            out.append(s)
    for k in range(1, w.half_count + 1):
        s = t + k * w.stride
        if 0 <= s < frame_count:
            out.append(s)
    if not out and frame_count >= 2:
        out = [t - 1 if t - 1 >= 0 else t + 1]
    return out


def _group_tensors(fs: FrameSet, group: LayerGroup):
    """Row-side and column-side tensors per layer for the given kind."""
    for lid in group.layers:
        if lid not in fs.q:
            raise SchemaError(f"layer {lid} not present in frame set (has {fs.layer_ids})")
    rows = fs.q if group.kind in ("QQ", "QK") else fs.k
    cols = fs.k if group.kind in ("QK", "KK") else fs.q
    return rows, cols


def aggregate_stats(
    fs: FrameSet,
    group: LayerGroup,
    w: WindowSpec = WindowSpec(),
    heads: int = 1,
    threads: int = 1,
) -> GramStatMaps:
    """Windowed per-token mean/variance of Gram row means for one group.

    ``heads`` > 1 splits the channel axis into that many heads and
    averages the per-head scaled Gram maps instead of a single full-width
    one. Reduction order is fixed (ascending s, then ascending layer), so
    results are bitwise identical for any ``threads``.
    """
    rows_t, cols_t = _group_tensors(fs, group)
    F = fs.frame_count
    Np = fs.token_count
    c = fs.channel_dim
    if heads < 1 or c % heads:
        raise ValidationError(f"channel dim {c} not divisible into {heads} heads")
    ch = c // heads
    scale = 1.0 / math.sqrt(ch)

    cache: dict[tuple[int, int], np.ndarray] = {}

    def colmean(lid: int, s: int) -> np.ndarray:
        key = (lid, s)
        if key not in cache:
            cache[key] = cols_t[lid][s].mean(axis=0, dtype=np.float64)
        return cache[key]

    def token_signal(t: int, s: int) -> np.ndarray:
        acc = np.zeros(Np)
        for lid in group.layers:
            m = colmean(lid, s)
            r = rows_t[lid][t]
            if heads == 1:
                acc += (r @ m) * scale
            else:
                rh = r.reshape(Np, heads, ch)
                mh = m.reshape(heads, ch)
                acc += np.einsum("phc,hc->p", rh, mh) * (scale / heads)
        return acc / len(group.layers)

    S = np.zeros((F, Np))
    V = np.zeros((F, Np))

    def one_frame(t: int):
        win = window_indices(t, w, F)
        vals = np.empty((len(win), Np))
        for i, s in enumerate(win):
            vals[i] = token_signal(t, s)
        return t, vals.mean(axis=0), vals.var(axis=0)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_frame, range(F)))
    else:
        results = [one_frame(t) for t in range(F)]
    for t, s_row, v_row in results:
        S[t] = s_row
        V[t] = v_row
    return GramStatMaps(S=S, V=V, group=group, window=w)
