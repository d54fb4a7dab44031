"""Early-stage key suppression and a reference masked-attention check.

The suppression blob replicates the patch-level dynamic mask across the
chosen early layers; a downstream model runner applies it as a -inf
attention bias on the suppressed key columns (canonical mode) or by
zeroing the key vectors. ``masked_attention_reference`` is the numeric
ground truth for either mode.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateAttention, SchemaError, SuppressionSkipped, ValidationError
from .masking import DynamicMask
from .vg4t import read_blob, write_blob

DEFAULT_SUPPRESS_LAYERS = (1, 2, 3, 4, 5)
MODES = ("neg-inf-bias", "zero-key")


@dataclass
class KeySuppression:
    layers: tuple[int, ...]
    mask: np.ndarray  # L x F x Np bool, True = suppress
    mode: str = "neg-inf-bias"

    def validate(self) -> None:
        if len(self.layers) == 0:
            raise ValidationError("suppression needs at least one layer")
        if self.mode not in MODES:
            raise ValidationError(f"unknown suppression mode {self.mode!r}")
        if self.mask.ndim != 3 or self.mask.shape[0] != len(self.layers):
            raise SchemaError(
                f"suppression mask must be |layers| x F x Np, got {self.mask.shape}"
            )


def build_key_suppression(
    masks: DynamicMask,
    layers: tuple[int, ...] = DEFAULT_SUPPRESS_LAYERS,
    mode: str = "neg-inf-bias",
) -> KeySuppression:
    """Replicate a patch-level mask across the given (sorted) layers.

    A (layer, frame) plane that would suppress every token is left
    unsuppressed with a warning: total masking is out of distribution
    for the downstream model.
    """
    if masks.resolution != "patch":
        raise ValidationError(
            "key suppression needs a patch-level mask; downsample pixel masks "
            "by per-patch majority vote first"
        )
    layers = tuple(sorted(set(int(l) for l in layers)))
    if not layers:
        raise ValidationError("suppression needs at least one layer")
    frame_mask = masks.values.astype(bool)
    full_frames = frame_mask.all(axis=1)
    if full_frames.any():
        warnings.warn(
            f"{int(full_frames.sum())} frame(s) would be fully suppressed; "
            "skipping suppression there",
            SuppressionSkipped,
        )
        frame_mask = frame_mask.copy()
        frame_mask[full_frames] = False
    blob = np.repeat(frame_mask[None, :, :], len(layers), axis=0)
    ks = KeySuppression(layers=layers, mask=blob, mode=mode)
    ks.validate()
    return ks


def save_key_suppression(ks: KeySuppression, blob_path: str | Path) -> None:
    """Write the u8 blob plus a JSON sidecar naming layers and mode."""
    ks.validate()
    blob_path = Path(blob_path)
    write_blob(blob_path, ks.mask.astype(np.uint8))
    sidecar = blob_path.with_suffix(".json")
    sidecar.write_text(json.dumps({"layers": list(ks.layers), "mode": ks.mode}, indent=1))


def load_key_suppression(blob_path: str | Path) -> KeySuppression:
    blob_path = Path(blob_path)
    mask = read_blob(blob_path).astype(bool)
    sidecar = blob_path.with_suffix(".json")
    meta = json.loads(sidecar.read_text())
    ks = KeySuppression(layers=tuple(meta["layers"]), mask=mask, mode=meta["mode"])
    ks.validate()
    return ks


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def plain_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """softmax(Q K^T / sqrt(c)) V, float64."""
    c = Q.shape[1]
    logits = (Q @ K.T) / np.sqrt(c)
    return _softmax_rows(logits) @ V


def masked_attention_reference(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    suppressed: np.ndarray,
    mode: str = "neg-inf-bias",
) -> np.ndarray:
    """Attention output with the given keys suppressed.

    neg-inf-bias adds -inf to the suppressed logit columns, removing
    those keys from the softmax exactly; zero-key zeroes the key vectors
    before the product (they then contribute uniform logits). With no
    key suppressed, the plain-attention code path runs unchanged.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    suppressed = np.asarray(suppressed, dtype=bool)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise SchemaError("Q, K, V must be 2-D")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0] or suppressed.shape != (K.shape[0],):
        raise SchemaError(
            f"shape mismatch: Q{Q.shape} K{K.shape} V{V.shape} suppressed{suppressed.shape}"
        )
    if mode not in MODES:
        raise ValidationError(f"unknown suppression mode {mode!r}")
    if not suppressed.any():
        return plain_attention(Q, K, V)
    if suppressed.all():
        raise DegenerateAttention(
            "every key suppressed; leave the row unmasked instead"
        )
    if mode == "zero-key":
        K2 = K.copy()
        K2[suppressed] = 0.0
        return plain_attention(Q, K2, V)
    c = Q.shape[1]
    logits = (Q @ K.T) / np.sqrt(c)
    logits[:, suppressed] = -np.inf
    return _softmax_rows(logits) @ V
