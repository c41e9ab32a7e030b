"""Terrain-aware additive attention penalty.

A query patch at elevation h_i attending to a key patch at elevation h_j
pays -alpha * max(0, (h_j - h_i) / h0): looking uphill is penalized in
proportion to the climb, downhill and level attention are free. Entries
are clamped to [BIAS_LO, 0]; the clamp is hard, so saturated pairs stop
contributing gradient to the learnable scale alpha.

Elevations enter in meters (pre-normalization) because the reference
height h0 = 1000 m is dimensional; the [0, 1]-scaled elevation channel the
model consumes as input plays no role here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, ShapeError
from .fields import Field, GridSpec

H0_METERS = 1000.0    # reference climb normalizer
BIAS_LO = -10.0       # clamp floor; ceiling is 0
ALPHA_INIT = 2.0


@dataclass(frozen=True)
class ElevationBias:
    """The N x N additive logit penalty and the pieces it was built from."""

    patch_elev: np.ndarray   # (N,) meters
    alpha: float
    h0: float
    matrix: np.ndarray       # (N, N), entries in [BIAS_LO, 0]


def patch_elevations(elevation, spec: GridSpec) -> np.ndarray:
    """Mean elevation per patch, raster order, meters.

    `elevation` is either an (H, W) array or a Field with an "elev" channel.
    """
    if isinstance(elevation, Field):
        elevation = elevation.channel("elev")
    elev = np.asarray(elevation, dtype=np.float64)
    if elev.shape != (spec.height, spec.width):
        raise ShapeError(f"elevation shape {elev.shape}, expected {(spec.height, spec.width)}")
    p = spec.patch
    blocks = elev.reshape(spec.patches_y, p, spec.patches_x, p)
    return blocks.mean(axis=(1, 3)).reshape(spec.n_patches)


def uphill_matrix(patch_elev: np.ndarray, h0: float = H0_METERS) -> np.ndarray:
    """ReLU((h_j - h_i) / h0) for all patch pairs; row i = query, col j = key."""
    h = np.asarray(patch_elev, dtype=np.float64)
    if h.ndim != 1:
        raise ShapeError("patch elevations must be a flat vector")
    return np.maximum(0.0, (h[None, :] - h[:, None]) / h0)


def build_bias(
    patch_elev: np.ndarray,
    alpha: float = ALPHA_INIT,
    h0: float = H0_METERS,
    combine: str = "identity",
) -> ElevationBias:
    """Assemble the clamped penalty matrix for a fixed alpha value."""
    if not np.isfinite(alpha):
        raise DataError(f"alpha must be finite, got {alpha}")
    uphill = uphill_matrix(patch_elev, h0)
    raw = -float(alpha) * uphill
    matrix = np.clip(raw, BIAS_LO, 0.0)
    if combine == "row_correlation":
        matrix = _row_correlation(matrix)
    elif combine != "identity":
        raise ConfigError(f"unknown bias combine rule {combine!r}")
    return ElevationBias(np.asarray(patch_elev, dtype=np.float64), float(alpha), h0, matrix)


def bias_tensor(
    uphill_perm: np.ndarray, alpha: ad.Tensor, combine: str = "identity"
) -> ad.Tensor:
    """Differentiable bias from a precomputed (possibly permuted) uphill matrix.

    The permutation of rows/columns does not involve alpha, so callers
    permute the constant uphill matrix first and this stays a plain
    elementwise chain: clip(-alpha * uphill, BIAS_LO, 0).
    """
    if combine == "identity":
        return ad.clip((-alpha) * ad.as_tensor(uphill_perm), BIAS_LO, 0.0)
    if combine == "row_correlation":
        # Row normalization cancels alpha, so this variant is a constant
        # w.r.t. the tape and alpha receives no gradient under it.
        raw = np.clip(-float(alpha.data) * np.asarray(uphill_perm), BIAS_LO, 0.0)
        return ad.as_tensor(_row_correlation(raw))
    raise ConfigError(f"unknown bias combine rule {combine!r}")


def _row_correlation(matrix: np.ndarray) -> np.ndarray:
    """Cosine similarity of penalty rows, linearly rescaled onto [BIAS_LO, 0].

    Experimental alternative reading of "self-correlation": patches with
    similar uphill-penalty profiles (cosine near 1) keep bias near 0,
    dissimilar profiles approach the clamp floor.
    """
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = matrix / safe
    cos = unit @ unit.T
    return BIAS_LO * (1.0 - np.clip(cos, 0.0, 1.0))


def bias_gradient_alpha(
    patch_elev: np.ndarray, alpha: float, h0: float = H0_METERS
) -> np.ndarray:
    """Analytic d(bias)/d(alpha) per entry under the identity combine rule.

    -ReLU((h_j - h_i) / h0) wherever the clamp is inactive, 0 where the
    entry sits at or beyond a clamp boundary (subgradient 0 at the edge).
    """
    uphill = uphill_matrix(patch_elev, h0)
    raw = -float(alpha) * uphill
    interior = (raw > BIAS_LO) & (raw < 0.0)
    return np.where(interior, -uphill, 0.0)
