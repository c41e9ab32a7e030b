"""Wind-guided patch reordering: sector decomposition and projection sort.

Coordinate convention used throughout the package: +x runs along grid
columns, +y along grid rows, and the wind components (u, v) point along
(+x, +y). Patch coordinates are sector-local and normalized, with patch
centers at ((col_in_sector + 0.5) / c, (row_in_sector + 0.5) / r).

Each sector computes one dominant wind angle from its cells, projects its
patch centers onto that direction, and sorts patches by ascending
projection (ties broken by ascending raster index, stable). The k-th patch
along the wind then occupies the k-th of that sector's raster slots, so
the permutation never crosses sector boundaries and degenerates to the
identity when every sector keeps raster order. Sectors whose cells carry
exactly zero wind skip the projection sort and keep raster order outright;
a literal sort under the sentinel angle 0 would order such sectors
column-major, which is not the raster baseline the degenerate case is
defined to preserve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .fields import GridSpec


@dataclass(frozen=True)
class SectorPermutation:
    """A sector-blocked patch ordering together with its exact inverse.

    forward[k] is the original (raster) patch index of the token at
    sequence slot k; inverse = argsort(forward), so inverse[forward[i]] == i.
    angles[s] is the wind angle used for sector s (raster sector order),
    with the sentinel value 0.0 for zero-wind sectors.
    """

    spec: GridSpec
    forward: np.ndarray   # (N,) int64
    inverse: np.ndarray   # (N,) int64
    angles: np.ndarray    # (K,) float64

    def __post_init__(self):
        fwd = np.ascontiguousarray(self.forward, dtype=np.int64)
        inv = np.ascontiguousarray(self.inverse, dtype=np.int64)
        n = self.spec.n_patches
        if fwd.shape != (n,) or inv.shape != (n,):
            raise ShapeError(f"permutation length must be {n}")
        if not np.array_equal(fwd[inv], np.arange(n)):
            raise DataError("forward and inverse are not mutually inverse")
        for arr in (fwd, inv):
            arr.flags.writeable = False
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "inverse", inv)

    @classmethod
    def identity(cls, spec: GridSpec) -> "SectorPermutation":
        idx = np.arange(spec.n_patches, dtype=np.int64)
        return cls(spec, idx, idx.copy(), np.zeros(spec.n_sectors))


def patch_wind_direction(u: np.ndarray, v: np.ndarray, mean: str = "weighted") -> float:
    """Dominant wind angle over one region, in radians.

    "weighted" averages components with weights w = sqrt(u^2 + v^2);
    "plain" uses the unweighted component means. Returns the sentinel
    angle 0.0 when the region carries no wind at all.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.size == 0 or u.shape != v.shape:
        raise ShapeError(f"wind component shapes {u.shape} vs {v.shape}")
    if mean == "weighted":
        w = np.hypot(u, v)
        sw = w.sum()
        if sw == 0.0:
            return 0.0
        return math.atan2(float((v * w).sum() / sw), float((u * w).sum() / sw))
    if mean == "plain":
        um, vm = float(u.mean()), float(v.mean())
        if um == 0.0 and vm == 0.0:
            return 0.0
        return math.atan2(vm, um)
    raise DataError(f"unknown wind mean mode {mean!r}")


def projection(x, y, theta: float):
    """Coordinate along the wind direction: x*cos(theta) + y*sin(theta)."""
    return np.asarray(x) * math.cos(theta) + np.asarray(y) * math.sin(theta)


def _sector_layout(spec: GridSpec):
    """Raster patch indices grouped per sector, (K, M), rows in raster order."""
    idx = np.arange(spec.n_patches).reshape(spec.patches_y, spec.patches_x)
    blocks = idx.reshape(
        spec.sectors_y, spec.sector_rows, spec.sectors_x, spec.sector_cols
    )
    return blocks.transpose(0, 2, 1, 3).reshape(spec.n_sectors, spec.patches_per_sector)


def build_permutation(
    spec: GridSpec, u: np.ndarray, v: np.ndarray, wind_mean: str = "weighted"
) -> SectorPermutation:
    """Compute the wind-guided ordering from per-cell winds over the grid."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    want = (spec.height, spec.width)
    if u.shape != want or v.shape != want:
        raise ShapeError(f"wind shapes {u.shape}/{v.shape}, expected {want}")

    c, r, p = spec.sector_cols, spec.sector_rows, spec.patch
    sectors = _sector_layout(spec)
    # Sector-local normalized patch centers, same order as _sector_layout rows.
    lx = (np.tile(np.arange(c), r) + 0.5) / c
    ly = (np.repeat(np.arange(r), c) + 0.5) / r

    forward = np.empty(spec.n_patches, dtype=np.int64)
    angles = np.zeros(spec.n_sectors)
    for s in range(spec.n_sectors):
        sy, sx = divmod(s, spec.sectors_x)
        rows = slice(sy * r * p, (sy + 1) * r * p)
        cols = slice(sx * c * p, (sx + 1) * c * p)
        us, vs = u[rows, cols], v[rows, cols]
        slots = sectors[s]
        if not us.any() and not vs.any():
            # zero-wind sentinel: keep raster order
            forward[slots] = slots
            continue
        theta = patch_wind_direction(us, vs, mean=wind_mean)
        angles[s] = theta
        pi = projection(lx, ly, theta)
        order = np.argsort(pi, kind="stable")  # ties keep raster order
        forward[slots] = slots[order]
    inverse = np.argsort(forward)
    return SectorPermutation(spec, forward, inverse, angles)


def _token_axis(tokens: np.ndarray) -> int:
    return 0 if tokens.ndim == 1 else tokens.ndim - 2


def apply(perm: SectorPermutation, tokens: np.ndarray) -> np.ndarray:
    """Reorder tokens into wind order along the sequence axis."""
    tokens = np.asarray(tokens)
    axis = _token_axis(tokens)
    if tokens.shape[axis] != perm.spec.n_patches:
        raise ShapeError(
            f"{tokens.shape[axis]} tokens for a {perm.spec.n_patches}-patch permutation"
        )
    return np.take(tokens, perm.forward, axis=axis)


def unapply(perm: SectorPermutation, tokens: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`apply`: tokens return to raster positions."""
    tokens = np.asarray(tokens)
    axis = _token_axis(tokens)
    if tokens.shape[axis] != perm.spec.n_patches:
        raise ShapeError(
            f"{tokens.shape[axis]} tokens for a {perm.spec.n_patches}-patch permutation"
        )
    return np.take(tokens, perm.inverse, axis=axis)
