"""Multi-head self-attention with additive terrain bias.

The core operation follows the standard scaled dot-product form with the
softmax temperature sqrt(d) taken over the full model width. An optional
additive bias lands on the logits of every head (the terrain penalty is
shared across heads), and an optional positional table is added to the
tokens before the Q/K/V projections.

Without bias and positional terms the operation is permutation
equivariant: reordering tokens, attending, and undoing the reorder is
exactly attention on the original order, which is what licenses the
wind-guided shuffle in the first place. `equivariance_check` measures the
deviation directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import reorder
from .errors import NumericError, ShapeError


@dataclass
class AttentionParams:
    """Projection matrices for one attention layer (no projection biases)."""

    wq: ad.Tensor   # (d, d)
    wk: ad.Tensor   # (d, d)
    wv: ad.Tensor   # (d, d)
    wo: ad.Tensor   # (d, d)
    n_heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            t = getattr(self, name)
            if t.shape != (d, d):
                raise ShapeError(f"{name} shape {t.shape}, expected {(d, d)}")
        if d % self.n_heads:
            raise ShapeError(f"width {d} not divisible by {self.n_heads} heads")

    @property
    def d(self) -> int:
        return self.wq.shape[0]


def _split_heads(t: ad.Tensor, heads: int) -> ad.Tensor:
    """(..., N, d) -> (..., heads, N, d/heads) for 2-D or 3-D inputs."""
    if t.data.ndim == 2:
        n, d = t.shape
        return t.reshape(n, heads, d // heads).transpose(1, 0, 2)
    b, n, d = t.shape
    return t.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(t: ad.Tensor) -> ad.Tensor:
    if t.data.ndim == 3:
        h, n, dh = t.shape
        return t.transpose(1, 0, 2).reshape(n, h * dh)
    b, h, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _attend_parts(tokens, params: AttentionParams, bias=None, pos=None):
    x = ad.as_tensor(tokens)
    if x.data.ndim not in (2, 3) or x.shape[-1] != params.d:
        raise ShapeError(f"tokens shape {x.shape} incompatible with width {params.d}")
    if pos is not None:
        x = x + ad.as_tensor(pos)
    # the 1/sqrt(d) temperature is folded into q (cheaper than scaling logits)
    q = _split_heads((x @ params.wq) * (1.0 / math.sqrt(params.d)), params.n_heads)
    k = _split_heads(x @ params.wk, params.n_heads)
    v = _split_heads(x @ params.wv, params.n_heads)
    logits = q @ k.transpose(*range(k.data.ndim - 2), k.data.ndim - 1, k.data.ndim - 2)
    if bias is not None:
        logits = logits + ad.as_tensor(bias)
    if not np.isfinite(logits.data).all():
        raise NumericError("non-finite attention logits")
    weights = ad.softmax(logits)
    out = _merge_heads(weights @ v) @ params.wo
    return out, weights


def attend(tokens, params: AttentionParams, bias=None, pos=None) -> ad.Tensor:
    """Biased multi-head self-attention over (N, d) or (B, N, d) tokens.

    `bias` must broadcast against the per-head logits (..., heads, N, N);
    a plain (N, N) matrix is shared by every head. `pos` is added to the
    tokens ahead of the projections.
    """
    out, _ = _attend_parts(tokens, params, bias=bias, pos=pos)
    return out


def attention_weights(tokens, params: AttentionParams, bias=None, pos=None) -> np.ndarray:
    """Post-softmax attention weights averaged over heads, as plain arrays."""
    _, weights = _attend_parts(tokens, params, bias=bias, pos=pos)
    return weights.data.mean(axis=-3)


def equivariance_check(
    tokens: np.ndarray, params: AttentionParams, perm: reorder.SectorPermutation
) -> float:
    """Max |unapply(Attn(apply(X))) - Attn(X)| with bias and pos disabled."""
    straight = attend(tokens, params).data
    shuffled = attend(reorder.apply(perm, np.asarray(tokens)), params).data
    return float(np.abs(reorder.unapply(perm, shuffled) - straight).max())
