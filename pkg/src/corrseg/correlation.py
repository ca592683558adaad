"""Self-correlation recovery over the final attention layer.

The per-head q/k/v streams each get a token-pairwise cosine similarity
matrix; the mean over all 3*H matrices is the recovered correlation w.
Replacing the softmax attention with w and finishing the block yields
patch embeddings whose local semantics are restored.

Cosine denominators are clamped at 1e-8: frozen real checkpoints never
produce exact zero vectors, but synthetic tests may.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import model
from .errors import DataError, ModelError

NORM_EPS = 1e-8

COSINE = "cosine"
INNER_PRODUCT = "inner_product"


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray  # (HW+1, HW+1) float32, row/col 0 = [CLS]
    kind: str
    grid: tuple  # (H_p, W_p)

    def __post_init__(self):
        hw = self.grid[0] * self.grid[1]
        if self.values.shape != (hw + 1, hw + 1):
            raise DataError(
                f"correlation shape {self.values.shape} does not match grid {self.grid}"
            )
        if self.kind not in (COSINE, INNER_PRODUCT):
            raise DataError(f"unknown correlation kind {self.kind!r}")

    @property
    def patch_values(self):
        """The HW x HW block without the [CLS] row/column."""
        return self.values[1:, 1:]

    def validate(self, atol=1e-6):
        """Assert the kind's invariants; returns self for chaining."""
        v = self.values
        if not np.isfinite(v).all():
            raise DataError("non-finite correlation values")
        asym = float(np.abs(v - v.T).max())
        if asym >= atol:
            raise DataError(f"correlation not symmetric: max |w - w^T| = {asym}")
        if self.kind == COSINE:
            if v.min() < -1 - atol or v.max() > 1 + atol:
                raise DataError("cosine correlation outside [-1, 1]")
            dmax = float(np.abs(np.diag(v) - 1.0).max())
            if dmax >= atol:
                raise DataError(f"cosine diagonal deviates from 1 by {dmax}")
        return self


@dataclass(frozen=True)
class PatchEmbeddings:
    vectors: np.ndarray  # (HW, E) float32, unit rows
    grid: tuple
    image_size: tuple

    def __post_init__(self):
        hw = self.grid[0] * self.grid[1]
        if self.vectors.shape[0] != hw:
            raise DataError(
                f"{self.vectors.shape[0]} embedding rows do not match grid {self.grid}"
            )


def _normalize(x):
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


def _branch_cosine_sum(x):
    # x: (H, T, d_k) -> sum over heads of per-head cosine matrices, (T, T)
    n = _normalize(x)
    return (n @ n.transpose(-2, -1)).sum(dim=0)


def _finish(w, grid, kind):
    w = 0.5 * (w + w.T)  # BLAS tiling can leave last-ulp asymmetry
    return CorrelationMatrix(
        values=w.to(torch.float32).numpy(), kind=kind, grid=tuple(grid)
    )


@torch.no_grad()
def self_correlation(q, k, v, grid):
    """Branch/head-averaged cosine self-correlation of per-head q/k/v."""
    n_heads = q.shape[0]
    w = _branch_cosine_sum(q) + _branch_cosine_sum(k) + _branch_cosine_sum(v)
    return _finish(w / (3 * n_heads), grid, COSINE)


@torch.no_grad()
def self_correlation_fast(q, k, v, grid):
    """Heads concatenated per branch before one cosine per branch.

    Cheaper than the per-head average and close to it in practice, but
    not identical for more than one head. Off by default in the pipeline.
    """
    w = None
    for x in (q, k, v):
        flat = x.transpose(0, 1).reshape(x.shape[1], -1)
        n = _normalize(flat)
        m = n @ n.T
        w = m if w is None else w + m
    return _finish(w / 3.0, grid, COSINE)


@torch.no_grad()
def inner_product_correlation(q, k, v, grid):
    """Same averaging structure with raw dot products; unbounded range."""
    n_heads = q.shape[0]
    w = (q @ q.transpose(-2, -1)).sum(dim=0)
    w = w + (k @ k.transpose(-2, -1)).sum(dim=0)
    w = w + (v @ v.transpose(-2, -1)).sum(dim=0)
    return _finish(w / (3 * n_heads), grid, INNER_PRODUCT)


@torch.no_grad()
def forward_with_w(feats, corr, bundle, block_index=None):
    """Complete the final block with w as the attention matrix.

    The single matrix is applied uniformly to every head's value stream,
    with no softmax or rescaling. Output: unit-norm per-patch embeddings
    in the joint space, [CLS] dropped.
    """
    if corr.kind != COSINE:
        raise ModelError(
            f"forward_with_w expects a cosine correlation, got kind {corr.kind!r}"
        )
    t = feats.tokens.shape[0]
    if corr.values.shape != (t, t):
        raise ModelError(
            f"correlation shape {corr.values.shape} does not match {t} tokens"
        )
    attn = torch.from_numpy(np.ascontiguousarray(corr.values, dtype=np.float32))
    projected = model.complete_block(feats, attn, bundle, block_index=block_index)
    patches = projected[1:]
    patches = _normalize(patches)
    return PatchEmbeddings(
        vectors=patches.to(torch.float32).numpy(),
        grid=feats.grid,
        image_size=feats.image_size,
    )
