"""Mask generation from the recovered correlation matrix.

Rows of the cosine correlation ([CLS] stripped, L2-normalized) are
clustered with DBSCAN; per-cluster prototype rows vote each patch into a
mask by argmax. Global patches - rows whose mean weight exceeds their
self weight in the unnormalized (inner-product) correlation - are
removed before a second clustering pass; they still receive mask ids
through the prototype argmax.
"""

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .correlation import COSINE, CorrelationMatrix
from .errors import DataError

log = logging.getLogger(__name__)

DEFAULT_EPS = 0.7
DEFAULT_MIN_SAMPLES = 3

NOISE = -1


@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray  # (HW,) int, -1 = density noise
    n_clusters: int
    eps: float
    min_samples: int

    def __post_init__(self):
        if self.n_clusters < 1:
            raise DataError("cluster result must contain at least one cluster")
        bad = (self.labels < NOISE) | (self.labels >= self.n_clusters)
        if bad.any():
            raise DataError("cluster labels outside {-1} + [0, N)")


@dataclass(frozen=True)
class PrototypeStack:
    prototypes: np.ndarray  # (N, HW)
    member_counts: np.ndarray  # (N,)


@dataclass(frozen=True)
class MaskGrid:
    ids: np.ndarray  # (H_p, W_p) int
    n_masks: int


@dataclass(frozen=True)
class GlobalPatchReport:
    scores: np.ndarray  # (HW,) mean weight minus self weight
    retained: np.ndarray  # indices with score <= 0
    flagged: np.ndarray  # indices with score > 0


@dataclass(frozen=True)
class DenoiseResult:
    mask_grid: MaskGrid
    prototypes: PrototypeStack
    report: GlobalPatchReport
    clusters: ClusterResult  # full-length labels; flagged patches are -1
    fell_back: bool = False


def l2_normalize_rows(m, eps=1e-12):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, eps)


def dbscan_labels(points, eps, min_samples):
    """Plain DBSCAN over row vectors with the Euclidean metric.

    All-pairs distances, then BFS expansion over core points; the
    neighborhood includes the point itself. Border points take the label
    of the first cluster that reaches them (seeds scanned in index
    order, FIFO expansion), noise stays -1. Sequential and deterministic.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64), 0
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.maximum(d2, 0.0, out=d2)
    adjacency = d2 <= eps * eps
    core = adjacency.sum(axis=1) >= min_samples
    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for seed in range(n):
        if labels[seed] != NOISE or not core[seed]:
            continue
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            for nb in np.flatnonzero(adjacency[p]):
                if labels[nb] == NOISE:
                    labels[nb] = cluster
                    if core[nb]:
                        queue.append(nb)
        cluster += 1
    return labels, cluster


def cluster(w_cos, eps=DEFAULT_EPS, min_samples=DEFAULT_MIN_SAMPLES):
    """DBSCAN over the L2-normalized rows of the cosine correlation.

    Also accepts a plain (HW, d) row array (the feature-clustering debug
    path). Guarantees N >= 1: fewer patches than min_samples, or an
    all-noise outcome, falls back to a single cluster holding every patch.
    """
    if isinstance(w_cos, CorrelationMatrix):
        if w_cos.kind != COSINE:
            raise DataError(f"clustering expects the cosine correlation, got {w_cos.kind}")
        rows = w_cos.patch_values
    else:
        rows = np.asarray(w_cos)
    hw = rows.shape[0]
    if hw < min_samples:
        return ClusterResult(
            labels=np.zeros(hw, dtype=np.int64),
            n_clusters=1,
            eps=eps,
            min_samples=min_samples,
        )
    labels, n = dbscan_labels(l2_normalize_rows(rows), eps, min_samples)
    if n == 0:
        labels = np.zeros(hw, dtype=np.int64)
        n = 1
    return ClusterResult(labels=labels, n_clusters=n, eps=eps, min_samples=min_samples)


def prototypes(w_cos, cluster_result):
    """Per-cluster mean of member correlation rows (all HW columns).

    Density-noise patches (label -1) are excluded from every mean.
    """
    rows = w_cos.patch_values if isinstance(w_cos, CorrelationMatrix) else np.asarray(w_cos)
    labels = cluster_result.labels
    n = cluster_result.n_clusters
    if n == 0:
        raise DataError("no clusters to build prototypes from")
    protos = np.zeros((n, rows.shape[1]), dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    for k in range(n):
        members = labels == k
        counts[k] = int(members.sum())
        if counts[k]:
            protos[k] = rows[members].mean(axis=0)
    return PrototypeStack(prototypes=protos.astype(np.float32), member_counts=counts)


def assign_masks(stack, grid):
    """Patch j joins the mask whose prototype scores it highest.

    Ties break to the lowest cluster id (argmax's first maximum).
    """
    ids = np.argmax(stack.prototypes, axis=0).astype(np.int64)
    return MaskGrid(ids=ids.reshape(grid), n_masks=stack.prototypes.shape[0])


def filter_scores(w_patch):
    """Per-row mean weight minus self weight, over a patch-only matrix."""
    w = np.asarray(w_patch, dtype=np.float64)
    return w.mean(axis=1) - np.diag(w)


def global_patch_filter(w_for_denoise):
    """Flag patches whose average weight exceeds their self weight.

    Degenerate on cosine input by construction (the diagonal is the row
    maximum, so no patch can be flagged); the pipeline feeds the
    inner-product correlation here.
    """
    w = (
        w_for_denoise.patch_values
        if isinstance(w_for_denoise, CorrelationMatrix)
        else np.asarray(w_for_denoise)
    )
    scores = filter_scores(w)
    flagged = np.flatnonzero(scores > 0)
    retained = np.flatnonzero(scores <= 0)
    return GlobalPatchReport(
        scores=scores.astype(np.float32), retained=retained, flagged=flagged
    )


def denoise_and_segment(
    w_cos, w_for_denoise, eps=DEFAULT_EPS, min_samples=DEFAULT_MIN_SAMPLES
):
    """Filter global patches, re-cluster the remainder, argmax-assign masks.

    Prototypes are means over retained member rows but span all HW
    columns, so flagged patches still receive a mask id. If every patch
    is flagged the un-denoised pipeline runs instead (with a warning).
    """
    grid = w_cos.grid
    hw = grid[0] * grid[1]
    report = global_patch_filter(w_for_denoise)
    if len(report.retained) == 0:
        log.warning("every patch flagged as global; falling back to un-denoised pipeline")
        clusters = cluster(w_cos, eps=eps, min_samples=min_samples)
        stack = prototypes(w_cos, clusters)
        return DenoiseResult(
            mask_grid=assign_masks(stack, grid),
            prototypes=stack,
            report=report,
            clusters=clusters,
            fell_back=True,
        )
    rows = w_cos.patch_values
    sub = cluster(rows[report.retained], eps=eps, min_samples=min_samples)
    labels = np.full(hw, NOISE, dtype=np.int64)
    labels[report.retained] = sub.labels
    clusters = ClusterResult(
        labels=labels, n_clusters=sub.n_clusters, eps=eps, min_samples=min_samples
    )
    stack = prototypes(rows, clusters)
    return DenoiseResult(
        mask_grid=assign_masks(stack, grid),
        prototypes=stack,
        report=report,
        clusters=clusters,
    )
