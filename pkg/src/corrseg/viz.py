"""Inspection figures: correlation heatmaps, cluster maps, global scores.

Rendering constants are fixed so figure bytes are reproducible for
identical inputs.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError

HEATMAP_CMAP = "jet"
OVERLAY_ALPHA = 0.5
CLUSTER_CMAP = "tab20"
SCORE_CMAP = "coolwarm"
DOT_COLOR = "red"
DOT_SIZE = 60
FIG_DPI = 120


def bilinear_upsample(grid_values, out_dims):
    """(H_p, W_p) float map -> (H, W) via bilinear interpolation."""
    t = torch.from_numpy(np.asarray(grid_values, dtype=np.float32))
    t = t.unsqueeze(0).unsqueeze(0)
    up = F.interpolate(t, size=tuple(out_dims), mode="bilinear", align_corners=False)
    return up[0, 0].numpy()


def _save(fig, out_path):
    fig.savefig(out_path, dpi=FIG_DPI, bbox_inches="tight")
    plt.close(fig)


def save_patch_heatmap(image_rgb, corr, patch_rc, out_path):
    """Selected patch's correlation row over the image, selection dotted."""
    h_p, w_p = corr.grid
    r, c = patch_rc
    if not (0 <= r < h_p and 0 <= c < w_p):
        raise DataError(f"patch {patch_rc} outside grid {corr.grid}")
    img = np.asarray(image_rgb)
    row = corr.patch_values[r * w_p + c].reshape(h_p, w_p)
    heat = bilinear_upsample(row, img.shape[:2])
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(img)
    ax.imshow(heat, cmap=HEATMAP_CMAP, alpha=OVERLAY_ALPHA)
    ax.scatter(
        [(c + 0.5) * img.shape[1] / w_p],
        [(r + 0.5) * img.shape[0] / h_p],
        color=DOT_COLOR,
        s=DOT_SIZE,
    )
    ax.set_axis_off()
    _save(fig, out_path)


def save_cluster_maps(labels_pre, labels_post, grid, out_path):
    """Cluster id maps before and after denoising, side by side."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 5))
    for ax, labels, title in (
        (axes[0], labels_pre, "clusters"),
        (axes[1], labels_post, "clusters (denoised)"),
    ):
        ax.imshow(np.asarray(labels).reshape(grid), cmap=CLUSTER_CMAP, interpolation="nearest")
        ax.set_title(title)
        ax.set_axis_off()
    _save(fig, out_path)


def save_global_score_map(scores, grid, out_path):
    """Mean-minus-self weight per patch; positive values are global patches."""
    arr = np.asarray(scores, dtype=np.float32).reshape(grid)
    limit = max(float(np.abs(arr).max()), 1e-6)
    fig, ax = plt.subplots(figsize=(6, 6))
    im = ax.imshow(arr, cmap=SCORE_CMAP, vmin=-limit, vmax=limit, interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title("global-patch scores")
    ax.set_axis_off()
    _save(fig, out_path)
