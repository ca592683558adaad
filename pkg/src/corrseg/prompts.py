"""Point-prompt export for an external promptable mask model.

Each mask contributes foreground points (its centroid snapped to a
member patch, plus up to k high-prototype member-patch centers); every
other mask's foreground points become its background points. The mask
model itself is not bundled - the JSON is consumed by a thin adapter.
"""

import json

import numpy as np

from .errors import DataError

DEFAULT_MEMBER_POINTS = 3


def _patch_center_pixel(r, c, grid, dims):
    h_p, w_p = grid
    h, w = dims
    x = int((c + 0.5) * w / w_p)
    y = int((r + 0.5) * h / h_p)
    return [min(x, w - 1), min(y, h - 1)]


def build_prompt_set(result, k=DEFAULT_MEMBER_POINTS):
    """PipelineResult (mask mode, denoised) -> PromptSet dict."""
    if result.mask_grid is None or not result.votes:
        raise DataError("prompt export needs a mask-mode pipeline result")
    if result.denoise is None:
        raise DataError("prompt export requires the denoised pipeline")
    grid = result.mask_grid.ids.shape
    dims = result.seg_map.labels.shape
    protos = result.denoise.prototypes.prototypes
    entries = []
    for v in result.votes:
        member_rc = np.argwhere(result.mask_grid.ids == v.mask_id)
        if len(member_rc) == 0:
            continue
        centroid = member_rc.mean(axis=0)
        # snap to the nearest member patch: the raw centroid of a
        # non-convex mask can fall outside it
        snap = member_rc[np.argmin(((member_rc - centroid) ** 2).sum(axis=1))]
        points = [_patch_center_pixel(int(snap[0]), int(snap[1]), grid, dims)]
        flat_members = member_rc[:, 0] * grid[1] + member_rc[:, 1]
        scores = protos[v.mask_id][flat_members]
        order = np.argsort(-scores, kind="stable")[:k]
        for idx in order:
            r, c = int(member_rc[idx][0]), int(member_rc[idx][1])
            p = _patch_center_pixel(r, c, grid, dims)
            if p not in points:
                points.append(p)
        entries.append(
            {
                "class": result.seg_map.class_names[v.class_index],
                "class_index": v.class_index,
                "confidence": round(v.confidence, 6),
                "fg_points": points,
            }
        )
    if not entries:
        raise DataError("no masks to export prompts from")
    for i, entry in enumerate(entries):
        entry["bg_points"] = [
            p for j, other in enumerate(entries) if j != i for p in other["fg_points"]
        ]
    return {"masks": entries}


def write_prompt_set(prompt_set, path):
    with open(path, "w") as f:
        json.dump(prompt_set, f, indent=2)
        f.write("\n")
