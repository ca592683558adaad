"""Text scoring, collaborative mask voting, and map rendering.

Each patch scores every class (logit-scaled cosine); within a mask the
patches vote with their argmax classes and the mode wins, mean logit
breaking ties. Label maps are rendered at patch level and upsampled
nearest-neighbor - voting already happens per mask, so label-level
upsampling is exact for mask-constant classes.
"""

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError

BACKGROUND_GATE_TAU = 0.5


@dataclass(frozen=True)
class PatchLogits:
    values: np.ndarray  # (C, HW), class rows in text-bank order
    class_names: tuple

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise DataError("non-finite logits")
        if self.values.shape[0] != len(self.class_names):
            raise DataError("logit rows do not match class names")


@dataclass(frozen=True)
class MaskVote:
    mask_id: int
    class_index: int
    confidence: float
    patch_count: int


@dataclass(frozen=True)
class SegmentationMap:
    labels: np.ndarray  # (H_img, W_img) int
    class_names: tuple
    mask_table: tuple  # per-mask dicts: id, class, confidence, patches


def patch_logits(embeddings, bank, logit_scale):
    """logits = logit_scale * (text @ patch^T), (C, HW)."""
    vectors = embeddings.vectors if hasattr(embeddings, "vectors") else np.asarray(embeddings)
    if bank.embeddings.shape[1] != vectors.shape[1]:
        raise DataError(
            f"joint-space dims differ: text {bank.embeddings.shape[1]}, "
            f"patches {vectors.shape[1]}"
        )
    values = float(logit_scale) * (bank.embeddings @ vectors.T)
    return PatchLogits(values=values.astype(np.float32), class_names=bank.class_names)


def _softmax(x, axis=0):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def vote(mask_grid, logits):
    """Mode of member-patch argmax classes per mask.

    Count ties break to the class with the higher mean logit inside the
    mask (then lowest class index). Confidence is the mean softmax
    probability of the winning class over the mask's patches. Mask ids
    with no patches are skipped.
    """
    flat = mask_grid.ids.reshape(-1)
    values = logits.values
    if flat.shape[0] != values.shape[1]:
        raise DataError(
            f"mask grid covers {flat.shape[0]} patches, logits cover {values.shape[1]}"
        )
    argmaxes = values.argmax(axis=0)
    probs = _softmax(values, axis=0)
    votes = []
    for mask_id in range(mask_grid.n_masks):
        member = flat == mask_id
        count = int(member.sum())
        if count == 0:
            continue
        ballots = np.bincount(argmaxes[member], minlength=values.shape[0])
        top = ballots.max()
        tied = np.flatnonzero(ballots == top)
        if len(tied) > 1:
            means = values[tied][:, member].mean(axis=1)
            winner = int(tied[int(np.argmax(means))])
        else:
            winner = int(tied[0])
        confidence = float(probs[winner, member].mean())
        votes.append(
            MaskVote(
                mask_id=mask_id,
                class_index=winner,
                confidence=confidence,
                patch_count=count,
            )
        )
    return votes


def background_gate(votes, tau, background_index):
    """Relabel masks below the confidence threshold as background."""
    if background_index is None:
        raise DataError("background gate requested on a benchmark without background")
    out = []
    for v in votes:
        if v.confidence < tau:
            out.append(
                MaskVote(
                    mask_id=v.mask_id,
                    class_index=int(background_index),
                    confidence=v.confidence,
                    patch_count=v.patch_count,
                )
            )
        else:
            out.append(v)
    return out


def upsample_labels(patch_labels, out_dims):
    """Nearest-neighbor upsample of an (H_p, W_p) label grid."""
    h_p, w_p = patch_labels.shape
    h, w = out_dims
    rows = (np.arange(h) * h_p) // h
    cols = (np.arange(w) * w_p) // w
    return patch_labels[np.ix_(rows, cols)]


def render_map(mask_grid, votes, original_dims, class_names):
    """Paint voted classes on the patch grid, then upsample to image dims."""
    patch_classes = np.zeros(mask_grid.ids.shape, dtype=np.int64)
    table = []
    for v in votes:
        patch_classes[mask_grid.ids == v.mask_id] = v.class_index
        table.append(
            {
                "mask_id": v.mask_id,
                "class_index": v.class_index,
                "class_name": class_names[v.class_index],
                "confidence": round(v.confidence, 6),
                "patches": v.patch_count,
            }
        )
    labels = upsample_labels(patch_classes, original_dims)
    return SegmentationMap(
        labels=labels, class_names=tuple(class_names), mask_table=tuple(table)
    )


def render_patch_argmax(logits, grid, original_dims, class_names):
    """Mask-free rendering: per-patch argmax upsampled (the ablation baselines)."""
    patch_classes = logits.values.argmax(axis=0).reshape(grid)
    labels = upsample_labels(patch_classes, original_dims)
    return SegmentationMap(labels=labels, class_names=tuple(class_names), mask_table=())


def save_segmentation(seg, png_path, sidecar_path=None, extra=None):
    """Single-channel 8-bit indexed image + JSON sidecar."""
    if len(seg.class_names) > 256:
        raise DataError("more than 256 classes cannot be stored as 8-bit indexed")
    img = Image.fromarray(seg.labels.astype(np.uint8), mode="P")
    img.putpalette(_palette(len(seg.class_names)))
    img.save(png_path)
    if sidecar_path:
        sidecar = {
            "classes": list(seg.class_names),
            "masks": list(seg.mask_table),
            "shape": list(seg.labels.shape),
        }
        if extra:
            sidecar.update(extra)
        with open(sidecar_path, "w") as f:
            json.dump(sidecar, f, indent=2)
            f.write("\n")


def _palette(n_classes):
    # deterministic distinguishable colors; index 0 stays dark
    rng = np.random.default_rng(0)
    colors = rng.integers(32, 255, size=(256, 3))
    colors[0] = (0, 0, 0)
    return [int(c) for c in colors.reshape(-1)]
