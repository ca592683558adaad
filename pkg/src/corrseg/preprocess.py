"""Image preprocessing for the frozen vision tower.

Resize (aspect-distorting, bicubic) to side x side, scale to [0,1],
normalize with the model family's channel statistics. Non-square inputs
are squashed; predictions are resized back to the original dims
downstream, so the two distortions cancel at evaluation time.
"""

from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .errors import DataError

CHANNEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
CHANNEL_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class ImageTensor:
    pixels: torch.Tensor  # (3, side, side), normalized
    original_size: tuple  # (height, width)
    side: int


def preprocess(rgb_image, side=224):
    """RGB image -> normalized ImageTensor.

    Accepts a PIL image in RGB mode, an (H, W, 3) uint8 array, or an
    (H, W, 3) float array already scaled to [0, 1] (the synthetic-test
    path). Anything that is not three-channel RGB is an error; color
    conversion is the caller's job.
    """
    if side <= 0 or side % 16 != 0:
        raise DataError(f"side must be a positive multiple of 16, got {side}")

    if isinstance(rgb_image, Image.Image):
        if rgb_image.mode != "RGB":
            raise DataError(f"expected an RGB image, got mode {rgb_image.mode!r}")
        original = (rgb_image.height, rgb_image.width)
        if (rgb_image.width, rgb_image.height) != (side, side):
            rgb_image = rgb_image.resize((side, side), Image.BICUBIC)
        x = torch.from_numpy(np.asarray(rgb_image, dtype=np.float32) / 255.0)
    else:
        arr = np.asarray(rgb_image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DataError(f"expected an (H, W, 3) RGB array, got shape {arr.shape}")
        original = (arr.shape[0], arr.shape[1])
        if arr.dtype == np.uint8:
            return preprocess(Image.fromarray(arr, mode="RGB"), side=side)
        x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
        if arr.shape[0] != side or arr.shape[1] != side:
            x = torch.nn.functional.interpolate(
                x.permute(2, 0, 1).unsqueeze(0),
                size=(side, side),
                mode="bicubic",
                align_corners=False,
            )[0].permute(1, 2, 0)

    mean = torch.tensor(CHANNEL_MEAN, dtype=torch.float32)
    std = torch.tensor(CHANNEL_STD, dtype=torch.float32)
    pixels = ((x - mean) / std).permute(2, 0, 1).contiguous()
    return ImageTensor(pixels=pixels, original_size=original, side=side)
