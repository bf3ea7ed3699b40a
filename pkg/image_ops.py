"""
Image helpers shared by ingestion, attention maps and attacks.

Pixels live in numpy arrays shaped (H, W, C) with values in [0, 1]; networks
take torch batches shaped (N, C, H, W).
"""

import numpy as np
import torch
import torch.nn.functional as F


def bilinear_resize(array, height, width):
    """Bilinear resample of a (H, W) or (H, W, C) array.

    Uses half-pixel centres, so a same-size call returns the input unchanged
    and a constant input stays constant.
    """
    array = np.asarray(array)
    squeeze = array.ndim == 2
    if squeeze:
        array = array[:, :, None]
    if array.shape[:2] == (height, width):
        resized = array.astype(np.float64 if array.dtype == np.float64 else np.float32, copy=True)
        return resized[:, :, 0] if squeeze else resized

    dtype = torch.float64 if array.dtype == np.float64 else torch.float32
    tensor = torch.as_tensor(np.ascontiguousarray(array), dtype=dtype).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(tensor, size=(height, width), mode="bilinear", align_corners=False)
    resized = out.squeeze(0).permute(1, 2, 0).numpy()
    return resized[:, :, 0] if squeeze else resized


def to_batch(images, dtype=torch.float32):
    """Stack (H, W, C) arrays into an (N, C, H, W) tensor."""
    if isinstance(images, np.ndarray):
        stacked = images
    else:
        stacked = np.stack([np.asarray(image) for image in images])
    if stacked.ndim == 3:
        stacked = stacked[None]
    return torch.as_tensor(stacked, dtype=dtype).permute(0, 3, 1, 2).contiguous()


def to_uint8(array):
    """[0, 1] floats to 8-bit pixels for PNG export."""
    return np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
