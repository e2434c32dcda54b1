"""
Volume sweep inference and morphological cleanup.
"""
import logging
from typing import Callable, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from app.config import DEVICE
from app.data.ingest import normalize_hu, triplets_from_array
from app.data.model import BACKGROUND, LESION, NUM_CLASSES, ORGAN, CtVolume, SegMask

log = logging.getLogger("mixseg")

# x [B, 3, Hp, Wp], slice indices of the batch -> logits [B, 3, Hp, Wp]
Predictor = Callable[[torch.Tensor, Sequence[int]], torch.Tensor]

_STRUCT_3D = ndimage.generate_binary_structure(3, 1)   # 6-connectivity
_STRUCT_2D = ndimage.generate_binary_structure(2, 1)   # 4-connectivity


# =========================================================
# SWEEP
# =========================================================

def padded_size(n: int, multiple: int) -> int:
    return -(-n // multiple) * multiple


def student_predictor(model: nn.Module) -> Predictor:
    model.eval()

    def predict(x: torch.Tensor, centers: Sequence[int]) -> torch.Tensor:
        return model.infer(x)

    return predict


def sweep_logits(
    volume: CtVolume,
    predict: Predictor,
    batch_size: int = 8,
    multiple: int = 8,
    device: str = DEVICE,
) -> np.ndarray:
    """
    Runs predict over the triplet centered at every slice; returns float32
    logits [3, D, H, W]. Slices not divisible by `multiple` are padded with
    the normalized floor value (0) and cropped back afterwards.
    """
    arr = normalize_hu(volume.voxels)
    d, h, w = arr.shape
    hp, wp = padded_size(h, multiple), padded_size(w, multiple)
    trips = triplets_from_array(arr)
    out = np.empty((NUM_CLASSES, d, h, w), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, d, batch_size):
            chunk = trips[start:start + batch_size]
            x = torch.from_numpy(np.stack([t.channels for t in chunk]))
            if (hp, wp) != (h, w):
                x = F.pad(x, (0, wp - w, 0, hp - h), value=0.0)
            logits = predict(x.to(device), [t.center_index for t in chunk])
            logits = logits[:, :, :h, :w].detach().to("cpu", torch.float32).numpy()
            for i, t in enumerate(chunk):
                out[:, t.center_index] = logits[i]
    return out


def sweep_infer(
    volume: CtVolume,
    model: Union[nn.Module, Predictor],
    batch_size: int = 8,
    device: str = DEVICE,
) -> SegMask:
    """Argmax of the center-slice logits per slice; ties go to the lower class."""
    predict = student_predictor(model) if isinstance(model, nn.Module) else model
    logits = sweep_logits(volume, predict, batch_size=batch_size, device=device)
    return SegMask(np.argmax(logits, axis=0).astype(np.uint8), volume.case_id)


# =========================================================
# POSTPROCESS
# =========================================================

def largest_component(binary: np.ndarray) -> np.ndarray:
    """Largest 6-connected component; equal sizes resolve to the first in raster order."""
    labeled, n = ndimage.label(binary, structure=_STRUCT_3D)
    if n <= 1:
        return binary.astype(bool)
    flat = labeled.ravel()
    sizes = np.bincount(flat)
    sizes[0] = 0
    best = np.flatnonzero(sizes == sizes.max())
    if len(best) > 1:
        # first voxel of each tied component, in raster order
        ids, first = np.unique(flat, return_index=True)
        first_of = dict(zip(ids.tolist(), first.tolist()))
        best = sorted(best.tolist(), key=first_of.__getitem__)
    return labeled == int(best[0])


def postprocess(mask: SegMask) -> SegMask:
    """
    1. keep the largest 3D component of the liver region {1, 2}
    2. per slice, fill enclosed holes of the liver region (as liver) and of lesions (as lesion)
    3. lesion voxels outside the kept liver region become background
    """
    lab = np.array(mask.labels)
    liver = lab >= ORGAN
    if not liver.any():
        return mask

    keep = largest_component(liver)
    lab[liver & ~keep] = BACKGROUND

    region = keep.copy()
    for d in range(lab.shape[0]):
        sl = lab[d]
        liv = sl >= ORGAN
        if not liv.any():
            continue
        filled = ndimage.binary_fill_holes(liv, structure=_STRUCT_2D)
        sl[filled & ~liv] = ORGAN
        region[d] |= filled
        les = sl == LESION
        if les.any():
            filled_les = ndimage.binary_fill_holes(les, structure=_STRUCT_2D)
            sl[filled_les & ~les] = LESION

    lab[(lab == LESION) & ~region] = BACKGROUND
    return SegMask(lab, mask.case_id)
