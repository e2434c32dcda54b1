"""
Synthetic organ-with-lesions volumes laid out like ingested cases.
"""
import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from scipy import ndimage

from app.config import HU_MAX, HU_MIN, PhantomConfig
from app.data.model import BACKGROUND, LESION, ORGAN, CtVolume, SegMask
from app.data.store import write_case
from app.utils.seed import sample_rng

log = logging.getLogger("mixseg")

_STRUCT_3D = ndimage.generate_binary_structure(3, 1)


def _ellipsoid(shape: Tuple[int, int, int], center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[:shape[0], :shape[1], :shape[2]]
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _place(rng: np.random.Generator, candidates: np.ndarray, shape, radii, allowed: np.ndarray,
           retries: int) -> np.ndarray:
    """Ellipsoid centered on a random candidate voxel that stays within `allowed`; empty on failure."""
    # centers whose ellipsoid-normalized distance to the forbidden region is at least 1
    room = ndimage.distance_transform_edt(candidates, sampling=[1.0 / r for r in radii]) >= 1.0
    idx = np.argwhere(room if room.any() else candidates)
    if len(idx) == 0:
        return np.zeros(shape, dtype=bool)
    for _ in range(retries):
        center = idx[rng.integers(len(idx))]
        blob = _ellipsoid(shape, center, radii)
        if blob.any() and not (blob & ~allowed).any():
            return blob
    return np.zeros(shape, dtype=bool)


def gen_phantom(cfg: PhantomConfig, rng: np.random.Generator, case_id: str = "phantom") -> Tuple[CtVolume, SegMask]:
    d, h, w = cfg.shape
    shape = (d, h, w)

    # organ: one ellipsoid near the volume center
    center = (d / 2 + rng.uniform(-0.1, 0.1) * d,
              h / 2 + rng.uniform(-0.1, 0.1) * h,
              w / 2 + rng.uniform(-0.1, 0.1) * w)
    radii = (rng.uniform(*cfg.organ_depth_frac) * d,
             rng.uniform(*cfg.organ_radius_frac) * h,
             rng.uniform(*cfg.organ_radius_frac) * w)
    organ = _ellipsoid(shape, center, radii)
    if not organ.any():
        raise ValueError(f"{case_id}: organ ellipsoid is empty for shape {shape}")

    # lesions stay off the organ boundary
    interior = ndimage.binary_erosion(organ, structure=_STRUCT_3D)
    lesion = np.zeros(shape, dtype=bool)
    lesion_hu = []
    n_lesions = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    for k in range(n_lesions):
        r = rng.uniform(*cfg.lesion_radius)
        lr = (max(1.0, r * cfg.lesion_depth_ratio), r, r * rng.uniform(0.8, 1.25))
        blob = _place(rng, interior, shape, lr, interior, cfg.max_retries)
        if not blob.any():
            raise ValueError(
                f"{case_id}: lesion {k} (radius {r:.1f}) does not fit inside the organ "
                f"after {cfg.max_retries} tries"
            )
        lesion |= blob
        offset = rng.uniform(*cfg.lesion_offset_hu) * (1 if rng.random() < 0.5 else -1)
        lesion_hu.append((blob, cfg.organ_hu + offset))

    # distractors: organ-like blobs clear of the organ
    free = ~ndimage.binary_dilation(organ, structure=_STRUCT_3D, iterations=2)
    distractors = np.zeros(shape, dtype=bool)
    n_distract = int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))
    for _ in range(n_distract):
        r = rng.uniform(*cfg.lesion_radius) * 1.5
        blob = _place(rng, free, shape, (max(1.0, r * 0.5), r, r), free, cfg.max_retries)
        if not blob.any():
            log.debug(f"[PHANTOM] {case_id}: distractor skipped, no room")
        distractors |= blob

    img = np.full(shape, cfg.background_hu, dtype=np.float64)
    img[organ | distractors] = cfg.organ_hu
    for blob, hu in lesion_hu:
        img[blob] = hu
    img += rng.normal(0.0, cfg.noise_sigma, size=shape)
    vox = np.clip(np.rint(img), HU_MIN, HU_MAX).astype(np.int16)

    labels = np.full(shape, BACKGROUND, dtype=np.uint8)
    labels[organ] = ORGAN
    labels[lesion] = LESION
    return CtVolume(vox, cfg.spacing_mm, case_id), SegMask(labels, case_id)


def phantom_case_id(i: int) -> str:
    return f"phantom_{i:03d}"


def write_corpus(root: Union[str, Path], cfg: PhantomConfig, n_cases: int) -> List[str]:
    """n_cases phantoms under root; case i is a pure function of (cfg, i)."""
    ids = []
    for i in range(n_cases):
        case_id = phantom_case_id(i)
        volume, mask = gen_phantom(cfg, sample_rng(cfg.seed, i), case_id)
        write_case(root, volume, mask)
        ids.append(case_id)
    log.info(f"[PHANTOM] wrote {n_cases} phantom case(s) to {root} (shape={cfg.shape}, seed={cfg.seed})")
    return ids
