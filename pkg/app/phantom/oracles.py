"""
Brute-force reference implementations for tests: flood-fill components,
complement-region hole filling, the full postprocess pipeline, and
central-difference gradients.
"""
import itertools
from collections import deque
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

_VALID_CONNECTIVITY = {2: (4, 8), 3: (6, 18, 26)}


def neighbor_offsets(ndim: int, connectivity: int) -> List[Tuple[int, ...]]:
    if connectivity not in _VALID_CONNECTIVITY.get(ndim, ()):
        raise ValueError(f"connectivity {connectivity} invalid for {ndim}D")
    # max number of non-zero offset components allowed
    limit = {4: 1, 8: 2, 6: 1, 18: 2, 26: 3}[connectivity]
    out = []
    for off in itertools.product((-1, 0, 1), repeat=ndim):
        nz = sum(1 for o in off if o)
        if 0 < nz <= limit:
            out.append(off)
    return out


def oracle_components(mask: np.ndarray, connectivity: int) -> Tuple[np.ndarray, int]:
    """BFS labeling; labels 1..n numbered by first voxel in raster order."""
    m = np.asarray(mask, dtype=bool)
    offsets = neighbor_offsets(m.ndim, connectivity)
    labels = np.zeros(m.shape, dtype=np.int32)
    n = 0
    for start in zip(*np.nonzero(m)):
        if labels[start]:
            continue
        n += 1
        labels[start] = n
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            for off in offsets:
                nb = tuple(c + o for c, o in zip(cur, off))
                if all(0 <= v < s for v, s in zip(nb, m.shape)) and m[nb] and not labels[nb]:
                    labels[nb] = n
                    queue.append(nb)
    return labels, n


def oracle_fill_holes(mask2d: np.ndarray) -> np.ndarray:
    """Fill background regions (4-connected) that do not touch the border."""
    m = np.asarray(mask2d, dtype=bool)
    comp, n = oracle_components(~m, 4)
    out = m.copy()
    border = set(np.unique(np.concatenate([comp[0], comp[-1], comp[:, 0], comp[:, -1]]))) - {0}
    for k in range(1, n + 1):
        if k not in border:
            out[comp == k] = True
    return out


def oracle_postprocess(labels: np.ndarray) -> np.ndarray:
    lab = np.array(labels, dtype=np.uint8)
    liver = lab >= 1
    if not liver.any():
        return lab
    comp, n = oracle_components(liver, 6)
    sizes = [int((comp == k).sum()) for k in range(1, n + 1)]
    best = 1 + sizes.index(max(sizes))
    keep = comp == best
    lab[liver & ~keep] = 0
    region = keep.copy()
    for d in range(lab.shape[0]):
        liv = lab[d] >= 1
        filled = oracle_fill_holes(liv)
        lab[d][filled & ~liv] = 1
        region[d] |= filled
        les = lab[d] == 2
        filled_les = oracle_fill_holes(les)
        lab[d][filled_les & ~les] = 2
    lab[(lab == 2) & ~region] = 0
    return lab


# =========================================================
# GRADIENTS
# =========================================================

@torch.no_grad()
def oracle_grad(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    entries: Optional[Sequence[Sequence[int]]] = None,
) -> List[torch.Tensor]:
    """
    Central differences (f(p+eps) - f(p-eps)) / (2 eps), one entry at a time.
    entries[i] lists the flat indices checked in params[i]; unchecked
    entries are NaN.
    """
    grads = []
    for i, p in enumerate(params):
        flat = p.view(-1)
        g = torch.full_like(flat, float("nan"))
        idx = range(flat.numel()) if entries is None else entries[i]
        for k in idx:
            orig = flat[k].item()
            flat[k] = orig + eps
            f_plus = float(loss_fn())
            flat[k] = orig - eps
            f_minus = float(loss_fn())
            flat[k] = orig
            g[k] = (f_plus - f_minus) / (2 * eps)
        grads.append(g.view_as(p))
    return grads


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |a - n| / max(|a|, |n|) over entries that were checked."""
    a, n = analytic.reshape(-1), numeric.reshape(-1)
    keep = ~torch.isnan(n)
    if not keep.any():
        return 0.0
    a, n = a[keep].double(), n[keep].double()
    scale = max(a.abs().max().item(), n.abs().max().item(), 1e-12)
    return (a - n).abs().max().item() / scale
