import logging
from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn.functional as F

from app.config import TrainConfig

log = logging.getLogger("mixseg")

SIMPLEX_CHECK_TOL = 1e-4


class LossParts(NamedTuple):
    l_seg: torch.Tensor
    l_loc: torch.Tensor
    l_s: torch.Tensor


def _as_distribution(target: torch.Tensor, num_classes: int, like: torch.Tensor) -> torch.Tensor:
    if not target.is_floating_point():
        if target.dim() != like.dim() - 1:
            raise ValueError(f"hard target shape {tuple(target.shape)} vs logits {tuple(like.shape)}")
        q = F.one_hot(target.long(), num_classes).movedim(-1, 1)
        return q.to(like.dtype)
    if target.shape != like.shape:
        raise ValueError(f"soft target shape {tuple(target.shape)} vs logits {tuple(like.shape)}")
    q = target.to(like.dtype)
    with torch.no_grad():
        if q.min() < -SIMPLEX_CHECK_TOL or (q.sum(dim=1) - 1).abs().max() > SIMPLEX_CHECK_TOL:
            raise ValueError("soft target is not a per-pixel probability simplex")
    return q


def cross_entropy(
    logits: torch.Tensor,
    target: torch.Tensor,
    class_weights: Optional[Sequence[float]] = None,
) -> torch.Tensor:
    """
    mean over batch and pixels of -sum_c w_c q_c log p_c.
    Integer targets are class maps [B, H, W]; float targets are [B, C, H, W] distributions.
    """
    c = logits.shape[1]
    q = _as_distribution(target, c, logits)
    logp = F.log_softmax(logits, dim=1)
    terms = q * logp
    if class_weights is not None:
        w = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
        if w.numel() != c:
            raise ValueError(f"{w.numel()} class weights for {c} classes")
        terms = terms * w.view(1, c, *([1] * (logits.dim() - 2)))
    return -terms.sum(dim=1).mean()


def student_loss(
    seg_logits: torch.Tensor,
    loc_logits: Optional[torch.Tensor],
    seg_target: torch.Tensor,
    loc_target: torch.Tensor,
    cfg: TrainConfig,
) -> LossParts:
    """L_s = L_seg + alpha * L_loc; L_loc is zero when the branch is off."""
    l_seg = cross_entropy(seg_logits, seg_target)
    if loc_logits is None:
        l_loc = torch.zeros((), dtype=seg_logits.dtype, device=seg_logits.device)
    else:
        l_loc = cross_entropy(loc_logits, loc_target, cfg.loc_class_weights)
    return LossParts(l_seg, l_loc, l_seg + cfg.alpha * l_loc)
