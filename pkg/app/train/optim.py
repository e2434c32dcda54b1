import logging
from typing import List, Optional, Sequence, Tuple

import torch

from app.config import TrainConfig
from app.errors import DivergenceError

log = logging.getLogger("mixseg")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant lr0 through decay_start, then geometric decay per epoch."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    if cfg.decay_start is None or epoch <= cfg.decay_start:
        return cfg.lr0
    return cfg.lr0 * cfg.decay_factor ** (epoch - cfg.decay_start)


@torch.no_grad()
def sgd_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[Optional[torch.Tensor]],
    velocity: List[torch.Tensor],
    lr: float,
    momentum: float,
) -> Tuple[Sequence[torch.Tensor], List[torch.Tensor]]:
    """
    Heavy-ball momentum, in place:  v <- m*v + g ;  p <- p - lr*v
    Missing gradients count as zero.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError(f"params/grads/velocity length mismatch: {len(params)}/{len(grads)}/{len(velocity)}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = torch.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"grad {i} shape {tuple(g.shape)} vs param {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {i} (shape {tuple(p.shape)})")
        velocity[i].mul_(momentum).add_(g)
        p.sub_(lr * velocity[i])
    return params, velocity


def zero_velocity(params: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    return [torch.zeros_like(p) for p in params]
