"""
Student segmentor: plain U-Net plus a training-only localization branch.

The branch lifts every decoder scale to full resolution with subpixel
convolution + pixel shuffle, fuses the aggregates and predicts the
3-class box-region map.
"""
import copy
import logging
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.config import UNetConfig
from app.nets.unet import UNet, count_params, init_weights, pixel_shuffle_up

log = logging.getLogger("mixseg")


class StudentOutput(NamedTuple):
    seg_logits: torch.Tensor
    loc_logits: Optional[torch.Tensor]


class LocBranch(nn.Module):
    def __init__(self, cfg: UNetConfig, channels: Optional[int] = None):
        super().__init__()
        a = channels or cfg.base_channels
        self.agg_channels = a
        self.scales = cfg.scales
        self.subpixel = nn.ModuleList(
            nn.Conv2d(cfg.channels(j), a * (2 ** (j - 1)) ** 2, kernel_size=3, padding=1)
            for j in range(1, cfg.scales + 1)
        )
        self.fuse = nn.Conv2d(a * cfg.scales, a, kernel_size=3, padding=1)
        self.head = nn.Conv2d(a, cfg.out_classes, kernel_size=1)

    def forward(self, dec_feats, out_hw) -> torch.Tensor:
        lifted = []
        for j, f in enumerate(dec_feats, start=1):
            up = pixel_shuffle_up(self.subpixel[j - 1](f), 2 ** (j - 1))
            if tuple(up.shape[-2:]) != tuple(out_hw):
                raise ValueError(f"scale {j} aggregate is {tuple(up.shape[-2:])}, expected {tuple(out_hw)}")
            lifted.append(up)
        return self.head(F.relu(self.fuse(torch.cat(lifted, dim=1))))


class StudentNet(nn.Module):
    def __init__(self, cfg: UNetConfig = UNetConfig(), loc_branch: bool = True,
                 loc_channels: Optional[int] = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.backbone = UNet(cfg, seed=seed)
        self.loc: Optional[LocBranch] = None
        if loc_branch:
            self.loc = LocBranch(cfg, loc_channels)
            init_weights(self.loc, seed + 2)
            nn.init.zeros_(self.loc.head.bias)

    @property
    def has_loc_branch(self) -> bool:
        return self.loc is not None

    def forward(self, x: torch.Tensor) -> StudentOutput:
        out = self.backbone(x)
        loc = self.loc(out.dec_feats, x.shape[-2:]) if self.loc is not None else None
        return StudentOutput(out.logits, loc)

    def infer(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x).logits


def student_forward(model: StudentNet, x: torch.Tensor) -> StudentOutput:
    return model(x)


def student_infer(model: StudentNet, x: torch.Tensor) -> torch.Tensor:
    return model.infer(x)


def strip_loc_branch(model: StudentNet) -> StudentNet:
    """Copy of the model without localization parameters."""
    stripped = copy.deepcopy(model)
    stripped.loc = None
    log.info(f"[STUDENT] stripped loc branch: {count_params(model)} -> {count_params(stripped)} params")
    return stripped
