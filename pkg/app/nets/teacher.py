"""
Teacher annotator: U-Net whose encoder features are reweighted by box-mask
attention, organ first, then lesion.
"""
import logging
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from app.config import AttentionVariant, UNetConfig
from app.data.ingest import BoxMaskPyramid
from app.nets.unet import UNet, init_weights

log = logging.getLogger("mixseg")


class GateConv(nn.Sequential):
    """conv3x3 -> BN -> ReLU -> conv3x3 (biased, no norm on the output)."""

    def __init__(self, in_ch: int, out_ch: int, norm: bool = True):
        layers: List[nn.Module] = [nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=not norm)]
        if norm:
            layers.append(nn.BatchNorm2d(out_ch))
        layers += [nn.ReLU(inplace=False), nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1)]
        super().__init__(*layers)

    @property
    def out_conv(self) -> nn.Conv2d:
        return self[-1]


class O2LAttention(nn.Module):
    """
    One scale of box attention over a skip feature f:

      o2l            f_og = f + s(og(b_o)) * f,  f_out = f_og + s(le(b_l)) * f_og
      no_shortcut    f_og = s(og(b_o)) * f,      f_out = s(le(b_l)) * f_og
      shortcut_only  f_og = f + og(b_o),         f_out = f_og + le(b_l)
      multichannel   f_out = f + s(g([b_o, b_l])) * f
      none           f_out = f
    """

    def __init__(self, channels: int, variant: AttentionVariant = AttentionVariant.O2L, norm: bool = True):
        super().__init__()
        self.channels = channels
        self.variant = AttentionVariant(variant)
        if self.variant == AttentionVariant.MULTICHANNEL:
            self.conv_og = GateConv(2, channels, norm)
            self.conv_le = None
        elif self.variant == AttentionVariant.NONE:
            self.conv_og = None
            self.conv_le = None
        else:
            self.conv_og = GateConv(1, channels, norm)
            self.conv_le = GateConv(1, channels, norm)

    def _check(self, f: torch.Tensor, organ: torch.Tensor, lesion: torch.Tensor) -> None:
        if f.dim() != 4 or f.shape[1] != self.channels:
            raise ValueError(f"feature shape {tuple(f.shape)} does not carry {self.channels} channels")
        want = (f.shape[0], 1) + tuple(f.shape[-2:])
        for name, m in (("organ", organ), ("lesion", lesion)):
            if tuple(m.shape) != want:
                raise ValueError(f"{name} mask shape {tuple(m.shape)} does not match feature {want}")

    def forward(self, f: torch.Tensor, organ: torch.Tensor, lesion: torch.Tensor) -> torch.Tensor:
        self._check(f, organ, lesion)
        v = self.variant
        if v == AttentionVariant.NONE:
            return f
        if v == AttentionVariant.MULTICHANNEL:
            gate = torch.sigmoid(self.conv_og(torch.cat([organ, lesion], dim=1)))
            return f + gate * f
        if v == AttentionVariant.SHORTCUT_ONLY:
            f_og = f + self.conv_og(organ)
            return f_og + self.conv_le(lesion)
        g_og = torch.sigmoid(self.conv_og(organ))
        g_le = torch.sigmoid(self.conv_le(lesion))
        if v == AttentionVariant.NO_SHORTCUT:
            return g_le * (g_og * f)
        f_og = f + g_og * f
        return f_og + g_le * f_og


def o2l_attention(att: O2LAttention, f_in: torch.Tensor, organ: torch.Tensor, lesion: torch.Tensor) -> torch.Tensor:
    return att(f_in, organ, lesion)


class TeacherNet(nn.Module):
    def __init__(self, cfg: UNetConfig = UNetConfig(), variant: AttentionVariant = AttentionVariant.O2L,
                 seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.variant = AttentionVariant(variant)
        self.backbone = UNet(cfg, seed=seed)
        self.attentions = nn.ModuleList(
            O2LAttention(cfg.channels(j), self.variant, cfg.norm) for j in range(1, cfg.scales + 1)
        )
        init_weights(self.attentions, seed + 1)

    def forward(self, x: torch.Tensor, organ: Sequence[torch.Tensor], lesion: Sequence[torch.Tensor]) -> torch.Tensor:
        s = self.cfg.scales
        if len(organ) < s or len(lesion) < s:
            raise ValueError(f"box pyramid has {min(len(organ), len(lesion))} scales, network needs {s}")

        def hook(j: int, f: torch.Tensor) -> torch.Tensor:
            return self.attentions[j - 1](f, organ[j - 1], lesion[j - 1])

        return self.backbone(x, skip_hook=hook).logits


def teacher_forward(model: TeacherNet, x: torch.Tensor,
                    organ: Sequence[torch.Tensor], lesion: Sequence[torch.Tensor]) -> torch.Tensor:
    return model(x, organ, lesion)


def stack_pyramids(pyramids: Sequence[BoxMaskPyramid], device=None,
                   dtype: torch.dtype = torch.float32) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
    """Batch per-sample pyramids into per-scale [B, 1, h, w] tensors."""
    if not pyramids:
        raise ValueError("no pyramids to stack")
    def batch(maps) -> torch.Tensor:
        return torch.from_numpy(np.stack(maps)[:, None]).to(device=device, dtype=dtype)

    organ, lesion = [], []
    for j in range(pyramids[0].scales):
        organ.append(batch([p.organ[j] for p in pyramids]))
        lesion.append(batch([p.lesion[j] for p in pyramids]))
    return organ, lesion
