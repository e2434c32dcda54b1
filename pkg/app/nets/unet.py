"""
2D U-Net backbone shared by the teacher and the student.

Scale j (1-based) runs at H / 2^(j-1) with base * 2^(j-1) channels; the
deepest scale is the bottleneck. Encoder features can be rewritten by a
skip hook before the decoder consumes them.
"""
import logging
from typing import Callable, List, NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.config import UNetConfig

log = logging.getLogger("mixseg")

SkipHook = Callable[[int, torch.Tensor], torch.Tensor]


class UNetOutput(NamedTuple):
    logits: torch.Tensor
    enc_feats: List[torch.Tensor]   # index j-1 -> scale j, after the skip hook
    dec_feats: List[torch.Tensor]   # index j-1 -> decoder output at scale j (bottleneck at the last index)


class ConvBlock(nn.Sequential):
    """(conv3x3 -> BN -> ReLU) x 2"""

    def __init__(self, in_ch: int, out_ch: int, norm: bool = True):
        layers: List[nn.Module] = []
        for c_in in (in_ch, out_ch):
            layers.append(nn.Conv2d(c_in, out_ch, kernel_size=3, padding=1, bias=not norm))
            if norm:
                layers.append(nn.BatchNorm2d(out_ch))
            layers.append(nn.ReLU(inplace=False))
        super().__init__(*layers)


def init_weights(module: nn.Module, seed: int) -> None:
    """Kaiming fan-in init for every conv, drawn from a private seeded stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)


def check_spatial(x: torch.Tensor, scales: int) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected [B, C, H, W] input, got shape {tuple(x.shape)}")
    div = 2 ** (scales - 1)
    h, w = x.shape[-2:]
    if h % div or w % div:
        raise ValueError(f"spatial size {h}x{w} not divisible by {div}")


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig = UNetConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        s = cfg.scales
        self.encoders = nn.ModuleList(
            ConvBlock(cfg.in_channels if j == 1 else cfg.channels(j - 1), cfg.channels(j), cfg.norm)
            for j in range(1, s + 1)
        )
        # decoders[j-1] produces scale j from up(scale j+1) ++ skip j
        self.decoders = nn.ModuleList(
            ConvBlock(cfg.channels(j + 1) + cfg.channels(j), cfg.channels(j), cfg.norm)
            for j in range(1, s)
        )
        self.head = nn.Conv2d(cfg.channels(1), cfg.out_classes, kernel_size=1)
        init_weights(self, seed)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, skip_hook: Optional[SkipHook] = None) -> UNetOutput:
        s = self.cfg.scales
        check_spatial(x, s)
        enc: List[torch.Tensor] = []
        f = x
        for j in range(1, s + 1):
            if j > 1:
                f = F.max_pool2d(f, 2)
            f = self.encoders[j - 1](f)
            # the hook rewrites the skip copy only; the encoder chain keeps f
            enc.append(skip_hook(j, f) if skip_hook is not None else f)

        dec: List[Optional[torch.Tensor]] = [None] * s
        dec[s - 1] = enc[s - 1]
        d = enc[s - 1]
        for j in range(s - 1, 0, -1):
            up = F.interpolate(d, size=enc[j - 1].shape[-2:], mode="bilinear", align_corners=False)
            d = self.decoders[j - 1](torch.cat([up, enc[j - 1]], dim=1))
            dec[j - 1] = d
        return UNetOutput(self.head(d), enc, dec)


def unet_forward(model: UNet, x: torch.Tensor) -> UNetOutput:
    return model(x)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def pixel_shuffle_up(feat: torch.Tensor, r: int) -> torch.Tensor:
    """[B, C*r^2, h, w] -> [B, C, h*r, w*r]"""
    if r < 1:
        raise ValueError(f"upscale factor must be >= 1, got {r}")
    if feat.shape[1] % (r * r):
        raise ValueError(f"channel count {feat.shape[1]} not divisible by r^2 = {r * r}")
    if r == 1:
        return feat
    return F.pixel_shuffle(feat, r)


def softmax_head(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=1)
