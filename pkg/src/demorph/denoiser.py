"""Noise-prediction U-Net: 9 input channels (noisy pair + morph), 6 output channels."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .morph_engine import ContractError


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 9
    out_channels: int = 6
    base_width: int = 32
    depth: int = 3
    time_embed_dim: int = 128
    resolution: int = 64
    res_blocks: int = 1
    attention: bool = True
    max_timestep: int = 1000

    def validate(self) -> None:
        if self.in_channels != 9 or self.out_channels != 6:
            raise ContractError("the demorphing denoiser takes 9 channels in and 6 out")
        if self.depth < 1 or self.base_width < 1 or self.res_blocks < 1:
            raise ContractError("depth, base_width and res_blocks must be positive")
        if self.resolution % (2 ** (self.depth - 1)) != 0 or self.resolution < 2 ** (self.depth - 1):
            raise ContractError(f"resolution {self.resolution} not divisible by 2^(depth-1) "
                                f"for depth {self.depth}")
        if self.resolution // 2 ** (self.depth - 1) < 4:
            raise ContractError(f"depth {self.depth} leaves a bottleneck smaller than 4x4 "
                                f"at resolution {self.resolution}")

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    groups = math.gcd(ch, 8)
    return nn.GroupNorm(groups, ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm = _norm(ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class UNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        base, temb = config.base_width, config.time_embed_dim
        widths = [base * 2 ** level for level in range(config.depth)]

        self.time_mlp = nn.Sequential(nn.Linear(base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(config.in_channels, base, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = base
        for level, width in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(config.res_blocks):
                blocks.append(ResBlock(ch, width, temb))
                ch = width
            self.down.append(blocks)
            last = level == config.depth - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid1 = ResBlock(ch, ch, temb)
        self.mid_attn = SelfAttention(ch) if config.attention else nn.Identity()
        self.mid2 = ResBlock(ch, ch, temb)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level in reversed(range(config.depth)):
            width = widths[level]
            blocks = nn.ModuleList()
            for _ in range(config.res_blocks):
                blocks.append(ResBlock(ch + width, width, temb))
                ch = width
            self.up.append(blocks)
            self.upsample.append(nn.Conv2d(ch, widths[level - 1], 3, padding=1) if level > 0 else nn.Identity())
            if level > 0:
                ch = widths[level - 1]

        self.norm_out = _norm(ch)
        self.conv_out = nn.Conv2d(ch, config.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        """Predict the 6-channel noise for a (B, 9, H, W) or (9, H, W) input at step(s) ``t``."""
        unbatched = x.ndim == 3
        if unbatched:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ContractError(f"expected (B, 9, H, W) input, got {tuple(x.shape)}")
        factor = 2 ** (self.config.depth - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ContractError(f"spatial size {tuple(x.shape[2:])} not divisible by {factor}")
        t = torch.as_tensor(t, dtype=torch.long, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        if int(t.min()) < 1 or int(t.max()) > self.config.max_timestep:
            raise ContractError(f"timestep outside 1..{self.config.max_timestep}")

        temb = self.time_mlp(timestep_embedding(t, self.config.base_width))
        h = self.conv_in(x)
        skips = []
        for blocks, down in zip(self.down, self.downsample):
            for block in blocks:
                h = block(h, temb)
                skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)
        for blocks, up in zip(self.up, self.upsample):
            for block in blocks:
                h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out[0] if unbatched else out


def build(config: DenoiserConfig, seed: int = 0) -> UNet:
    """Construct a U-Net with parameters initialised deterministically from ``seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet(config)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
