"""Toy pixel-space U-Net noise predictor.

The network is a small 2D encoder-decoder whose convolutional blocks run per
frame; its self-attention layers are cross-frame attention layers driven by
an :class:`~videdit.attention.AttentionContext`, so the same weights serve
both single-image use (all-SELF modes) and inflated video use. No weights
are added or modified by the inflation: frames share every parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol

import torch
import torch.nn as nn
from einops import rearrange
from torch import Tensor

from .attention import (
    AttentionContext,
    cross_frame_attend,
    default_attention_modes,
    inject_cross_attention,
    record_cross_attention,
    uniform_attention_modes,
    AttentionMode,
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    heads: int = 2
    text_dim: int = 16
    text_len: int = 8
    time_dim: int = 128
    groups: int = 8

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def attention_levels(self) -> tuple[int, ...]:
        # Full resolution stays attention-free; every deeper level attends.
        return tuple(range(1, len(self.channel_mults)))

    def validate(self) -> None:
        levels = len(self.channel_mults)
        if levels < 2:
            raise ValueError("need at least two resolution levels")
        if any(m < 1 for m in self.channel_mults):
            raise ValueError("channel multipliers must be positive")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        factor = 2 ** (levels - 1)
        if self.image_size % factor != 0 or self.image_size // factor < 2:
            raise ValueError(
                f"image size {self.image_size} incompatible with {levels - 1} downsamplings"
            )
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even")
        chs = self.channels
        norm_widths = set(chs)
        for i in range(levels):
            above = chs[i + 1] if i + 1 < levels else chs[-1]
            norm_widths.add(above + chs[i])
        if any(c % self.groups != 0 for c in norm_widths):
            raise ValueError("all block widths must be divisible by the group-norm groups")
        if any(chs[i] % self.heads != 0 for i in self.attention_levels):
            raise ValueError("attention channel widths must be divisible by heads")
        if self.text_dim < 1 or self.text_len < 1:
            raise ValueError("text embedding dims must be positive")


class NoisePredictor(Protocol):
    """Interface consumed by inversion and the edit pipeline."""

    def predict(
        self, x_t: Tensor, t: int, cond: Tensor, ctx: Optional[AttentionContext] = None
    ) -> tuple[Tensor, dict[str, Tensor]]: ...


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
        )
        args = t.float()[:, None] * freqs[None, :]
        return self.mlp(torch.cat([args.sin(), args.cos()], dim=-1))


class ResBlock(nn.Module):
    """Per-frame residual convolution block with timestep conditioning."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttentionLayer(nn.Module):
    """Cross-frame attention over spatial tokens; mode comes from the context."""

    def __init__(self, layer_id: str, channels: int, heads: int, groups: int):
        super().__init__()
        self.layer_id = layer_id
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels, bias=False)

    def forward(self, x: Tensor, ctx: AttentionContext) -> Tensor:
        height = x.shape[-2]
        tokens = rearrange(self.norm(x), "f c h w -> f (h w) c")
        out = cross_frame_attend(
            tokens,
            ctx.mode_for(self.layer_id),
            self.to_q.weight,
            self.to_k.weight,
            self.to_v.weight,
            self.to_out.weight,
            heads=self.heads,
        )
        return x + rearrange(out, "f (h w) c -> f c h w", h=height)


class TextCrossAttentionLayer(nn.Module):
    """Per-frame attention from spatial tokens to text tokens.

    Each frame independently attends to the same conditioning sequence. The
    softmax map is recorded or replaced through the context; the freshly
    computed map is always the one returned.
    """

    def __init__(self, layer_id: str, channels: int, text_dim: int, heads: int, groups: int):
        super().__init__()
        self.layer_id = layer_id
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(text_dim, channels, bias=False)
        self.to_v = nn.Linear(text_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels, bias=False)

    def forward(
        self, x: Tensor, cond: Tensor, ctx: Optional[AttentionContext]
    ) -> tuple[Tensor, Tensor]:
        f, c, height, _ = x.shape
        tokens = rearrange(self.norm(x), "f c h w -> f (h w) c")
        q = rearrange(self.to_q(tokens), "f n (h d) -> f h n d", h=self.heads)
        k = rearrange(self.to_k(cond), "f l (h d) -> f h l d", h=self.heads)
        v = rearrange(self.to_v(cond), "f l (h d) -> f h l d", h=self.heads)
        scale = (c // self.heads) ** -0.5
        maps = torch.einsum("fhnd,fhld->fhnl", q, k).mul(scale).softmax(dim=-1)

        used = maps
        if ctx is not None:
            used = inject_cross_attention(ctx, self.layer_id, maps)
            if ctx.record_maps:
                record_cross_attention(ctx, self.layer_id, maps)

        out = torch.einsum("fhnl,fhld->fhnd", used, v)
        out = self.to_out(rearrange(out, "f h n d -> f n (h d)"))
        return x + rearrange(out, "f (h w) c -> f c h w", h=height), maps


class _Level(nn.Module):
    def __init__(self, res: ResBlock, self_attn=None, cross_attn=None, resample=None):
        super().__init__()
        self.res = res
        self.self_attn = self_attn
        self.cross_attn = cross_attn
        self.resample = resample


class ToyUNet(nn.Module):
    """Small frozen-weight stand-in for a pretrained image diffusion model.

    ``forward`` consumes an F x C x H x W stack of frames. Convolutions treat
    the frame axis as a batch (the 2D network applied per frame); attention
    layers see all frames and mix them according to the context's modes, so
    running on videos adds no parameters over the single-image model.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        chs = config.channels
        levels = len(chs)
        attn_levels = set(config.attention_levels)

        self.time_embed = TimeEmbedding(config.time_dim)
        self.conv_in = nn.Conv2d(config.in_channels, chs[0], 3, padding=1)

        def attn_pair(stage: str, level: int, ch: int):
            if level not in attn_levels and stage != "mid":
                return None, None
            layer_id = f"{stage}.{level}"
            return (
                SelfAttentionLayer(layer_id, ch, config.heads, config.groups),
                TextCrossAttentionLayer(
                    layer_id, ch, config.text_dim, config.heads, config.groups
                ),
            )

        self.down_levels = nn.ModuleList()
        for i in range(levels):
            in_ch = chs[i - 1] if i > 0 else chs[0]
            self_attn, cross_attn = attn_pair("down", i, chs[i])
            resample = (
                nn.Conv2d(chs[i], chs[i], 3, stride=2, padding=1) if i < levels - 1 else None
            )
            self.down_levels.append(
                _Level(
                    ResBlock(in_ch, chs[i], config.time_dim, config.groups),
                    self_attn,
                    cross_attn,
                    resample,
                )
            )

        mid_attn, mid_cross = attn_pair("mid", 0, chs[-1])
        self.mid_res1 = ResBlock(chs[-1], chs[-1], config.time_dim, config.groups)
        self.mid_self_attn = mid_attn
        self.mid_cross_attn = mid_cross
        self.mid_res2 = ResBlock(chs[-1], chs[-1], config.time_dim, config.groups)

        self.up_levels = nn.ModuleList()
        for i in reversed(range(levels)):
            above = chs[i + 1] if i + 1 < levels else chs[-1]
            self_attn, cross_attn = attn_pair("up", i, chs[i])
            resample = (
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(chs[i], chs[i], 3, padding=1),
                )
                if i > 0
                else None
            )
            self.up_levels.append(
                _Level(
                    ResBlock(above + chs[i], chs[i], config.time_dim, config.groups),
                    self_attn,
                    cross_attn,
                    resample,
                )
            )

        self.norm_out = nn.GroupNorm(config.groups, chs[0])
        self.conv_out = nn.Conv2d(chs[0], config.in_channels, 3, padding=1)

    @property
    def attention_layer_ids(self) -> tuple[str, ...]:
        """Cross-frame self-attention layer ids, in forward order."""
        ids = []
        for level in self.down_levels:
            if level.self_attn is not None:
                ids.append(level.self_attn.layer_id)
        ids.append(self.mid_self_attn.layer_id)
        for level in self.up_levels:
            if level.self_attn is not None:
                ids.append(level.self_attn.layer_id)
        return tuple(ids)

    @property
    def cross_attention_layer_ids(self) -> tuple[str, ...]:
        return self.attention_layer_ids  # paired one-to-one by construction

    def default_context(self, **kwargs) -> AttentionContext:
        return AttentionContext(default_attention_modes(self.attention_layer_ids), **kwargs)

    def self_mode_context(self, **kwargs) -> AttentionContext:
        return AttentionContext(
            uniform_attention_modes(self.attention_layer_ids, AttentionMode.SELF), **kwargs
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_inputs(self, x: Tensor, cond: Tensor, ctx: AttentionContext) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected F x {cfg.in_channels} x H x W input, got {tuple(x.shape)}")
        if x.shape[0] < 1:
            raise ValueError("need at least one frame")
        if x.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected {cfg.image_size}x{cfg.image_size} frames, got {tuple(x.shape[-2:])}"
            )
        if cond.ndim == 2:
            cond = cond.unsqueeze(0).expand(x.shape[0], -1, -1)
        if cond.ndim != 3 or cond.shape[0] != x.shape[0] or cond.shape[-1] != cfg.text_dim:
            raise ValueError(f"conditioning shape {tuple(cond.shape)} incompatible with input")
        if set(ctx.modes) != set(self.attention_layer_ids):
            raise ValueError(
                "context mode assignment does not match the model's attention layers"
            )
        return cond

    def forward(
        self,
        x: Tensor,
        t,
        cond: Tensor,
        ctx: Optional[AttentionContext] = None,
    ) -> tuple[Tensor, dict[str, Tensor]]:
        if ctx is None:
            ctx = self.default_context()
        cond = self._check_inputs(x, cond, ctx)
        if isinstance(t, Tensor):
            t_vec = t.reshape(-1)
            if t_vec.shape[0] != x.shape[0]:
                raise ValueError("per-frame timesteps must match the frame count")
        else:
            ctx.timestep = int(t)
            t_vec = torch.full((x.shape[0],), int(t))
        temb = self.time_embed(t_vec)

        maps: dict[str, Tensor] = {}
        h = self.conv_in(x)
        skips = []
        for level in self.down_levels:
            h = level.res(h, temb)
            if level.self_attn is not None:
                h = level.self_attn(h, ctx)
                h, m = level.cross_attn(h, cond, ctx)
                maps[level.cross_attn.layer_id] = m
            skips.append(h)
            if level.resample is not None:
                h = level.resample(h)

        h = self.mid_res1(h, temb)
        h = self.mid_self_attn(h, ctx)
        h, m = self.mid_cross_attn(h, cond, ctx)
        maps[self.mid_cross_attn.layer_id] = m
        h = self.mid_res2(h, temb)

        for level in self.up_levels:
            h = torch.cat([h, skips.pop()], dim=1)
            h = level.res(h, temb)
            if level.self_attn is not None:
                h = level.self_attn(h, ctx)
                h, m = level.cross_attn(h, cond, ctx)
                maps[level.cross_attn.layer_id] = m
            if level.resample is not None:
                h = level.resample(h)

        eps = self.conv_out(torch.nn.functional.silu(self.norm_out(h)))
        return eps, maps

    def predict(
        self, x_t: Tensor, t: int, cond: Tensor, ctx: Optional[AttentionContext] = None
    ) -> tuple[Tensor, dict[str, Tensor]]:
        """NoisePredictor interface; identical to calling the module."""
        return self(x_t, t, cond, ctx)

    def frame_features(self, video: Tensor, cond: Tensor) -> Tensor:
        """Spatially pooled deepest encoder-block features, one row per frame.

        Runs the down path per frame (all-SELF modes, t = 0); used as the toy
        stand-in for a pretrained frame embedding when scoring consistency.
        """
        ctx = self.self_mode_context()
        cond = self._check_inputs(video, cond, ctx)
        ctx.timestep = 0
        with torch.no_grad():
            temb = self.time_embed(torch.zeros(video.shape[0]))
            h = self.conv_in(video)
            deepest = h
            for level in self.down_levels:
                h = level.res(h, temb)
                if level.self_attn is not None:
                    h = level.self_attn(h, ctx)
                    h, _ = level.cross_attn(h, cond, ctx)
                deepest = h
                if level.resample is not None:
                    h = level.resample(h)
        return deepest.mean(dim=(-2, -1))


def build_toy_unet(config: ModelConfig, seed: int = 0) -> ToyUNet:
    """Construct a ToyUNet with deterministic initialization under ``seed``."""
    config.validate()
    torch.manual_seed(seed)
    model = ToyUNet(config)
    model.eval()
    return model
