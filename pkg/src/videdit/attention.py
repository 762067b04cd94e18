"""Cross-frame attention modes over shared 2D weights, plus cross-attention
map recording and injection.

The four modes differ only in which key/value tokens each frame's queries may
see; none of them introduces parameters beyond the shared Q/K/V/out
projections. With a single frame every mode degenerates to plain per-frame
self-attention (there is no temporal axis to attend over), and the layer
dispatches accordingly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor

MapKey = tuple[int, str]


class AttentionMode(enum.Enum):
    """How a frame's queries reach other frames' keys/values."""

    SELF = "self"
    SC = "sparse_causal"
    TEMPORAL_ONLY = "temporal_only"
    ST = "spatial_temporal"


@dataclass
class AttentionContext:
    """Per-run attention configuration and map state.

    Single-writer: one sampling run owns its context exclusively; the
    ``recorded`` dict and counters accumulate as the run proceeds. ``modes``
    must assign a mode to every cross-frame attention layer of the model the
    context is used with.
    """

    modes: Mapping[str, AttentionMode]
    record_maps: bool = False
    injected_maps: Optional[Mapping[MapKey, Tensor]] = None
    inject_into_uncond: bool = False
    run_id: str = ""
    timestep: Optional[int] = None
    inject_enabled: bool = True
    recorded: dict[MapKey, Tensor] = field(default_factory=dict)
    injections_applied: int = 0

    def mode_for(self, layer_id: str) -> AttentionMode:
        try:
            return self.modes[layer_id]
        except KeyError:
            raise ValueError(f"no attention mode assigned for layer {layer_id!r}") from None

    def uncond_view(self) -> "AttentionContext":
        """Context for the unconditional branch of a guided prediction.

        Shares mode assignments but never records; injection is carried over
        only when ``inject_into_uncond`` is set.
        """
        return AttentionContext(
            modes=self.modes,
            record_maps=False,
            injected_maps=self.injected_maps if self.inject_into_uncond else None,
            inject_into_uncond=self.inject_into_uncond,
            run_id=self.run_id,
            timestep=self.timestep,
            inject_enabled=self.inject_enabled,
        )


def default_attention_modes(layer_ids: Sequence[str]) -> dict[str, AttentionMode]:
    """Default mode placement: the first attention layer of each stage
    (``down`` / ``mid`` / ``up`` prefix, in forward order) runs ST, all
    others run SC."""
    modes: dict[str, AttentionMode] = {}
    seen_stages: set[str] = set()
    for layer_id in layer_ids:
        stage = layer_id.split(".", 1)[0]
        if stage in seen_stages:
            modes[layer_id] = AttentionMode.SC
        else:
            modes[layer_id] = AttentionMode.ST
            seen_stages.add(stage)
    return modes


def uniform_attention_modes(
    layer_ids: Sequence[str], mode: AttentionMode
) -> dict[str, AttentionMode]:
    return {layer_id: mode for layer_id in layer_ids}


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    # q: (..., n, d), k/v: (..., m, d); softmax over the key axis. torch's
    # softmax is max-subtracted internally, which the numerics here rely on.
    scores = torch.einsum("...nd,...md->...nm", q, k) * scale
    return torch.einsum("...nm,...md->...nd", scores.softmax(dim=-1), v)


def cross_frame_attend(
    features: Tensor,
    mode: AttentionMode,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_out: Tensor,
    heads: int = 1,
) -> Tensor:
    """Attention over an F x N x D stack of per-frame token features.

    Key/value visibility per mode:
      SELF          frame i sees frame i only;
      SC            frame i sees the first and previous frames (frame 0 its own);
      TEMPORAL_ONLY token n of frame i sees token n of every frame;
      ST            frame i sees every token of every frame.
    """
    if features.ndim != 3:
        raise ValueError(f"expected F x N x D features, got shape {tuple(features.shape)}")
    num_frames, _, dim = features.shape
    if num_frames == 0:
        raise ValueError("need at least one frame")
    for name, w in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v), ("w_out", w_out)):
        if w.shape != (dim, dim):
            raise ValueError(f"{name} must be {dim}x{dim}, got {tuple(w.shape)}")
    if dim % heads != 0:
        raise ValueError(f"feature dim {dim} not divisible by {heads} heads")

    if num_frames == 1:
        mode = AttentionMode.SELF  # single-frame degeneration

    q = rearrange(features @ w_q.T, "f n (h d) -> f h n d", h=heads)
    k = rearrange(features @ w_k.T, "f n (h d) -> f h n d", h=heads)
    v = rearrange(features @ w_v.T, "f n (h d) -> f h n d", h=heads)
    scale = (dim // heads) ** -0.5

    if mode is AttentionMode.SELF:
        out = _attend(q, k, v, scale)
    elif mode is AttentionMode.ST:
        k_all = rearrange(k, "f h n d -> h (f n) d")
        v_all = rearrange(v, "f h n d -> h (f n) d")
        out = _attend(q, k_all.unsqueeze(0), v_all.unsqueeze(0), scale)
    elif mode is AttentionMode.SC:
        frames = []
        for i in range(num_frames):
            if i == 0:
                k_i, v_i = k[0], v[0]
            else:
                k_i = torch.cat([k[0], k[i - 1]], dim=-2)
                v_i = torch.cat([v[0], v[i - 1]], dim=-2)
            frames.append(_attend(q[i], k_i, v_i, scale))
        out = torch.stack(frames)
    elif mode is AttentionMode.TEMPORAL_ONLY:
        q_t = rearrange(q, "f h n d -> n h f d")
        k_t = rearrange(k, "f h n d -> n h f d")
        v_t = rearrange(v, "f h n d -> n h f d")
        out = rearrange(_attend(q_t, k_t, v_t, scale), "n h f d -> f h n d")
    else:  # pragma: no cover - closed enumeration
        raise ValueError(f"unknown attention mode {mode!r}")

    return rearrange(out, "f h n d -> f n (h d)") @ w_out.T


def record_cross_attention(ctx: AttentionContext, layer_id: str, attn_map: Tensor) -> None:
    """Store a cross-attention map keyed by (current timestep, layer)."""
    if not ctx.record_maps:
        raise ValueError("record_cross_attention called on a non-recording context")
    if ctx.timestep is None:
        raise ValueError("context has no timestep set")
    key = (ctx.timestep, layer_id)
    if key in ctx.recorded:
        raise ValueError(f"duplicate cross-attention map for {key}")
    row_sums = attn_map.sum(dim=-1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-4):
        raise ValueError("cross-attention map rows must sum to 1")
    ctx.recorded[key] = attn_map.detach().clone()


def inject_cross_attention(ctx: AttentionContext, layer_id: str, fresh_map: Tensor) -> Tensor:
    """Return the injected map for (timestep, layer) when one is configured
    and injection is enabled; otherwise return ``fresh_map`` unchanged."""
    if ctx.injected_maps is None or not ctx.inject_enabled:
        return fresh_map
    injected = ctx.injected_maps.get((ctx.timestep, layer_id))
    if injected is None:
        return fresh_map
    if injected.shape != fresh_map.shape:
        raise ValueError(
            f"injected map shape {tuple(injected.shape)} does not match "
            f"layer {layer_id!r} map shape {tuple(fresh_map.shape)}"
        )
    ctx.injections_applied += 1
    return injected
