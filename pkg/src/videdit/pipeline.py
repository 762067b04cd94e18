"""End-to-end editing: reference reconstruction pass that records
cross-attention maps, then the guided edit pass that re-injects them.

Threshold semantics: tau values are fractions of the sampling sweep counted
from the noisiest step; a mechanism governed by tau is active for the first
ceil(tau * S) steps. tau_m gates map injection, tau_null gates use of the
optimized null embeddings (afterwards the encoder's empty-string embedding
takes over as the unconditional branch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import torch
from torch import Tensor

from .attention import AttentionContext, AttentionMode, MapKey, default_attention_modes
from .denoiser import NoisePredictor
from .inversion import InversionRecord
from .schedule import Schedule, ddim_step


@dataclass(frozen=True)
class EditConfig:
    """Edit-pass settings; defaults follow the reference operating point."""

    target_prompt: str
    guidance_scale: float = 7.5
    num_steps: int = 50
    tau_m: float = 0.8
    tau_null: float = 0.5
    seed: int = 0
    inject_into_uncond: bool = False

    def validate(self) -> None:
        if self.guidance_scale < 1:
            raise ValueError("guidance scale must be >= 1")
        if not 0 <= self.tau_m <= 1 or not 0 <= self.tau_null <= 1:
            raise ValueError("thresholds must lie in [0, 1]")
        if self.num_steps < 2:
            raise ValueError("need at least 2 sampling steps")


@dataclass
class EditResult:
    edited_video: Tensor
    reconstruction: Optional[Tensor]
    recorded_maps: Mapping[MapKey, Tensor]
    latents: Optional[list[Tensor]] = None


def active_steps(tau: float, num_steps: int) -> int:
    """Number of leading sampling steps a threshold keeps active."""
    # guard against float noise in tau * S (e.g. 0.8 * 50) pushing ceil up
    return math.ceil(tau * num_steps - 1e-9)


def cfg_predict(
    model: NoisePredictor,
    x_t: Tensor,
    t: int,
    cond: Tensor,
    null_embed: Tensor,
    w: float,
    ctx: AttentionContext,
) -> Tensor:
    """Classifier-free-guided noise prediction.

    The conditional branch runs under ``ctx`` (recording/injection as
    configured); the unconditional branch runs under ``ctx.uncond_view()``.
    At w == 1 the unconditional branch is skipped and the conditional
    prediction is returned exactly.
    """
    if w < 1:
        raise ValueError("guidance scale must be >= 1")
    eps_cond, _ = model.predict(x_t, t, cond, ctx)
    if w == 1:
        return eps_cond
    eps_null, _ = model.predict(x_t, t, null_embed, ctx.uncond_view())
    if eps_null.shape != eps_cond.shape:
        raise ValueError("conditional and unconditional branches disagree on shape")
    return eps_null + w * (eps_cond - eps_null)


def reconstruct(
    inv: InversionRecord,
    model: NoisePredictor,
    schedule: Schedule,
    encoder,
    w: float = 7.5,
    modes: Optional[Mapping[str, AttentionMode]] = None,
) -> tuple[Tensor, dict[MapKey, Tensor]]:
    """Reference pass: sample from the inversion endpoint with the optimized
    null embeddings, recording the conditional branch's cross-attention maps
    at every step and layer. Returns the final video (clamped to [0, 1]) and
    the recorded maps."""
    inv.validate(schedule)
    cond = encoder.encode(inv.source_prompt)
    ctx = AttentionContext(
        modes=dict(modes) if modes is not None else default_attention_modes(
            model.attention_layer_ids
        ),
        record_maps=True,
    )
    x = inv.trajectory[-1]
    with torch.no_grad():
        for k, (t, t_prev) in enumerate(schedule.step_pairs()):
            eps = cfg_predict(model, x, t, cond, inv.null_embeddings[k], w, ctx)
            x = ddim_step(x, eps, t, t_prev, schedule)
    return x.clamp(0, 1), dict(ctx.recorded)


def edit(
    inv: InversionRecord,
    maps: Mapping[MapKey, Tensor],
    cfg: EditConfig,
    model: NoisePredictor,
    schedule: Schedule,
    encoder,
    modes: Optional[Mapping[str, AttentionMode]] = None,
    reconstruction: Optional[Tensor] = None,
    keep_latents: bool = False,
) -> EditResult:
    """Guided edit pass under the target prompt.

    Starts from the inversion endpoint; injects the reference maps for the
    first ceil(tau_m * S) steps and uses the optimized null embeddings for
    the first ceil(tau_null * S) steps, the empty-string embedding after.
    """
    cfg.validate()
    inv.validate(schedule)
    num_steps = schedule.num_inference_steps
    if cfg.num_steps != num_steps:
        raise ValueError(
            f"edit config expects {cfg.num_steps} steps but the schedule has {num_steps}"
        )
    inject_until = active_steps(cfg.tau_m, num_steps)
    null_until = active_steps(cfg.tau_null, num_steps)
    if inject_until > 0:
        needed = {
            (t, layer)
            for t, _ in schedule.step_pairs()[:inject_until]
            for layer in model.cross_attention_layer_ids
        }
        missing = needed - set(maps)
        if missing:
            raise ValueError(f"reference maps missing {len(missing)} (timestep, layer) entries")

    cond = encoder.encode(cfg.target_prompt)
    empty = encoder.empty
    ctx = AttentionContext(
        modes=dict(modes) if modes is not None else default_attention_modes(
            model.attention_layer_ids
        ),
        injected_maps=dict(maps),
        inject_into_uncond=cfg.inject_into_uncond,
    )

    x = inv.trajectory[-1]
    latents = [x] if keep_latents else None
    with torch.no_grad():
        for k, (t, t_prev) in enumerate(schedule.step_pairs()):
            step_no = k + 1
            ctx.inject_enabled = step_no <= inject_until
            null_embed = inv.null_embeddings[k] if step_no <= null_until else empty
            eps = cfg_predict(model, x, t, cond, null_embed, cfg.guidance_scale, ctx)
            x = ddim_step(x, eps, t, t_prev, schedule)
            if keep_latents:
                latents.append(x)
    return EditResult(
        edited_video=x.clamp(0, 1),
        reconstruction=reconstruction,
        recorded_maps=dict(maps),
        latents=latents,
    )
