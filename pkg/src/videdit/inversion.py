"""Real-video inversion: DDIM inversion trajectory plus per-timestep
null-text embedding optimization.

The inversion pass runs the noise predictor at guidance 1 conditioned on the
source prompt. The optimizer then walks the sampling sweep top-down,
adjusting one shared-across-frames null embedding per timestep so that the
guided DDIM step lands on the recorded inversion trajectory; gradient flows
only into the embedding. An update that increases the loss is rejected and
retried at half the step size, which makes the per-timestep loss
non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import Tensor

from .attention import AttentionContext
from .denoiser import NoisePredictor
from .schedule import Schedule, ddim_inverse_step, ddim_step

MAX_HALVINGS = 10


@dataclass
class InversionRecord:
    """Inversion trajectory and optimized null embeddings for one video.

    ``trajectory[0]`` is the input video; ``trajectory[k]`` for k >= 1 sits at
    timestep ``inference_steps[S - k]`` (so the last entry is the noisiest).
    ``null_embeddings[k]`` pairs with ``inference_steps[k]`` in sampling
    order; each is shared by all frames.
    """

    trajectory: list[Tensor]
    null_embeddings: list[Tensor]
    source_prompt: str
    per_step_loss: list[float]

    def validate(self, schedule: Optional[Schedule] = None) -> None:
        if len(self.trajectory) < 2:
            raise ValueError("trajectory must contain X_0 and at least one noised latent")
        steps = len(self.trajectory) - 1
        if schedule is not None and steps != schedule.num_inference_steps:
            raise ValueError("trajectory length does not match the schedule")
        if len(self.null_embeddings) != steps:
            raise ValueError("need one null embedding per inference step")
        if len(self.per_step_loss) != steps:
            raise ValueError("need one loss per inference step")
        shape = self.null_embeddings[0].shape
        if any(e.shape != shape for e in self.null_embeddings):
            raise ValueError("null embeddings must share one shape")
        if any(not (loss >= 0) for loss in self.per_step_loss):
            raise ValueError("per-step losses must be finite and non-negative")


def ddim_invert(
    video: Tensor,
    cond: Tensor,
    model: NoisePredictor,
    schedule: Schedule,
    ctx: Optional[AttentionContext] = None,
) -> list[Tensor]:
    """Map a clean video to the noise space along the inference steps.

    Returns ``[X_0, X_{t_1}, ..., X_{t_S}]`` (ascending noise). Each inverse
    step reuses the predictor at the current latent with the *target*
    timestep, guidance 1, matching the way the sampler will later consume
    the trajectory.
    """
    if video.ndim != 4 or video.shape[0] < 1:
        raise ValueError("video must be a non-empty F x C x H x W tensor")
    if not torch.isfinite(video).all():
        raise ValueError("video contains non-finite values")

    trajectory = [video.detach().clone()]
    x = trajectory[0]
    t_prev = 0
    with torch.no_grad():
        for t in reversed(schedule.inference_steps):
            eps, _ = model.predict(x, t, cond, ctx)
            x = ddim_inverse_step(x, eps, t_prev, t, schedule)
            if not torch.isfinite(x).all():
                raise RuntimeError(f"inversion produced non-finite latents at t={t}")
            trajectory.append(x)
            t_prev = t
    return trajectory


def guided_ddim_step(
    model: NoisePredictor,
    x_t: Tensor,
    t: int,
    t_prev: int,
    eps_cond: Tensor,
    null_embed: Tensor,
    guidance_scale: float,
    schedule: Schedule,
    ctx: Optional[AttentionContext] = None,
) -> Tensor:
    """Classifier-free-guided DDIM step with a precomputed conditional eps."""
    eps_null, _ = model.predict(x_t, t, null_embed, ctx)
    eps = eps_null + guidance_scale * (eps_cond - eps_null)
    return ddim_step(x_t, eps, t, t_prev, schedule)


def null_text_optimize(
    trajectory: list[Tensor],
    cond: Tensor,
    model: NoisePredictor,
    schedule: Schedule,
    empty_embed: Tensor,
    inner_steps: int = 1,
    step_size: float = 1e-2,
    guidance_scale: float = 7.5,
    early_stop: float = 1e-5,
    ctx: Optional[AttentionContext] = None,
    callback: Optional[Callable[[int, list[float]], None]] = None,
) -> tuple[list[Tensor], list[float]]:
    """Optimize one null embedding per timestep against the inversion trajectory.

    Iterates t from the noisiest step down, threading the sampled latent
    through the guided step with the final embedding of each timestep. Each
    embedding warm-starts from the previous timestep's optimum (the first
    from ``empty_embed``). The per-frame squared errors are summed. Returns
    the embeddings (sampling order) and the final loss per timestep;
    ``callback(t, losses)`` receives each timestep's loss trace, whose first
    entry is the pre-update loss.
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    steps = schedule.inference_steps
    if len(trajectory) != len(steps) + 1:
        raise ValueError("trajectory does not match the schedule's inference steps")

    uncond_ctx = ctx.uncond_view() if ctx is not None else None
    x_bar = trajectory[-1].detach()
    null_prev = empty_embed.detach()
    nulls: list[Tensor] = []
    final_losses: list[float] = []

    for k, (t, t_prev) in enumerate(schedule.step_pairs()):
        target = trajectory[len(steps) - k - 1].detach()
        with torch.no_grad():
            eps_cond, _ = model.predict(x_bar, t, cond, ctx)

        null_t = null_prev.detach().clone().requires_grad_(True)
        lr = step_size
        opt = torch.optim.Adam([null_t], lr=lr)

        def eval_step() -> tuple[Tensor, Tensor]:
            x_prev = guided_ddim_step(
                model, x_bar, t, t_prev, eps_cond, null_t, guidance_scale, schedule, uncond_ctx
            )
            return (x_prev - target).pow(2).sum(), x_prev

        trace: list[float] = []
        x_prev_final: Optional[Tensor] = None
        for _ in range(inner_steps):
            loss, x_prev = eval_step()
            loss_before = loss.item()
            if not (loss_before >= 0) or not torch.isfinite(loss):
                raise RuntimeError(f"non-finite null-text loss at t={t}")
            if not trace:
                trace.append(loss_before)
            x_prev_final = x_prev.detach()
            if loss_before < early_stop:
                break

            snapshot = null_t.detach().clone()
            opt.zero_grad()
            loss.backward()
            if null_t.grad is None:
                raise RuntimeError("model produced no gradient for the null embedding")
            opt.step()

            accepted = False
            for _halving in range(MAX_HALVINGS + 1):
                with torch.no_grad():
                    new_loss, x_prev = eval_step()
                if new_loss.item() <= loss_before:
                    accepted = True
                    break
                # reject: restore the embedding, halve the step, retry once
                with torch.no_grad():
                    null_t.copy_(snapshot)
                lr *= 0.5
                opt = torch.optim.Adam([null_t], lr=lr)
                loss_retry, _ = eval_step()
                opt.zero_grad()
                loss_retry.backward()
                opt.step()
            if not accepted:
                with torch.no_grad():
                    null_t.copy_(snapshot)
                    _, x_prev = eval_step()
                trace.append(loss_before)
                x_prev_final = x_prev.detach()
                break
            trace.append(new_loss.item())
            x_prev_final = x_prev.detach()

        nulls.append(null_t.detach().clone())
        final_losses.append(trace[-1])
        x_bar = x_prev_final
        null_prev = nulls[-1]
        if callback is not None:
            callback(t, trace)

    return nulls, final_losses


def invert_video(
    video: Tensor,
    prompt: str,
    encoder,
    model: NoisePredictor,
    schedule: Schedule,
    inner_steps: int = 1,
    step_size: float = 1e-2,
    guidance_scale: float = 7.5,
    early_stop: float = 1e-5,
    ctx: Optional[AttentionContext] = None,
    callback: Optional[Callable[[int, list[float]], None]] = None,
) -> InversionRecord:
    """DDIM inversion followed by null-text optimization, as one record."""
    cond = encoder.encode(prompt)
    trajectory = ddim_invert(video, cond, model, schedule, ctx)
    nulls, losses = null_text_optimize(
        trajectory,
        cond,
        model,
        schedule,
        encoder.empty,
        inner_steps=inner_steps,
        step_size=step_size,
        guidance_scale=guidance_scale,
        early_stop=early_stop,
        ctx=ctx,
        callback=callback,
    )
    record = InversionRecord(trajectory, nulls, prompt, losses)
    record.validate(schedule)
    return record
