"""Noise schedule and deterministic DDIM stepping.

All stepping is the eta=0 (fully deterministic) DDIM variant. Forward and
inverse steps are expressed through one shared pair of coefficients computed
in float64, so inverse(forward(x)) round-trips to within a few float32 ulps
even at the noisiest timesteps.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True, eq=False)
class Schedule:
    """Training noise schedule plus the inference-step subsequence for DDIM.

    ``alpha_bars`` has ``num_train_steps + 1`` entries, indexed by timestep,
    with ``alpha_bars[0] == 1`` (the clean-data endpoint). Both coefficient
    tensors are float64. ``inference_steps`` is strictly decreasing within
    ``[1, num_train_steps]``.
    """

    num_train_steps: int
    betas: Tensor
    alpha_bars: Tensor
    inference_steps: tuple[int, ...]

    @property
    def num_inference_steps(self) -> int:
        return len(self.inference_steps)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.num_train_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_train_steps}]")
        return float(self.alpha_bars[t])

    def step_pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs for one full sampling sweep, ending at t_prev = 0."""
        steps = list(self.inference_steps)
        return list(zip(steps, steps[1:] + [0]))

    def validate(self) -> None:
        if self.betas.shape != (self.num_train_steps,):
            raise ValueError("betas length must equal num_train_steps")
        if self.alpha_bars.shape != (self.num_train_steps + 1,):
            raise ValueError("alpha_bars must have num_train_steps + 1 entries")
        if not bool((self.betas > 0).all()) or not bool((self.betas < 1).all()):
            raise ValueError("betas must lie in (0, 1)")
        if not bool((self.alpha_bars > 0).all()) or not bool((self.alpha_bars <= 1).all()):
            raise ValueError("alpha_bars must lie in (0, 1]")
        diffs = self.alpha_bars[1:] - self.alpha_bars[:-1]
        if not bool((diffs < 0).all()):
            raise ValueError("alpha_bars must be strictly decreasing")
        steps = self.inference_steps
        if len(steps) < 2:
            raise ValueError("need at least 2 inference steps")
        if any(not 1 <= s <= self.num_train_steps for s in steps):
            raise ValueError("inference steps must lie in [1, num_train_steps]")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError("inference steps must be strictly decreasing")

    def hash(self) -> str:
        """Content hash used by run manifests to pin the schedule."""
        digest = hashlib.sha256()
        digest.update(str(self.num_train_steps).encode())
        digest.update(self.betas.numpy().tobytes())
        digest.update(",".join(map(str, self.inference_steps)).encode())
        return digest.hexdigest()


def make_schedule(
    num_train_steps: int,
    beta_start: float,
    beta_end: float,
    num_inference_steps: int,
) -> Schedule:
    """Build a linear-beta schedule with evenly spaced inference steps.

    The inference subsequence has constant spacing ``num_train_steps //
    num_inference_steps`` and its final step lands at t = 1.
    """
    if num_train_steps < 1:
        raise ValueError("num_train_steps must be positive")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if not 2 <= num_inference_steps <= num_train_steps:
        raise ValueError("need 2 <= num_inference_steps <= num_train_steps")

    betas = torch.linspace(beta_start, beta_end, num_train_steps, dtype=torch.float64)
    alpha_bars = torch.cat(
        [torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)]
    )
    ratio = num_train_steps // num_inference_steps
    steps = tuple(1 + ratio * k for k in reversed(range(num_inference_steps)))

    schedule = Schedule(
        num_train_steps=num_train_steps,
        betas=betas,
        alpha_bars=alpha_bars,
        inference_steps=steps,
    )
    schedule.validate()
    return schedule


def _check_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _transfer_coeffs(schedule: Schedule, t_from: int, t_to: int) -> tuple[float, float]:
    # x_to = c1 * x_from + c2 * eps, in float64 so the forward/inverse pair
    # cancels exactly: c1_fwd * c1_inv == 1 and c1_inv * c2_fwd + c2_inv == 0.
    ab_from = schedule.alpha_bar(t_from)
    ab_to = schedule.alpha_bar(t_to)
    c1 = math.sqrt(ab_to / ab_from)
    c2 = math.sqrt(1.0 - ab_to) - math.sqrt(ab_to * (1.0 - ab_from) / ab_from)
    return c1, c2


def _apply_transfer(x: Tensor, eps: Tensor, c1: float, c2: float) -> Tensor:
    # The coefficients can exceed 10 at high noise levels; applying them in
    # the input dtype would round them and spoil round-trip cancellation, so
    # the elementwise math runs in float64 (still differentiable).
    out = c1 * x.to(torch.float64) + c2 * eps.to(torch.float64)
    return out.to(x.dtype)


def ddim_step(x_t: Tensor, eps: Tensor, t: int, t_prev: int, schedule: Schedule) -> Tensor:
    """One deterministic denoising step from timestep t down to t_prev.

    Equivalent to predicting x0 = (x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
    and re-noising it to level t_prev with the same eps.
    """
    _check_shapes(x_t, eps)
    if t_prev < 0 or t <= t_prev:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    c1, c2 = _transfer_coeffs(schedule, t, t_prev)
    return _apply_transfer(x_t, eps, c1, c2)


def ddim_inverse_step(
    x_t_prev: Tensor, eps: Tensor, t_prev: int, t: int, schedule: Schedule
) -> Tensor:
    """Exact algebraic inverse of :func:`ddim_step` under the same eps."""
    _check_shapes(x_t_prev, eps)
    if t_prev < 0 or t <= t_prev:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    c1, c2 = _transfer_coeffs(schedule, t_prev, t)
    return _apply_transfer(x_t_prev, eps, c1, c2)


def add_noise(x_0: Tensor, noise: Tensor, t: int, schedule: Schedule) -> Tensor:
    """Sample the forward process q(x_t | x_0) with a given noise draw."""
    _check_shapes(x_0, noise)
    ab = schedule.alpha_bar(t)
    return _apply_transfer(x_0, noise, math.sqrt(ab), math.sqrt(1.0 - ab))
