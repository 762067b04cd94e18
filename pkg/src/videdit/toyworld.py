"""Synthetic moving-shape videos, the toy text encoder, and denoiser training.

Scenes are rigid integer-pixel translations of a colored shape over a plain
background, with a canonical one-sentence prompt per scene. They stand in for
real videos so that inversion and editing behavior can be verified end to end
at desk scale.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .attention import AttentionContext
from .denoiser import ToyUNet
from .schedule import Schedule

SHAPES = ("square", "circle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
MOTIONS = {  # (dx, dy) in pixels per frame; y grows downward
    "left": (-1, 0),
    "right": (1, 0),
    "up": (0, -1),
    "down": (0, 1),
}
BACKGROUNDS = {"black": 0.0, "white": 1.0}

FILLER_WORDS = ("a", "moving", "on")


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    motion: str
    background: str
    num_frames: int = 8
    image_size: int = 32
    shape_size: int = 6  # half-extent of the square / radius of the circle
    speed: int = 1

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion {self.motion!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if self.num_frames < 1 or self.image_size < 4 or self.shape_size < 1:
            raise ValueError("degenerate scene dimensions")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")


def scene_prompt(spec: SceneSpec) -> str:
    return f"a {spec.color} {spec.shape} moving {spec.motion} on {spec.background}"


def _centers(spec: SceneSpec, seed: int) -> list[tuple[int, int]]:
    """Integer shape centers per frame; raises if the shape would leave the canvas."""
    spec.validate()
    dx, dy = MOTIONS[spec.motion]
    dx, dy = dx * spec.speed, dy * spec.speed
    travel = spec.speed * (spec.num_frames - 1)
    half = spec.shape_size
    lo = half
    hi = spec.image_size - 1 - half
    # valid start range accounts for total travel in the motion direction
    x_min = lo + (travel if dx < 0 else 0)
    x_max = hi - (travel if dx > 0 else 0)
    y_min = lo + (travel if dy < 0 else 0)
    y_max = hi - (travel if dy > 0 else 0)
    if x_min > x_max or y_min > y_max:
        raise ValueError(
            f"shape of size {spec.shape_size} moving {spec.motion} for "
            f"{spec.num_frames} frames does not fit a {spec.image_size}px canvas"
        )
    rng = random.Random(seed)
    cx = rng.randint(x_min, x_max)
    cy = rng.randint(y_min, y_max)
    return [(cx + dx * i, cy + dy * i) for i in range(spec.num_frames)]


def foreground_masks(spec: SceneSpec, seed: int) -> Tensor:
    """Boolean F x H x W foreground masks for the scene's shape."""
    centers = _centers(spec, seed)
    size = spec.image_size
    ys = torch.arange(size).view(-1, 1)
    xs = torch.arange(size).view(1, -1)
    masks = []
    for cx, cy in centers:
        if spec.shape == "square":
            m = (xs - cx).abs().le(spec.shape_size) & (ys - cy).abs().le(spec.shape_size)
        else:
            m = (xs - cx).pow(2) + (ys - cy).pow(2) <= spec.shape_size**2
        masks.append(m)
    return torch.stack(masks)


def render_scene(spec: SceneSpec, seed: int) -> tuple[Tensor, str]:
    """Render the scene to an F x 3 x H x W video in [0, 1] plus its prompt."""
    masks = foreground_masks(spec, seed)
    bg = BACKGROUNDS[spec.background]
    color = torch.tensor(COLORS[spec.color]).view(1, 3, 1, 1)
    video = torch.full((spec.num_frames, 3, spec.image_size, spec.image_size), bg)
    fg = masks.unsqueeze(1)
    video = torch.where(fg, color.expand_as(video), video)
    return video, scene_prompt(spec)


def default_shape_size(image_size: int) -> int:
    """Shape half-extent that keeps the toy proportions across canvas sizes."""
    return max(2, int(round(image_size * 6 / 32)))


def sample_specs(
    n: int,
    seed: int,
    num_frames: int = 8,
    image_size: int = 32,
    shape_size: int = 6,
    speed: int = 1,
) -> list[SceneSpec]:
    """Sample n scene specs uniformly over the attribute grid."""
    rng = random.Random(seed)
    specs = []
    for _ in range(n):
        specs.append(
            SceneSpec(
                shape=rng.choice(SHAPES),
                color=rng.choice(sorted(COLORS)),
                motion=rng.choice(sorted(MOTIONS)),
                background=rng.choice(sorted(BACKGROUNDS)),
                num_frames=num_frames,
                image_size=image_size,
                shape_size=shape_size,
                speed=speed,
            )
        )
    return specs


def all_specs(num_frames=8, image_size=32, shape_size=6, speed=1) -> list[SceneSpec]:
    """The full attribute cross-product, in a fixed order."""
    return [
        SceneSpec(shape, color, motion, background, num_frames, image_size, shape_size, speed)
        for shape in SHAPES
        for color in sorted(COLORS)
        for motion in sorted(MOTIONS)
        for background in sorted(BACKGROUNDS)
    ]


class ToyTextEncoder:
    """Deterministic bag-of-words encoder over the scene vocabulary.

    Prompts are whitespace-tokenized, looked up in a fixed embedding table,
    and padded with the empty token to a fixed length. The empty string
    encodes to ``seq_len`` copies of the empty-token embedding.
    """

    EMPTY_TOKEN = ""

    def __init__(self, dim: int = 16, seq_len: int = 8, seed: int = 0, table: Tensor | None = None):
        self.dim = dim
        self.seq_len = seq_len
        self.vocab: tuple[str, ...] = (self.EMPTY_TOKEN,) + tuple(
            sorted(set(FILLER_WORDS) | set(SHAPES) | set(COLORS) | set(MOTIONS) | set(BACKGROUNDS))
        )
        self._index = {word: i for i, word in enumerate(self.vocab)}
        if table is None:
            gen = torch.Generator().manual_seed(seed)
            table = torch.randn(len(self.vocab), dim, generator=gen)
        if table.shape != (len(self.vocab), dim):
            raise ValueError(f"embedding table must be {len(self.vocab)}x{dim}")
        self.table = table.clone()
        self.table.requires_grad_(False)

    def encode(self, prompt: str) -> Tensor:
        """Encode a prompt to a seq_len x dim embedding matrix."""
        words = prompt.lower().split()
        if len(words) > self.seq_len:
            raise ValueError(f"prompt has {len(words)} words, encoder takes {self.seq_len}")
        ids = []
        for word in words:
            if word not in self._index:
                raise ValueError(f"word {word!r} not in the toy vocabulary")
            ids.append(self._index[word])
        ids += [self._index[self.EMPTY_TOKEN]] * (self.seq_len - len(ids))
        return self.table[torch.tensor(ids)].clone()

    @property
    def empty(self) -> Tensor:
        return self.encode("")


@dataclass
class ToyDataset:
    specs: list[SceneSpec]
    videos: list[Tensor]
    prompts: list[str]

    def __len__(self) -> int:
        return len(self.specs)


def make_dataset(specs: Sequence[SceneSpec], seed: int = 0) -> ToyDataset:
    """Render each spec with a position seed derived from the base seed."""
    videos, prompts = [], []
    for i, spec in enumerate(specs):
        video, prompt = render_scene(spec, seed=seed * 100_003 + i)
        videos.append(video)
        prompts.append(prompt)
    return ToyDataset(list(specs), videos, prompts)


def train_toy(
    model: ToyUNet,
    dataset: ToyDataset,
    schedule: Schedule,
    encoder: ToyTextEncoder,
    steps: int = 2000,
    lr: float = 2e-3,
    seed: int = 0,
    batch_size: int = 16,
    cfg_dropout: float = 0.1,
    on_step=None,
) -> list[float]:
    """Train the denoiser on single frames with the noise-prediction objective.

    Frames are treated as independent images (all-SELF attention, per-sample
    timesteps); a ``cfg_dropout`` fraction of samples swaps in the empty
    prompt so classifier-free guidance has a meaningful unconditional branch.
    Returns the per-step loss curve; the model is left frozen (eval mode,
    requires_grad off).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    frames = torch.cat(dataset.videos)
    cond_rows = torch.cat(
        [
            encoder.encode(prompt).unsqueeze(0).expand(video.shape[0], -1, -1)
            for video, prompt in zip(dataset.videos, dataset.prompts)
        ]
    )
    empty = encoder.empty

    model.train()
    model.requires_grad_(True)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    ctx_modes = model.self_mode_context().modes

    curve: list[float] = []
    for step in range(steps):
        idx = torch.randint(0, frames.shape[0], (batch_size,), generator=gen)
        t = torch.randint(1, schedule.num_train_steps + 1, (batch_size,), generator=gen)
        noise = torch.randn(batch_size, *frames.shape[1:], generator=gen)
        drop = torch.rand(batch_size, generator=gen) < cfg_dropout

        x0 = frames[idx]
        cond = cond_rows[idx].clone()
        cond[drop] = empty
        ab = schedule.alpha_bars[t].float().view(-1, 1, 1, 1)
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise

        eps_hat, _ = model(x_t, t, cond, AttentionContext(ctx_modes))
        loss = torch.nn.functional.mse_loss(eps_hat, noise)
        if not torch.isfinite(loss):
            raise RuntimeError(f"training diverged at step {step}: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if on_step is not None:
            on_step(step + 1, curve[-1])

    model.eval()
    model.requires_grad_(False)
    return curve
