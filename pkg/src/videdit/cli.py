"""Operator-facing command line: training, inversion, reconstruction,
editing, evaluation, and attention-map export.

Every command reads one YAML config file; flags override file values, and
the effective config is written next to the outputs together with a
``run.manifest`` carrying content hashes. Commands are idempotent given the
same config and seed.

Exit codes:
  2  config or usage error (unknown keys, bad values, missing required fields)
  3  missing upstream artifact (frames, checkpoint, record, maps)
  4  invalid or incompatible artifact (corrupt container, version mismatch)
  5  runtime failure (divergence, non-finite numbers)
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import click
import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .attention import AttentionContext, AttentionMode, default_attention_modes
from .denoiser import ModelConfig, build_toy_unet
from .inversion import invert_video
from .metrics import (
    MetricReport,
    edit_success,
    frame_consistency,
    frame_psnr,
    reconstruction_metrics,
    unet_frame_encoder,
)
from .pipeline import EditConfig, edit, reconstruct
from .schedule import make_schedule
from .storage import (
    ArtifactError,
    MissingArtifactError,
    config_hash,
    file_hash,
    load_checkpoint,
    load_maps,
    load_record,
    read_frames,
    save_checkpoint,
    save_maps,
    save_record,
    write_frames,
    write_manifest,
)
from .toyworld import ToyTextEncoder, all_specs, default_shape_size, make_dataset, sample_specs, train_toy


class ConfigError(ValueError):
    """Config file or flag validation failure."""


# ---------------------------------------------------------------------------
# config schema


@dataclass
class ScheduleConfig:
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    num_inference_steps: int = 50


@dataclass
class TrainConfig:
    steps: int = 2500
    lr: float = 2e-3
    batch_size: int = 16
    num_scenes: int = 0  # 0 = the full attribute grid
    cfg_dropout: float = 0.1
    scene_seed: int = 0


@dataclass
class InvertConfig:
    inner_steps: int = 1
    step_size: float = 1e-2
    guidance_scale: float = 7.5
    early_stop: float = 1e-5


@dataclass
class EditParams:
    guidance_scale: float = 7.5
    tau_m: float = 0.8
    tau_null: float = 0.5
    inject_into_uncond: bool = False


@dataclass
class PathsConfig:
    checkpoint: Optional[str] = None
    frames: Optional[str] = None
    record: Optional[str] = None
    maps: Optional[str] = None
    output: Optional[str] = None
    original: Optional[str] = None
    edited: Optional[str] = None
    mask: Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 0
    num_frames: int = 8
    source_prompt: str = ""
    target_prompt: str = ""
    source_color: str = ""
    target_color: str = ""
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    invert: InvertConfig = field(default_factory=InvertConfig)
    edit: EditParams = field(default_factory=EditParams)
    attention_modes: dict = field(default_factory=dict)
    paths: PathsConfig = field(default_factory=PathsConfig)


_LEAF_TYPES = (int, float, str, bool)

_NESTED_SECTIONS = {
    "schedule": ScheduleConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "invert": InvertConfig,
    "edit": EditParams,
    "paths": PathsConfig,
}


def _from_mapping(cls, data, where=""):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {where or 'top level'}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {where or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        spot = f"{where}.{name}" if where else name
        if cls is RunConfig and name in _NESTED_SECTIONS:
            kwargs[name] = _from_mapping(_NESTED_SECTIONS[name], value, spot)
        elif name == "attention_modes":
            if not isinstance(value, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in value.items()
            ):
                raise ConfigError(f"{spot} must map layer ids to mode names")
            kwargs[name] = dict(value)
        elif name == "channel_mults":
            if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) for v in value):
                raise ConfigError(f"{spot} must be a list of integers")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce_leaf(value, spot)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config at {where or 'top level'}: {exc}") from exc


def _coerce_leaf(value, where):
    if value is None or isinstance(value, _LEAF_TYPES):
        return value
    raise ConfigError(f"unsupported value type at {where}: {type(value).__name__}")


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    file = Path(path)
    if not file.exists():
        raise ConfigError(f"config file {file} does not exist")
    try:
        data = yaml.safe_load(file.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {file} is not valid YAML: {exc}") from exc
    return _from_mapping(RunConfig, data)


def config_to_mapping(config: RunConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    return convert(config)


def dump_config(config: RunConfig, directory: Path) -> str:
    """Write the effective config next to the outputs; returns its hash."""
    mapping = config_to_mapping(config)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.effective.yaml").write_text(
        yaml.safe_dump(mapping, sort_keys=True, default_flow_style=False)
    )
    return config_hash(mapping)


def round_trip_config(config: RunConfig) -> RunConfig:
    """parse -> serialize -> parse identity helper (also used by tests)."""
    return _from_mapping(RunConfig, yaml.safe_load(yaml.safe_dump(config_to_mapping(config))))


# ---------------------------------------------------------------------------
# shared helpers


def _require_path(value: Optional[str], what: str) -> Path:
    if not value:
        raise ConfigError(f"no {what} path configured (set paths.{what} or the flag)")
    return Path(value)


def _build_schedule(cfg: RunConfig):
    sc = cfg.schedule
    try:
        return make_schedule(
            sc.num_train_steps, sc.beta_start, sc.beta_end, sc.num_inference_steps
        )
    except ValueError as exc:
        raise ConfigError(f"invalid schedule: {exc}") from exc


def _resolve_modes(model, overrides: dict) -> dict:
    modes = default_attention_modes(model.attention_layer_ids)
    valid = {m.value: m for m in AttentionMode}
    for layer, name in overrides.items():
        if layer not in modes:
            raise ConfigError(f"attention_modes names unknown layer {layer!r}")
        if name not in valid:
            raise ConfigError(
                f"attention_modes[{layer!r}] = {name!r}; choose from {sorted(valid)}"
            )
        modes[layer] = valid[name]
    return modes


def _load_checkpoint(cfg: RunConfig):
    path = _require_path(cfg.paths.checkpoint, "checkpoint")
    model, encoder = load_checkpoint(path)
    return model, encoder, path


def _manifest_fields(cfg_hash: str, cfg: RunConfig, command: str, **extra) -> dict:
    return {
        "command": command,
        "config_hash": cfg_hash,
        "seed": cfg.seed,
        "code_version": __version__,
        **extra,
    }


def _guarded(body):
    try:
        body()
    except ConfigError as exc:
        _fail(2, f"config error: {exc}")
    except MissingArtifactError as exc:
        _fail(3, f"missing artifact: {exc}")
    except ArtifactError as exc:
        _fail(4, f"invalid artifact: {exc}")
    except ValueError as exc:
        _fail(2, f"config error: {exc}")
    except RuntimeError as exc:
        _fail(5, f"runtime failure: {exc}")


def _fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


# ---------------------------------------------------------------------------
# commands


@click.group(help=__doc__)
@click.version_option(__version__)
def main():
    pass


config_option = click.option("--config", "-c", "config_path", type=str, default=None,
                             help="YAML run config; flags override file values.")
seed_option = click.option("--seed", type=int, default=None, help="Override the run seed.")


@main.command("train-toy", help="Generate the toy dataset and train the denoiser checkpoint.")
@config_option
@seed_option
@click.option("--checkpoint", type=str, default=None, help="Output checkpoint path (.npz).")
@click.option("--train-steps", type=int, default=None, help="Override train.steps.")
def cmd_train_toy(config_path, seed, checkpoint, train_steps):
    def body():
        cfg = load_config(config_path)
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if checkpoint is not None:
            cfg.paths.checkpoint = checkpoint
        if train_steps is not None:
            cfg.train.steps = train_steps
        out_path = _require_path(cfg.paths.checkpoint, "checkpoint")
        schedule = _build_schedule(cfg)
        encoder = ToyTextEncoder(dim=cfg.model.text_dim, seq_len=cfg.model.text_len, seed=cfg.seed)
        model = build_toy_unet(cfg.model, seed=cfg.seed)
        shape_size = default_shape_size(cfg.model.image_size)
        if cfg.train.num_scenes > 0:
            specs = sample_specs(
                cfg.train.num_scenes, cfg.train.scene_seed,
                num_frames=cfg.num_frames, image_size=cfg.model.image_size,
                shape_size=shape_size,
            )
        else:
            specs = all_specs(
                num_frames=cfg.num_frames, image_size=cfg.model.image_size,
                shape_size=shape_size,
            )
        dataset = make_dataset(specs, seed=cfg.train.scene_seed)
        curve = train_toy(
            model, dataset, schedule, encoder,
            steps=cfg.train.steps, lr=cfg.train.lr, seed=cfg.seed,
            batch_size=cfg.train.batch_size, cfg_dropout=cfg.train.cfg_dropout,
        )
        save_checkpoint(out_path, model, encoder)
        out_dir = out_path.parent
        cfg_hash = dump_config(cfg, out_dir)
        write_manifest(
            out_dir,
            **_manifest_fields(
                cfg_hash, cfg, "train-toy",
                schedule_hash=schedule.hash(),
                checkpoint_hash=file_hash(out_path),
                final_loss=curve[-1],
                initial_loss=curve[0],
            ),
        )
        click.echo(f"trained {cfg.train.steps} steps; loss {curve[0]:.4f} -> {curve[-1]:.4f}")
        click.echo(f"checkpoint written to {out_path}")

    _guarded(body)


@main.command("invert", help="DDIM-invert an input frame directory and optimize null embeddings.")
@config_option
@seed_option
@click.option("--frames", type=str, default=None, help="Input frame directory.")
@click.option("--checkpoint", type=str, default=None)
@click.option("--record", "record_dir", type=str, default=None, help="Output record directory.")
@click.option("--source-prompt", type=str, default=None)
def cmd_invert(config_path, seed, frames, checkpoint, record_dir, source_prompt):
    def body():
        cfg = load_config(config_path)
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if frames is not None:
            cfg.paths.frames = frames
        if checkpoint is not None:
            cfg.paths.checkpoint = checkpoint
        if record_dir is not None:
            cfg.paths.record = record_dir
        if source_prompt is not None:
            cfg = dataclasses.replace(cfg, source_prompt=source_prompt)
        if not cfg.source_prompt:
            raise ConfigError("no source_prompt configured")
        frames_dir = _require_path(cfg.paths.frames, "frames")
        out_dir = _require_path(cfg.paths.record, "record")
        model, encoder, ckpt_path = _load_checkpoint(cfg)
        schedule = _build_schedule(cfg)
        video = read_frames(frames_dir)
        modes = _resolve_modes(model, cfg.attention_modes)
        record = invert_video(
            video, cfg.source_prompt, encoder, model, schedule,
            inner_steps=cfg.invert.inner_steps, step_size=cfg.invert.step_size,
            guidance_scale=cfg.invert.guidance_scale, early_stop=cfg.invert.early_stop,
            ctx=AttentionContext(modes),
        )
        cfg_hash = dump_config(cfg, out_dir)
        save_record(
            out_dir, record,
            meta={
                "schedule_hash": schedule.hash(),
                "checkpoint_hash": file_hash(ckpt_path),
                "seed": cfg.seed,
                "config_hash": cfg_hash,
            },
        )
        write_manifest(
            out_dir,
            **_manifest_fields(
                cfg_hash, cfg, "invert",
                schedule_hash=schedule.hash(),
                checkpoint_hash=file_hash(ckpt_path),
                source_prompt=cfg.source_prompt,
                final_null_loss=record.per_step_loss[-1],
            ),
        )
        click.echo(f"inversion record written to {out_dir}")

    _guarded(body)


@main.command("reconstruct", help="Reference pass: reconstruct from a record, recording maps.")
@config_option
@seed_option
@click.option("--record", "record_dir", type=str, default=None)
@click.option("--checkpoint", type=str, default=None)
@click.option("--out", "out_dir", type=str, default=None, help="Output directory.")
def cmd_reconstruct(config_path, seed, record_dir, checkpoint, out_dir):
    def body():
        cfg = load_config(config_path)
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if record_dir is not None:
            cfg.paths.record = record_dir
        if checkpoint is not None:
            cfg.paths.checkpoint = checkpoint
        if out_dir is not None:
            cfg.paths.output = out_dir
        record_path = _require_path(cfg.paths.record, "record")
        out = _require_path(cfg.paths.output, "output")
        model, encoder, ckpt_path = _load_checkpoint(cfg)
        schedule = _build_schedule(cfg)
        record, record_meta = load_record(record_path)
        record.validate(schedule)
        modes = _resolve_modes(model, cfg.attention_modes)
        video, maps = reconstruct(
            record, model, schedule, encoder, w=cfg.edit.guidance_scale, modes=modes
        )
        write_frames(out / "frames", video)
        save_maps(out / "maps.npz", maps, meta={"schedule_hash": schedule.hash()})
        original = record.trajectory[0].clamp(0, 1)
        mse, psnr = reconstruction_metrics(original, video)
        report = MetricReport(
            reconstruction_mse=mse,
            psnr_mean=psnr,
            psnr_per_frame=frame_psnr(original, video),
        )
        if video.shape[0] >= 2:
            report.frame_consistency = frame_consistency(
                video, unet_frame_encoder(model, encoder.empty)
            )
        (out / "metrics.txt").write_text(report.to_text())
        cfg_hash = dump_config(cfg, out)
        write_manifest(
            out,
            **_manifest_fields(
                cfg_hash, cfg, "reconstruct",
                schedule_hash=schedule.hash(),
                checkpoint_hash=file_hash(ckpt_path),
                record_config_hash=record_meta.get("config_hash", ""),
                reconstruction_mse=mse,
            ),
        )
        click.echo(f"reconstruction MSE {mse:.3e}; outputs in {out}")

    _guarded(body)


@main.command("edit", help="Guided edit pass with cross-attention injection.")
@config_option
@seed_option
@click.option("--record", "record_dir", type=str, default=None)
@click.option("--checkpoint", type=str, default=None)
@click.option("--maps", "maps_path", type=str, default=None, help="maps.npz from reconstruct.")
@click.option("--out", "out_dir", type=str, default=None)
@click.option("--target-prompt", type=str, default=None)
@click.option("--tau-m", type=float, default=None)
@click.option("--tau-null", type=float, default=None)
@click.option("--guidance-scale", type=float, default=None)
def cmd_edit(config_path, seed, record_dir, checkpoint, maps_path, out_dir,
             target_prompt, tau_m, tau_null, guidance_scale):
    def body():
        cfg = load_config(config_path)
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if record_dir is not None:
            cfg.paths.record = record_dir
        if checkpoint is not None:
            cfg.paths.checkpoint = checkpoint
        if maps_path is not None:
            cfg.paths.maps = maps_path
        if out_dir is not None:
            cfg.paths.output = out_dir
        if target_prompt is not None:
            cfg = dataclasses.replace(cfg, target_prompt=target_prompt)
        if tau_m is not None:
            cfg.edit.tau_m = tau_m
        if tau_null is not None:
            cfg.edit.tau_null = tau_null
        if guidance_scale is not None:
            cfg.edit.guidance_scale = guidance_scale
        if not cfg.target_prompt:
            raise ConfigError("no target_prompt configured")
        record_path = _require_path(cfg.paths.record, "record")
        out = _require_path(cfg.paths.output, "output")
        model, encoder, ckpt_path = _load_checkpoint(cfg)
        schedule = _build_schedule(cfg)
        record, _ = load_record(record_path)
        record.validate(schedule)
        if cfg.edit.tau_m > 0:
            maps_file = _require_path(cfg.paths.maps, "maps")
            maps, _ = load_maps(maps_file)
        else:
            maps = {}
        modes = _resolve_modes(model, cfg.attention_modes)
        edit_cfg = EditConfig(
            target_prompt=cfg.target_prompt,
            guidance_scale=cfg.edit.guidance_scale,
            num_steps=cfg.schedule.num_inference_steps,
            tau_m=cfg.edit.tau_m,
            tau_null=cfg.edit.tau_null,
            seed=cfg.seed,
            inject_into_uncond=cfg.edit.inject_into_uncond,
        )
        result = edit(record, maps, edit_cfg, model, schedule, encoder, modes=modes)
        write_frames(out / "frames", result.edited_video)
        original = record.trajectory[0].clamp(0, 1)
        mse, _ = reconstruction_metrics(original, result.edited_video)
        report = MetricReport(reconstruction_mse=mse)
        if result.edited_video.shape[0] >= 2:
            report.frame_consistency = frame_consistency(
                result.edited_video, unet_frame_encoder(model, encoder.empty)
            )
        (out / "metrics.txt").write_text(report.to_text())
        cfg_hash = dump_config(cfg, out)
        write_manifest(
            out,
            **_manifest_fields(
                cfg_hash, cfg, "edit",
                schedule_hash=schedule.hash(),
                checkpoint_hash=file_hash(ckpt_path),
                target_prompt=cfg.target_prompt,
                tau_m=cfg.edit.tau_m,
                tau_null=cfg.edit.tau_null,
            ),
        )
        click.echo(f"edited frames in {out}")

    _guarded(body)


@main.command("eval", help="Score an edited frame directory against the original.")
@config_option
@click.option("--original", type=str, default=None, help="Original frame directory.")
@click.option("--edited", type=str, default=None, help="Edited frame directory.")
@click.option("--checkpoint", type=str, default=None)
@click.option("--out", "out_dir", type=str, default=None)
@click.option("--mask", "mask_dir", type=str, default=None,
              help="Foreground mask frame directory (white = foreground).")
@click.option("--source-color", type=str, default=None)
@click.option("--target-color", type=str, default=None)
def cmd_eval(config_path, original, edited, checkpoint, out_dir, mask_dir,
             source_color, target_color):
    def body():
        cfg = load_config(config_path)
        if original is not None:
            cfg.paths.original = original
        if edited is not None:
            cfg.paths.edited = edited
        if checkpoint is not None:
            cfg.paths.checkpoint = checkpoint
        if out_dir is not None:
            cfg.paths.output = out_dir
        if mask_dir is not None:
            cfg.paths.mask = mask_dir
        if source_color is not None:
            cfg = dataclasses.replace(cfg, source_color=source_color)
        if target_color is not None:
            cfg = dataclasses.replace(cfg, target_color=target_color)
        original_video = read_frames(_require_path(cfg.paths.original, "original"))
        edited_video = read_frames(_require_path(cfg.paths.edited, "edited"))
        out = _require_path(cfg.paths.output, "output")
        model, encoder, _ = _load_checkpoint(cfg)
        mse, psnr = reconstruction_metrics(original_video, edited_video)
        report = MetricReport(
            reconstruction_mse=mse,
            psnr_mean=psnr,
            psnr_per_frame=frame_psnr(original_video, edited_video),
        )
        if edited_video.shape[0] >= 2:
            report.frame_consistency = frame_consistency(
                edited_video, unet_frame_encoder(model, encoder.empty)
            )
        if cfg.paths.mask:
            if not (cfg.source_color and cfg.target_color):
                raise ConfigError("edit scoring needs source_color and target_color")
            mask_video = read_frames(Path(cfg.paths.mask))
            mask = mask_video.mean(dim=1) > 0.5
            report.edit = edit_success(
                original_video, edited_video, mask, cfg.source_color, cfg.target_color
            )
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(report.to_text())
        cfg_hash = dump_config(cfg, out)
        write_manifest(out, **_manifest_fields(cfg_hash, cfg, "eval"))
        click.echo(report.to_text().rstrip())

    _guarded(body)


@main.command("attn-export", help="Export recorded cross-attention maps as grayscale grids.")
@config_option
@click.option("--maps", "maps_path", type=str, default=None)
@click.option("--out", "out_dir", type=str, default=None)
@click.option("--every", type=int, default=10, show_default=True,
              help="Keep every Nth recorded timestep.")
@click.option("--layer", "layer_filter", type=str, default=None,
              help="Only export this layer id.")
def cmd_attn_export(config_path, maps_path, out_dir, every, layer_filter):
    def body():
        cfg = load_config(config_path)
        if maps_path is not None:
            cfg.paths.maps = maps_path
        if out_dir is not None:
            cfg.paths.output = out_dir
        if every < 1:
            raise ConfigError("--every must be >= 1")
        maps, _ = load_maps(_require_path(cfg.paths.maps, "maps"))
        out = _require_path(cfg.paths.output, "output")
        out.mkdir(parents=True, exist_ok=True)
        timesteps = sorted({t for t, _ in maps}, reverse=True)
        keep = set(timesteps[::every])
        written = 0
        for (t, layer), tensor in sorted(maps.items()):
            if t not in keep:
                continue
            if layer_filter is not None and layer != layer_filter:
                continue
            written += _export_map_grids(out, t, layer, tensor)
        if written == 0:
            raise ConfigError("filters selected no maps to export")
        cfg_hash = dump_config(cfg, out)
        write_manifest(out, **_manifest_fields(cfg_hash, cfg, "attn-export", images=written))
        click.echo(f"wrote {written} attention grids to {out}")

    _guarded(body)


def _export_map_grids(out_dir: Path, t: int, layer: str, tensor: torch.Tensor) -> int:
    """One grayscale grid per head: frames as rows, text tokens as columns."""
    frames, heads, n_tokens, length = tensor.shape
    side = int(round(n_tokens**0.5))
    if side * side != n_tokens:
        raise ArtifactError(f"map for layer {layer!r} has non-square token count {n_tokens}")
    written = 0
    for head in range(heads):
        grid = tensor[:, head].reshape(frames, side, side, length)
        peak = grid.max().item() or 1.0
        canvas = np.zeros((frames * side, length * side), dtype=np.uint8)
        for f in range(frames):
            for l in range(length):
                tile = (grid[f, :, :, l] / peak * 255).round().to(torch.uint8).numpy()
                canvas[f * side : (f + 1) * side, l * side : (l + 1) * side] = tile
        name = f"attn_t{t:04d}_{layer.replace('.', '-')}_h{head}.png"
        Image.fromarray(canvas, mode="L").save(out_dir / name)
        written += 1
    return written


if __name__ == "__main__":
    main()
