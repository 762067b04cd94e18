"""On-disk artifact formats.

Videos travel as directories of numerically-ordered PNG frames
(``frames/%04d.png``). Weight checkpoints, inversion records, and attention
maps use NPZ containers (a zip of NPY entries, each carrying its own
shape/dtype header) with a ``format_version`` entry and a ``meta.json``
entry of UTF-8 JSON bytes. Every command output directory carries a
``run.manifest`` JSON with content hashes; manifests contain no timestamps
so identical runs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .attention import MapKey
from .denoiser import ModelConfig, ToyUNet, build_toy_unet
from .inversion import InversionRecord
from .toyworld import ToyTextEncoder

CHECKPOINT_VERSION = 1
RECORD_VERSION = 1
MAPS_VERSION = 1
MANIFEST_NAME = "run.manifest"


class MissingArtifactError(FileNotFoundError):
    """A required upstream artifact (frames, checkpoint, record) is absent."""


class ArtifactError(ValueError):
    """An artifact exists but is malformed or from an incompatible version."""


# ---------------------------------------------------------------------------
# frame directories


def write_frames(directory: Path, video: Tensor) -> None:
    """Write an F x 3 x H x W video in [0, 1] as frames/0000.png, ..."""
    directory = Path(directory)
    if video.ndim != 4 or video.shape[1] != 3:
        raise ValueError("expected an F x 3 x H x W video")
    directory.mkdir(parents=True, exist_ok=True)
    data = (video.clamp(0, 1) * 255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    for i, frame in enumerate(data):
        Image.fromarray(frame, mode="RGB").save(directory / f"{i:04d}.png")


def read_frames(directory: Path) -> Tensor:
    """Load a frame directory back into an F x 3 x H x W float video."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingArtifactError(f"frame directory {directory} does not exist")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise ArtifactError(f"frame directory {directory} contains no PNG frames")
    frames = []
    for path in paths:
        with Image.open(path) as img:
            frames.append(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0)
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ArtifactError(f"frames in {directory} disagree on size")
    return torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# npz containers


def _savez(path: Path, arrays: Mapping[str, np.ndarray]) -> None:
    # np.savez stamps zip entries with the current time; pinning the entry
    # metadata keeps identical runs byte-identical on disk.
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def _meta_entry(meta: Mapping) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def _read_meta(archive) -> dict:
    if "meta.json" not in archive:
        raise ArtifactError("container has no meta.json entry")
    return json.loads(bytes(archive["meta.json"]).decode("utf-8"))


def _check_version(archive, expected: int, kind: str) -> None:
    if "format_version" not in archive:
        raise ArtifactError(f"{kind} has no format_version entry")
    version = int(archive["format_version"])
    if version != expected:
        raise ArtifactError(f"{kind} format version {version} unsupported (expected {expected})")


def save_checkpoint(path: Path, model: ToyUNet, encoder: ToyTextEncoder) -> None:
    """Persist model weights plus the text-encoder table in one container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "format_version": np.int64(CHECKPOINT_VERSION),
        "meta.json": _meta_entry(
            {
                "model_config": _config_to_dict(model.config),
                "encoder": {
                    "dim": encoder.dim,
                    "seq_len": encoder.seq_len,
                    "vocab": list(encoder.vocab),
                },
            }
        ),
        "encoder/table": encoder.table.numpy(),
    }
    for name, tensor in model.state_dict().items():
        arrays[f"model/{name}"] = tensor.numpy()
    _savez(path, arrays)


def load_checkpoint(path: Path) -> tuple[ToyUNet, ToyTextEncoder]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} does not exist")
    with np.load(path) as archive:
        _check_version(archive, CHECKPOINT_VERSION, "checkpoint")
        meta = _read_meta(archive)
        config = ModelConfig(**{**meta["model_config"], "channel_mults": tuple(meta["model_config"]["channel_mults"])})
        model = build_toy_unet(config, seed=0)
        state = {}
        for key in archive.files:
            if key.startswith("model/"):
                state[key[len("model/") :]] = torch.from_numpy(archive[key])
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise ArtifactError(f"checkpoint weights do not fit the stored config: {exc}") from exc
        model.requires_grad_(False)
        enc_meta = meta["encoder"]
        encoder = ToyTextEncoder(
            dim=enc_meta["dim"],
            seq_len=enc_meta["seq_len"],
            table=torch.from_numpy(archive["encoder/table"]),
        )
        if list(encoder.vocab) != enc_meta["vocab"]:
            raise ArtifactError("checkpoint vocabulary does not match this build")
    return model, encoder


def _config_to_dict(config: ModelConfig) -> dict:
    return {
        "image_size": config.image_size,
        "in_channels": config.in_channels,
        "base_channels": config.base_channels,
        "channel_mults": list(config.channel_mults),
        "heads": config.heads,
        "text_dim": config.text_dim,
        "text_len": config.text_len,
        "time_dim": config.time_dim,
        "groups": config.groups,
    }


def save_record(directory: Path, record: InversionRecord, meta: Mapping) -> None:
    """Persist an inversion record as <dir>/record.npz plus manifest metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {
        "format_version": np.int64(RECORD_VERSION),
        "meta.json": _meta_entry({**meta, "source_prompt": record.source_prompt}),
        "per_step_loss": np.asarray(record.per_step_loss, dtype=np.float64),
    }
    for i, latent in enumerate(record.trajectory):
        arrays[f"trajectory/{i:04d}"] = latent.numpy()
    for i, embed in enumerate(record.null_embeddings):
        arrays[f"null/{i:04d}"] = embed.numpy()
    _savez(directory / "record.npz", arrays)


def load_record(directory: Path) -> tuple[InversionRecord, dict]:
    directory = Path(directory)
    path = directory / "record.npz"
    if not path.exists():
        raise MissingArtifactError(f"inversion record {path} does not exist")
    with np.load(path) as archive:
        _check_version(archive, RECORD_VERSION, "inversion record")
        meta = _read_meta(archive)
        traj_keys = sorted(k for k in archive.files if k.startswith("trajectory/"))
        null_keys = sorted(k for k in archive.files if k.startswith("null/"))
        if not traj_keys or not null_keys:
            raise ArtifactError("inversion record is missing trajectory or embeddings")
        record = InversionRecord(
            trajectory=[torch.from_numpy(archive[k]) for k in traj_keys],
            null_embeddings=[torch.from_numpy(archive[k]) for k in null_keys],
            source_prompt=meta["source_prompt"],
            per_step_loss=[float(v) for v in archive["per_step_loss"]],
        )
    record.validate()
    return record, meta


def save_maps(path: Path, maps: Mapping[MapKey, Tensor], meta: Mapping) -> None:
    """Persist recorded cross-attention maps keyed by (timestep, layer)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "format_version": np.int64(MAPS_VERSION),
        "meta.json": _meta_entry(dict(meta)),
    }
    for (t, layer), tensor in maps.items():
        arrays[f"map/{t:06d}/{layer}"] = tensor.numpy()
    _savez(path, arrays)


def load_maps(path: Path) -> tuple[dict[MapKey, Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"attention maps file {path} does not exist")
    maps: dict[MapKey, Tensor] = {}
    with np.load(path) as archive:
        _check_version(archive, MAPS_VERSION, "attention maps")
        meta = _read_meta(archive)
        for key in archive.files:
            if not key.startswith("map/"):
                continue
            _, t_str, layer = key.split("/", 2)
            maps[(int(t_str), layer)] = torch.from_numpy(archive[key])
    if not maps:
        raise ArtifactError(f"attention maps file {path} holds no maps")
    return maps, meta


# ---------------------------------------------------------------------------
# manifests and hashing


def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def write_manifest(directory: Path, **fields) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(fields, sort_keys=True, indent=2) + "\n"
    (directory / MANIFEST_NAME).write_text(payload)


def read_manifest(directory: Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise MissingArtifactError(f"manifest {path} does not exist")
    return json.loads(path.read_text())
