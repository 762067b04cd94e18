import numpy as np
import pytest
import torch

from videdit.denoiser import ModelConfig, build_toy_unet
from videdit.inversion import invert_video
from videdit.pipeline import reconstruct
from videdit.schedule import make_schedule
from videdit.storage import (
    ArtifactError,
    MissingArtifactError,
    config_hash,
    file_hash,
    load_checkpoint,
    load_maps,
    load_record,
    read_frames,
    read_manifest,
    save_checkpoint,
    save_maps,
    save_record,
    write_frames,
    write_manifest,
)
from videdit.toyworld import SceneSpec, ToyTextEncoder, render_scene

TINY = ModelConfig(
    image_size=16,
    base_channels=8,
    channel_mults=(1, 2),
    heads=2,
    text_dim=8,
    text_len=8,
    time_dim=16,
    groups=8,
)


class TestFrames:
    def test_round_trip_exact_at_uint8_grid(self, tmp_path):
        gen = torch.Generator().manual_seed(0)
        video = torch.randint(0, 256, (3, 3, 16, 16), generator=gen).float() / 255.0
        write_frames(tmp_path / "frames", video)
        back = read_frames(tmp_path / "frames")
        assert torch.equal(back, video)

    def test_quantization_error_bounded(self, tmp_path):
        gen = torch.Generator().manual_seed(1)
        video = torch.rand(2, 3, 16, 16, generator=gen)
        write_frames(tmp_path / "frames", video)
        back = read_frames(tmp_path / "frames")
        assert (back - video).abs().max() <= 0.5 / 255 + 1e-6

    def test_missing_directory(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_frames(tmp_path / "nope")

    def test_empty_directory(self, tmp_path):
        (tmp_path / "frames").mkdir()
        with pytest.raises(ArtifactError, match="no PNG"):
            read_frames(tmp_path / "frames")

    def test_write_is_deterministic(self, tmp_path):
        gen = torch.Generator().manual_seed(2)
        video = torch.rand(2, 3, 16, 16, generator=gen)
        write_frames(tmp_path / "a", video)
        write_frames(tmp_path / "b", video)
        for i in range(2):
            a = (tmp_path / "a" / f"{i:04d}.png").read_bytes()
            b = (tmp_path / "b" / f"{i:04d}.png").read_bytes()
            assert a == b


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = build_toy_unet(TINY, seed=5)
        encoder = ToyTextEncoder(dim=8, seq_len=8, seed=1)
        path = tmp_path / "model.npz"
        save_checkpoint(path, model, encoder)
        loaded_model, loaded_encoder = load_checkpoint(path)
        assert loaded_model.config == TINY
        for key, val in model.state_dict().items():
            assert torch.equal(loaded_model.state_dict()[key], val), key
        assert torch.equal(loaded_encoder.table, encoder.table)
        assert loaded_encoder.vocab == encoder.vocab

    def test_loaded_model_predicts_identically(self, tmp_path):
        model = build_toy_unet(TINY, seed=5)
        encoder = ToyTextEncoder(dim=8, seq_len=8, seed=1)
        path = tmp_path / "model.npz"
        save_checkpoint(path, model, encoder)
        loaded_model, loaded_encoder = load_checkpoint(path)
        gen = torch.Generator().manual_seed(3)
        x = torch.rand(2, 3, 16, 16, generator=gen)
        cond = encoder.encode("a red square moving right on black")
        a, _ = model.predict(x, 41, cond)
        b, _ = loaded_model.predict(x, 41, loaded_encoder.encode("a red square moving right on black"))
        assert torch.equal(a, b)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_checkpoint(tmp_path / "none.npz")

    def test_bad_version_rejected(self, tmp_path):
        model = build_toy_unet(TINY, seed=5)
        encoder = ToyTextEncoder(dim=8, seq_len=8)
        path = tmp_path / "model.npz"
        save_checkpoint(path, model, encoder)
        with np.load(path) as archive:
            arrays = {k: archive[k] for k in archive.files}
        arrays["format_version"] = np.int64(99)
        np.savez(path, **arrays)
        with pytest.raises(ArtifactError, match="version"):
            load_checkpoint(path)


@pytest.fixture(scope="module")
def small_record():
    model = build_toy_unet(TINY, seed=0)
    encoder = ToyTextEncoder(dim=8, seq_len=8, seed=0)
    schedule = make_schedule(100, 1e-4, 2e-2, 4)
    spec = SceneSpec("circle", "blue", "up", "white", num_frames=2, image_size=16, shape_size=3)
    video, prompt = render_scene(spec, seed=0)
    record = invert_video(video, prompt, encoder, model, schedule)
    _, maps = reconstruct(record, model, schedule, encoder)
    return model, encoder, schedule, record, maps


class TestRecordAndMaps:
    def test_record_round_trip(self, tmp_path, small_record):
        _, _, schedule, record, _ = small_record
        save_record(tmp_path / "rec", record, meta={"schedule_hash": schedule.hash(), "seed": 0})
        loaded, meta = load_record(tmp_path / "rec")
        loaded.validate(schedule)
        assert meta["schedule_hash"] == schedule.hash()
        assert loaded.source_prompt == record.source_prompt
        assert loaded.per_step_loss == record.per_step_loss
        for a, b in zip(loaded.trajectory, record.trajectory):
            assert torch.equal(a, b)
        for a, b in zip(loaded.null_embeddings, record.null_embeddings):
            assert torch.equal(a, b)

    def test_record_missing(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_record(tmp_path / "nothing")

    def test_maps_round_trip(self, tmp_path, small_record):
        _, _, schedule, _, maps = small_record
        save_maps(tmp_path / "maps.npz", maps, meta={"schedule_hash": schedule.hash()})
        loaded, meta = load_maps(tmp_path / "maps.npz")
        assert set(loaded) == set(maps)
        for key in maps:
            assert torch.equal(loaded[key], maps[key])
        assert meta["schedule_hash"] == schedule.hash()

    def test_maps_missing(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_maps(tmp_path / "maps.npz")


class TestManifest:
    def test_round_trip_and_determinism(self, tmp_path):
        write_manifest(tmp_path, command="invert", seed=3, config_hash="abc")
        first = (tmp_path / "run.manifest").read_bytes()
        assert read_manifest(tmp_path)["command"] == "invert"
        write_manifest(tmp_path, command="invert", seed=3, config_hash="abc")
        assert (tmp_path / "run.manifest").read_bytes() == first

    def test_config_hash_canonical(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})

    def test_file_hash(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"hello")
        q = tmp_path / "y.bin"
        q.write_bytes(b"hello")
        assert file_hash(p) == file_hash(q)
