"""20-seed toy editing benchmark shared by the acceptance suite.

Protocol: a red square on black, motion cycling through the four directions,
4 frames at 32x32, 10 DDIM steps, reference editing defaults (guidance 7.5,
tau_m 0.8, tau_null 0.5). Each seed runs the full chain twice: once with the
default cross-frame attention placement (ST/SC) and once all-SELF (the
frame-wise image-editing baseline), sharing the trained checkpoint.

The frozen cutoffs in ``videdit.metrics.DEFAULT_EDIT_THRESHOLDS`` were
calibrated from this benchmark's score distribution on the reference
checkpoint.
"""

from dataclasses import dataclass

from videdit.attention import AttentionContext, AttentionMode, uniform_attention_modes
from videdit.inversion import invert_video
from videdit.metrics import (
    EditSuccessReport,
    edit_success,
    frame_consistency,
    reconstruction_metrics,
    unet_frame_encoder,
)
from videdit.pipeline import EditConfig, edit, reconstruct
from videdit.schedule import make_schedule
from videdit.toyworld import SceneSpec, foreground_masks, render_scene

BENCH_FRAMES = 4
BENCH_STEPS = 10
BENCH_IMAGE = 32
BENCH_SEEDS = tuple(range(20))
_MOTIONS = ("right", "left", "up", "down")


@dataclass
class BenchResult:
    seed: int
    edit_report: EditSuccessReport
    fc_st: float
    fc_self: float
    recon_mse: float


def bench_spec(seed: int) -> SceneSpec:
    return SceneSpec(
        shape="square",
        color="red",
        motion=_MOTIONS[seed % len(_MOTIONS)],
        background="black",
        num_frames=BENCH_FRAMES,
        image_size=BENCH_IMAGE,
    )


def bench_schedule():
    return make_schedule(1000, 1e-4, 2e-2, BENCH_STEPS)


def run_seed(model, encoder, seed: int) -> BenchResult:
    spec = bench_spec(seed)
    video, prompt = render_scene(spec, seed)
    masks = foreground_masks(spec, seed)
    target_prompt = prompt.replace("red", "blue")
    schedule = bench_schedule()
    frame_enc = unet_frame_encoder(model, encoder.empty)
    cfg = EditConfig(target_prompt=target_prompt, num_steps=BENCH_STEPS, seed=seed)

    record = invert_video(video, prompt, encoder, model, schedule)
    recon, maps = reconstruct(record, model, schedule, encoder)
    result = edit(record, maps, cfg, model, schedule, encoder)
    report = edit_success(video, result.edited_video, masks, "red", "blue")
    fc_st = frame_consistency(result.edited_video, frame_enc)
    recon_mse, _ = reconstruction_metrics(video, recon)

    self_modes = uniform_attention_modes(model.attention_layer_ids, AttentionMode.SELF)
    record_self = invert_video(
        video, prompt, encoder, model, schedule, ctx=AttentionContext(self_modes)
    )
    _, maps_self = reconstruct(record_self, model, schedule, encoder, modes=self_modes)
    result_self = edit(record_self, maps_self, cfg, model, schedule, encoder, modes=self_modes)
    fc_self = frame_consistency(result_self.edited_video, frame_enc)

    return BenchResult(
        seed=seed, edit_report=report, fc_st=fc_st, fc_self=fc_self, recon_mse=recon_mse
    )


def run_benchmark(model, encoder, seeds=BENCH_SEEDS) -> list[BenchResult]:
    return [run_seed(model, encoder, seed) for seed in seeds]
