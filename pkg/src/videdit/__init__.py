"""Zero-shot text-driven video editing on a frozen toy diffusion model.

A video is inverted to noise with deterministic DDIM, per-timestep null-text
embeddings are optimized so guided sampling reconstructs it, and an edited
video is then sampled under a target prompt with cross-attention-map
injection and cross-frame attention.
"""

__version__ = "0.1.0"

from .attention import AttentionContext, AttentionMode, cross_frame_attend, default_attention_modes
from .denoiser import ModelConfig, ToyUNet, build_toy_unet
from .inversion import InversionRecord, ddim_invert, invert_video, null_text_optimize
from .metrics import edit_success, frame_consistency, reconstruction_metrics
from .pipeline import EditConfig, EditResult, cfg_predict, edit, reconstruct
from .schedule import Schedule, add_noise, ddim_inverse_step, ddim_step, make_schedule
from .toyworld import SceneSpec, ToyTextEncoder, make_dataset, render_scene, sample_specs, train_toy

__all__ = [
    "AttentionContext",
    "AttentionMode",
    "EditConfig",
    "EditResult",
    "InversionRecord",
    "ModelConfig",
    "SceneSpec",
    "Schedule",
    "ToyTextEncoder",
    "ToyUNet",
    "add_noise",
    "build_toy_unet",
    "cfg_predict",
    "cross_frame_attend",
    "ddim_invert",
    "ddim_inverse_step",
    "ddim_step",
    "default_attention_modes",
    "edit",
    "edit_success",
    "frame_consistency",
    "invert_video",
    "make_dataset",
    "make_schedule",
    "null_text_optimize",
    "reconstruct",
    "reconstruction_metrics",
    "render_scene",
    "sample_specs",
    "train_toy",
]
