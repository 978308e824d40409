"""Run configuration: a flat, typed, commented key=value format.

Every field has a documented range checked before any compute starts, and the
canonical serialization hashes to the config hash stamped on every artifact.
"""

import dataclasses
import hashlib
from dataclasses import dataclass

from .errors import ValidationError


@dataclass
class RunConfig:
    # world
    world_frames: int = 16
    world_canvas_px: int = 32
    world_object_px: int = 8
    world_frame_rate: float = 8.0
    dataset_train_episodes: int = 2000
    dataset_held_fraction: float = 0.1

    # transition model
    tvlm_dim: int = 128
    tvlm_layers: int = 2
    tvlm_heads: int = 4
    tvlm_patch_px: int = 4
    tvlm_state_tokens: int = 16
    tvlm_step_tokens: int = 16
    tvlm_lora_rank: int = 8
    tvlm_lora_alpha: float = 16.0
    tvlm_epochs: int = 64
    tvlm_batch: int = 64
    tvlm_warm_frac: float = 0.5
    tvlm_warm_lr: float = 3e-4
    tvlm_adapter_lr: float = 1e-4
    tvlm_lora_lr: float = 5e-4

    # transition conditioning
    tc_dim: int = 64
    tc_heads: int = 4
    tc_queries: int = 16
    tc_state_blocks: int = 2
    tc_fuse_blocks: int = 2
    tc_sigma_half: bool = False
    tc_stochastic_weights: bool = False

    # diffusion
    diff_timesteps: int = 1000
    diff_beta_start: float = 1e-4
    diff_beta_end: float = 2e-2
    denoiser_channels: int = 8
    denoiser_heads: int = 4
    denoiser_emb_dim: int = 64

    # training
    stage0_steps: int = 2000
    stage0_lr: float = 1e-4
    stage0_batch: int = 4
    stage1_steps: int = 2000
    stage1_lr: float = 1e-4
    stage1_batch: int = 4
    stage2_steps: int = 1000
    stage2_lr: float = 2e-5
    stage2_batch: int = 4
    loc_loss_weight: float = 0.1
    checkpoint_every: int = 500

    # sampling / eval
    ddim_steps: int = 50
    ddim_eta: float = 0.0
    eval_videos: int = 96
    eval_loc_timestep: int = 100
    classifier_steps: int = 2000
    classifier_batch: int = 32
    classifier_lr: float = 1e-3

    # seeds and ablation flags
    seed: int = 0
    use_tvlm: bool = True
    use_tc: bool = True
    use_oas: bool = True
    fixed_k: str = "variable"

    def validate(self):
        c = self
        checks = [
            (c.world_frames >= 4, "world_frames must be >= 4"),
            (c.world_frames <= 256, "world_frames must be <= 256"),
            (c.world_canvas_px >= 16, "world_canvas_px must be >= 16"),
            (c.world_canvas_px % 4 == 0, "world_canvas_px must be a multiple of 4"),
            (4 <= c.world_object_px <= c.world_canvas_px // 2,
             "world_object_px out of range"),
            (c.world_frame_rate > 0, "world_frame_rate must be positive"),
            (c.dataset_train_episodes >= 1, "dataset_train_episodes must be >= 1"),
            (0.0 < c.dataset_held_fraction < 0.5, "dataset_held_fraction out of (0, 0.5)"),
            (c.tvlm_dim >= 8 and c.tvlm_dim % c.tvlm_heads == 0,
             "tvlm_dim must be >= 8 and divisible by tvlm_heads"),
            (1 <= c.tvlm_layers <= 8, "tvlm_layers out of range"),
            (c.world_canvas_px % c.tvlm_patch_px == 0,
             "tvlm_patch_px must divide world_canvas_px"),
            (c.tvlm_state_tokens >= 1, "tvlm_state_tokens must be >= 1"),
            (c.tvlm_step_tokens >= 1, "tvlm_step_tokens must be >= 1"),
            (1 <= c.tvlm_lora_rank <= 64, "tvlm_lora_rank out of range"),
            (c.tvlm_lora_alpha > 0, "tvlm_lora_alpha must be positive"),
            (c.tvlm_epochs >= 1, "tvlm_epochs must be >= 1"),
            (c.tvlm_batch >= 1, "tvlm_batch must be >= 1"),
            (0.0 <= c.tvlm_warm_frac <= 1.0, "tvlm_warm_frac out of [0,1]"),
            (c.tc_dim >= 8 and c.tc_dim % c.tc_heads == 0,
             "tc_dim must be >= 8 and divisible by tc_heads"),
            (c.tc_queries >= 1, "tc_queries must be >= 1"),
            (1 <= c.tc_state_blocks <= 8 and 1 <= c.tc_fuse_blocks <= 8,
             "tc block counts out of range"),
            (2 <= c.diff_timesteps <= 10000, "diff_timesteps out of range"),
            (0 < c.diff_beta_start < c.diff_beta_end < 1,
             "beta schedule must satisfy 0 < start < end < 1"),
            (c.denoiser_channels >= 4 and c.denoiser_channels % 4 == 0,
             "denoiser_channels must be >= 4 and a multiple of 4"),
            (c.denoiser_emb_dim >= 8 and c.denoiser_emb_dim % 2 == 0,
             "denoiser_emb_dim must be even and >= 8"),
            (c.stage0_steps >= 0, "stage0_steps must be >= 0"),
            (c.stage1_steps >= 1, "stage1_steps must be >= 1"),
            (c.stage2_steps >= 0, "stage2_steps must be >= 0"),
            (all(lr > 0 and lr <= 1.0 for lr in (
                c.stage0_lr, c.stage1_lr, c.stage2_lr, c.tvlm_warm_lr,
                c.tvlm_adapter_lr, c.tvlm_lora_lr, c.classifier_lr)),
             "learning rates must lie in (0, 1]"),
            (all(b >= 1 for b in (c.stage0_batch, c.stage1_batch, c.stage2_batch,
                                  c.classifier_batch)),
             "batch sizes must be >= 1"),
            (0.0 <= c.loc_loss_weight <= 10.0, "loc_loss_weight out of [0, 10]"),
            (c.checkpoint_every >= 1, "checkpoint_every must be >= 1"),
            (2 <= c.ddim_steps <= c.diff_timesteps, "ddim_steps out of range"),
            (0.0 <= c.ddim_eta <= 1.0, "ddim_eta out of [0,1]"),
            (c.eval_videos >= 2, "eval_videos must be >= 2"),
            (1 <= c.eval_loc_timestep <= c.diff_timesteps,
             "eval_loc_timestep out of range"),
            (c.classifier_steps >= 1, "classifier_steps must be >= 1"),
            (c.seed >= 0, "seed must be nonnegative"),
            (c.fixed_k in ("variable", "1", "2", "4"),
             "fixed_k must be one of: variable, 1, 2, 4"),
        ]
        if c.use_tc and not c.use_tvlm:
            raise ValidationError("use_tc requires use_tvlm")
        for ok, message in checks:
            if not ok:
                raise ValidationError(f"config: {message}")
        return self

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def data_hash(self):
        """Hash over the fields that determine dataset content, so runs that
        differ only in model or ablation settings can share a dataset."""
        lines = [
            f"{f.name} = {getattr(self, f.name)}"
            for f in dataclasses.fields(self)
            if f.name.startswith(("world_", "dataset_")) or f.name == "seed"
        ]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def replace(self, **kwargs):
        return dataclasses.replace(self, **kwargs)


def _parse_value(raw, ftype, key):
    raw = raw.strip()
    try:
        if ftype is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        return raw
    except ValueError as err:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r}") from err


def parse_config(text):
    """Parse the flat key=value format (with # comments) into a RunConfig."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {"int": int, "float": float, "bool": bool, "str": str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in fields:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        ftype = fields[key]
        if isinstance(ftype, str):
            ftype = types[ftype]
        values[key] = _parse_value(raw, ftype, key)
    return RunConfig(**values)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
