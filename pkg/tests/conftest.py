"""Shared fixtures: a miniature config and a handful of generated episodes."""

import dataclasses

import pytest

from eivst.config import RunConfig
from eivst.pipeline import _episode_seed
from eivst.world import generate_episode


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest config that exercises every code path quickly."""
    return RunConfig(
        world_frames=8,
        denoiser_channels=8,
        tc_dim=32,
        tc_queries=4,
        tvlm_dim=32,
        tvlm_state_tokens=8,
        tvlm_step_tokens=4,
        dataset_train_episodes=20,
        eval_videos=4,
        ddim_steps=8,
    )


@pytest.fixture(scope="session")
def tiny_episodes(tiny_config):
    return [generate_episode(_episode_seed(tiny_config.seed, i), tiny_config)
            for i in range(6)]


@pytest.fixture(scope="session")
def miniature_config():
    """Factory for a 4-frame 8x8 world with d=16 modules (gradient checks)."""

    def build(**overrides):
        base = dict(
            world_frames=4,
            world_canvas_px=8,
            world_object_px=3,
            tvlm_patch_px=4,
            tvlm_dim=16,
            tvlm_heads=2,
            tvlm_layers=1,
            tvlm_state_tokens=4,
            tvlm_step_tokens=2,
            tc_dim=16,
            tc_heads=2,
            tc_queries=2,
            tc_state_blocks=1,
            tc_fuse_blocks=1,
            denoiser_channels=4,
            denoiser_heads=2,
        )
        base.update(overrides)
        return RunConfig(**base)

    return build
