"""Diffusion tests: schedule, forward process statistics, U-Net, DDIM."""

import math

import numpy as np
import pytest
import torch

from eivst.diffusion import (
    DenoiserUNet,
    LocalizationHead,
    NoiseSchedule,
    ddim_sample,
    ddim_timesteps,
    downsample_mask,
    q_sample,
    training_loss,
)
from eivst.errors import ConfigError, ShapeError
from eivst.rng import np_rng, torch_gen

from oracles import downsample_mask_oracle, q_sample_moments


def test_schedule_endpoints_and_monotonicity():
    s = NoiseSchedule(timesteps=1000, beta_start=1e-4, beta_end=2e-2)
    assert float(s.betas[0]) == 0.0
    assert abs(float(s.betas[1]) - 1e-4) < 1e-12
    assert abs(float(s.betas[1000]) - 2e-2) < 1e-12
    assert float(s.alpha_bar[0]) == 1.0
    assert (s.alpha_bar[1:] < s.alpha_bar[:-1]).all()
    with pytest.raises(ConfigError):
        NoiseSchedule(beta_start=0.0)
    with pytest.raises(ConfigError):
        NoiseSchedule(beta_start=0.5, beta_end=0.1)


def test_schedule_gather_broadcasts_and_bounds():
    s = NoiseSchedule(timesteps=10)
    like = torch.zeros(3, 2, 4, 4)
    ab = s.gather(torch.tensor([0, 5, 10]), like)
    assert ab.shape == (3, 1, 1, 1)
    assert float(ab[0]) == 1.0
    with pytest.raises(IndexError):
        s.gather(torch.tensor([11]), like)
    with pytest.raises(IndexError):
        s.gather(torch.tensor([-1]), like)


def test_q_sample_closed_form_at_fixed_noise():
    s = NoiseSchedule(timesteps=100)
    z0 = torch.full((2, 3), 0.5, dtype=torch.float64)
    eps = torch.ones_like(z0)
    t = torch.tensor([1, 50])
    z_t = q_sample(z0, t, eps, s)
    for row, ti in enumerate((1, 50)):
        ab = float(s.alpha_bar[ti])
        want = math.sqrt(ab) * 0.5 + math.sqrt(1 - ab)
        assert abs(float(z_t[row, 0]) - want) < 1e-12


def test_q_sample_statistics_match_moments():
    s = NoiseSchedule(timesteps=1000)
    n = 20000
    z0 = torch.full((n,), 0.7, dtype=torch.float64)
    for t in (1, 500, 1000):
        eps = torch.randn(n, generator=torch_gen(t, "qs-stats"), dtype=torch.float64)
        z_t = q_sample(z0, torch.full((n,), t), eps, s)
        mean_want, var_want = q_sample_moments(np.full(n, 0.7), t, s)
        se_mean = math.sqrt(var_want / n)
        assert abs(float(z_t.mean()) - mean_want[0]) < 3 * se_mean
        se_var = var_want * math.sqrt(2.0 / (n - 1))
        assert abs(float(z_t.var(unbiased=True)) - var_want) < 3 * se_var


def test_q_sample_rejects_bad_timesteps_and_shapes():
    s = NoiseSchedule(timesteps=10)
    z0 = torch.zeros(2, 3)
    with pytest.raises(IndexError):
        q_sample(z0, torch.tensor([0, 1]), torch.zeros_like(z0), s)
    with pytest.raises(IndexError):
        q_sample(z0, torch.tensor([1, 11]), torch.zeros_like(z0), s)
    with pytest.raises(ShapeError):
        q_sample(z0, torch.tensor([1, 1]), torch.zeros(2, 4), s)


def test_downsample_mask_matches_oracle():
    rng = np_rng(23, "mask-oracle")
    worst = 0.0
    for trial in range(30):
        h = int(rng.integers(1, 5)) * 4
        m = torch.from_numpy(rng.random((2, 3, h, h)) > 0.5).double()
        got = downsample_mask(m, (h // 2, h // 2)).numpy()
        want = downsample_mask_oracle(m.numpy(), (h // 2, h // 2))
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst < 1e-10
    with pytest.raises(ShapeError):
        downsample_mask(torch.zeros(4, 6), (3, 4))


def _tiny_model(cfg, use_temporal=True):
    return DenoiserUNet(cfg, gen=torch_gen(0, "unet"), use_temporal=use_temporal)


def _batch(cfg, b=2):
    g = torch_gen(1, "unet-batch")
    n, hw = cfg.world_frames, cfg.world_canvas_px
    z = torch.randn(b, n, 3, hw, hw, generator=g)
    anchors = torch.rand(b, 2, 3, hw, hw, generator=g)
    cond = torch.randn(b, n, 5, cfg.tc_dim, generator=g)
    return z, anchors, cond


def test_unet_shapes_and_determinism(miniature_config):
    cfg = miniature_config()
    model = _tiny_model(cfg)
    z, anchors, cond = _batch(cfg)
    t = torch.tensor([1, 500])
    eps1, feats = model(z, t, cond, anchors)
    assert eps1.shape == z.shape
    hw = cfg.world_canvas_px // 2
    assert feats.shape == (2, cfg.world_frames, 2 * cfg.denoiser_channels, hw, hw)
    eps2, _ = model(z, t, cond, anchors)
    assert torch.equal(eps1, eps2)


def test_unet_rejects_condition_batch_mismatch(miniature_config):
    cfg = miniature_config()
    model = _tiny_model(cfg)
    z, anchors, cond = _batch(cfg)
    with pytest.raises(ShapeError):
        model(z, torch.tensor([1, 1]), cond[:, :2], anchors)


def test_unet_parameter_groups_partition_everything(miniature_config):
    cfg = miniature_config()
    model = _tiny_model(cfg)
    named = {name for name, _ in model.named_parameters()}
    grouped = {name for name, _ in model.spatial_parameters()}
    grouped |= {name for name, _ in model.cross_attention_parameters()}
    grouped |= {name for name, _ in model.temporal_parameters()}
    assert grouped == named


def test_localization_head_and_loss_composition(miniature_config):
    cfg = miniature_config()
    model = _tiny_model(cfg)
    head = LocalizationHead(2 * cfg.denoiser_channels, gen=torch_gen(2, "loc"))
    z, anchors, cond = _batch(cfg)
    s = NoiseSchedule(timesteps=cfg.diff_timesteps)
    t = torch.tensor([10, 20])
    eps = torch.randn(z.shape, generator=torch_gen(3, "eps"))
    masks = (torch.rand(2, cfg.world_frames, cfg.world_canvas_px,
                        cfg.world_canvas_px, generator=torch_gen(4, "m")) > 0.5).float()

    with torch.no_grad():
        total, rec, loc = training_loss(model, head, z, anchors, cond, t, eps, s,
                                        masks=masks, lam=0.25)
        total2, rec2, loc2 = training_loss(model, None, z, anchors, cond, t, eps, s)
    assert abs(float(total) - (float(rec) + 0.25 * float(loc))) < 1e-6
    assert float(loc) > 0
    assert float(loc2) == 0.0
    assert abs(float(total2) - float(rec2)) < 1e-7


def test_ddim_timesteps_descend_and_cover_extremes():
    taus = ddim_timesteps(1000, 50)
    assert taus[0] == 1000 and taus[-1] == 1
    assert all(a > b for a, b in zip(taus, taus[1:]))
    assert ddim_timesteps(10, 10) == list(range(10, 0, -1))


def test_ddim_sampling_is_deterministic_and_in_range(miniature_config):
    cfg = miniature_config()
    model = _tiny_model(cfg)
    s = NoiseSchedule(timesteps=cfg.diff_timesteps)
    _, anchors, cond = _batch(cfg)
    out1 = ddim_sample(model, s, anchors, cond, torch_gen(9, "ddim"), steps=6)
    out2 = ddim_sample(model, s, anchors, cond, torch_gen(9, "ddim"), steps=6)
    assert float((out1 - out2).abs().max()) < 1e-6
    assert out1.shape == (2, cfg.world_frames, 3, cfg.world_canvas_px,
                          cfg.world_canvas_px)
    assert float(out1.min()) >= 0.0 and float(out1.max()) <= 1.0


def test_ddim_eta_branch_runs_and_differs(miniature_config):
    cfg = miniature_config()
    model = _tiny_model(cfg)
    s = NoiseSchedule(timesteps=cfg.diff_timesteps)
    _, anchors, cond = _batch(cfg)
    det = ddim_sample(model, s, anchors, cond, torch_gen(9, "ddim"), steps=6)
    sto = ddim_sample(model, s, anchors, cond, torch_gen(9, "ddim"), steps=6, eta=0.5)
    assert not torch.equal(det, sto)


def test_temporal_attention_is_optional(miniature_config):
    cfg = miniature_config()
    model = _tiny_model(cfg, use_temporal=False)
    z, anchors, cond = _batch(cfg)
    eps, _ = model(z, torch.tensor([1, 2]), cond, anchors)
    assert eps.shape == z.shape
    assert list(model.temporal_parameters()) == []
