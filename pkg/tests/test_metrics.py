"""Metric tests: Fréchet machinery against closed forms, proxy metrics on
hand-constructed videos."""

import math

import numpy as np
import pytest
import torch

from eivst.errors import InsufficientSamples, NotReady, ShapeError, ValidationError
from eivst.metrics import (
    FeatureStats,
    endpoint_mse,
    fvd_lite,
    frechet_distance,
    mask_iou,
    mid_frame_mse,
    sqrtm_product,
    sqrtm_psd,
    vic,
    vtc,
    vtq,
)
from eivst.rng import np_rng

from oracles import frechet_oracle


def test_feature_stats_validation():
    with pytest.raises(InsufficientSamples):
        FeatureStats.from_features(np.zeros((1, 4)))
    with pytest.raises(ShapeError):
        FeatureStats(np.zeros(3), np.eye(2), 2)
    with pytest.raises(ValidationError):
        FeatureStats(np.zeros(2), np.array([[1.0, 0.5], [-0.5, 1.0]]), 2)
    with pytest.raises(ValidationError):
        FeatureStats(np.zeros(2), np.diag([1.0, -1.0]), 2)


def test_sqrtm_psd_squares_back():
    rng = np_rng(29, "sqrtm")
    for _ in range(20):
        a = rng.standard_normal((5, 5))
        mat = a @ a.T
        root = sqrtm_psd(mat)
        assert np.abs(root @ root - mat).max() < 1e-8
        assert np.abs(root - root.T).max() < 1e-10


def test_sqrtm_product_reconstructs_the_product():
    rng = np_rng(31, "sqrtm-prod")
    for _ in range(20):
        a = rng.standard_normal((4, 4))
        b = rng.standard_normal((4, 4))
        cov_a = a @ a.T + 0.1 * np.eye(4)
        cov_b = b @ b.T + 0.1 * np.eye(4)
        root = sqrtm_product(cov_a, cov_b)
        err = np.linalg.norm(root @ root - cov_a @ cov_b)
        assert err < 1e-6


def test_frechet_distance_matches_oracle_and_closed_form():
    rng = np_rng(37, "frechet")
    for _ in range(10):
        a = rng.standard_normal((6, 3))
        b = rng.standard_normal((6, 3))
        cov_a = a.T @ a / 6 + 0.2 * np.eye(3)
        cov_b = b.T @ b / 6 + 0.2 * np.eye(3)
        mu_a = rng.standard_normal(3)
        mu_b = rng.standard_normal(3)
        got = frechet_distance(FeatureStats(mu_a, cov_a, 6),
                               FeatureStats(mu_b, cov_b, 6), shrinkage=0.0)
        want = frechet_oracle(mu_a, cov_a, mu_b, cov_b)
        assert abs(got - want) < 1e-8

    # Equal-covariance shift: distance reduces to the squared mean gap.
    cov = np.eye(2)
    got = frechet_distance(FeatureStats([0.0, 0.0], cov, 10),
                           FeatureStats([1.0, 1.0], cov, 10), shrinkage=0.0)
    assert abs(got - 2.0) < 1e-10


def test_fvd_lite_analytic_gaussians():
    rng = np_rng(1234, "fvd-analytic")
    real = rng.standard_normal((10000, 2))
    gen = rng.standard_normal((10000, 2)) + 1.0
    score = fvd_lite(list(real), list(gen), encoder=lambda rows: np.stack(rows))
    assert abs(score - 2.0) / 2.0 < 0.10
    same = fvd_lite(list(real), list(real), encoder=lambda rows: np.stack(rows))
    assert same < 1e-6


def test_fvd_lite_needs_two_videos_per_set():
    with pytest.raises(InsufficientSamples):
        fvd_lite([np.zeros(2)], [np.zeros(2), np.zeros(2)], encoder=np.stack)


def test_vtq_rewards_smooth_motion_and_penalizes_jerk():
    frames = torch.arange(8, dtype=torch.float64).reshape(8, 1, 1, 1) / 7.0
    smooth = frames.expand(8, 3, 4, 4)
    assert vtq(smooth) > 0.95

    jerky = torch.zeros(8, 3, 4, 4, dtype=torch.float64)
    jerky[1::2] = 1.0
    assert vtq(jerky) < vtq(smooth)

    static = torch.full((8, 3, 4, 4), 0.5, dtype=torch.float64)
    assert vtq(static) <= 0.5

    with pytest.raises(ShapeError):
        vtq(torch.zeros(1, 3, 4, 4))


def test_vtc_requires_trained_classifier():
    with pytest.raises(NotReady):
        vtc(torch.zeros(4, 3, 8, 8), "MOVE red square to region_tl", None)

    class Untrained:
        trained = False

    with pytest.raises(NotReady):
        vtc(torch.zeros(4, 3, 8, 8), "MOVE red square to region_tl", Untrained())


def test_vic_is_one_for_exact_anchors_and_decays():
    video = torch.rand(6, 3, 8, 8, generator=torch.Generator().manual_seed(0),
                       dtype=torch.float64)
    exact = vic(video, video[0], video[-1])
    assert abs(exact - 1.0) < 1e-12
    off = vic(video, video[0] + 1.0, video[-1])
    assert off < exact
    # Analytic value: MSE of +1 offset is exactly 1.
    assert abs(off - 0.5 * (1.0 / 2.0 + 1.0)) < 1e-12


def test_mask_iou_hand_values():
    pred = torch.zeros(1, 4, 4)
    pred[0, :2, :2] = 1.0
    true = torch.zeros(1, 4, 4)
    true[0, :2, :] = 1.0
    assert abs(mask_iou(pred, true) - 4.0 / 8.0) < 1e-12

    # Empty against empty counts as a perfect frame.
    assert mask_iou(torch.zeros(2, 4, 4), torch.zeros(2, 4, 4)) == 1.0

    # Ground truth at full resolution is pooled down first.
    pred = torch.zeros(1, 2, 2)
    pred[0, 0, 0] = 1.0
    true_full = torch.zeros(1, 4, 4)
    true_full[0, :2, :2] = 1.0
    assert abs(mask_iou(pred, true_full) - 1.0) < 1e-12

    with pytest.raises(ShapeError):
        mask_iou(torch.zeros(2, 4, 4), torch.zeros(3, 8, 8))


def test_mid_frame_and_endpoint_mse():
    gen = [torch.zeros(4, 3, 2, 2, dtype=torch.float64)]
    real = [torch.ones(4, 3, 2, 2, dtype=torch.float64)]
    assert abs(mid_frame_mse(gen, real) - 1.0) < 1e-12
    anchors = [torch.stack([torch.ones(3, 2, 2), torch.zeros(3, 2, 2)]).double()]
    assert abs(endpoint_mse(gen, anchors) - 0.5) < 1e-12
    with pytest.raises(ShapeError):
        mid_frame_mse([torch.zeros(4, 3, 2, 2)], [torch.zeros(4, 3, 4, 4)])
