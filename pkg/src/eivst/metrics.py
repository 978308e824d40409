"""Desk-scale metric suite: exact Frechet distance between video-feature
Gaussians (FVD-lite) plus small proxies for temporal quality, text
consistency, anchor consistency, and localization IoU.

All metrics are pure functions of their inputs; batch statistics accumulate
in a fixed order so repeated evaluation is bit-identical.
"""

import numpy as np
import torch

from .diffusion import downsample_mask
from .errors import InsufficientSamples, NotReady, ShapeError, ValidationError


class FeatureStats:
    """Mean and covariance of a feature set, with basic sanity checks."""

    def __init__(self, mean, covariance, count):
        mean = np.asarray(mean, dtype=np.float64)
        covariance = np.asarray(covariance, dtype=np.float64)
        if covariance.shape != (mean.shape[0], mean.shape[0]):
            raise ShapeError("covariance must be d x d for a d-vector mean")
        asym = np.abs(covariance - covariance.T).max()
        if asym > 1e-10:
            raise ValidationError(f"covariance asymmetry {asym:.3e} exceeds 1e-10")
        eigvals = np.linalg.eigvalsh((covariance + covariance.T) / 2.0)
        if eigvals.min() < -1e-8:
            raise ValidationError(f"covariance eigenvalue {eigvals.min():.3e} < -1e-8")
        self.mean = mean
        self.covariance = (covariance + covariance.T) / 2.0
        self.count = int(count)

    @classmethod
    def from_features(cls, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise InsufficientSamples("need at least 2 feature rows")
        mean = features.mean(axis=0)
        centered = features - mean
        cov = centered.T @ centered / (features.shape[0] - 1)
        return cls(mean, cov, features.shape[0])


def sqrtm_psd(mat):
    """Symmetric PSD square root via eigendecomposition, eigenvalues clamped
    at zero."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def sqrtm_product(a, b):
    """Principal square root of the (generally nonsymmetric) product a @ b.

    Uses the similarity a@b = S (S b S) S^{-1} with S = a^{1/2}, valid for
    positive definite a.
    """
    s = sqrtm_psd(a)
    inner = sqrtm_psd(s @ b @ s)
    return s @ inner @ np.linalg.inv(s)


def frechet_distance(stats_a, stats_b, shrinkage=1e-6):
    d_mu = stats_a.mean - stats_b.mean
    dim = d_mu.shape[0]
    cov_a = stats_a.covariance + shrinkage * np.eye(dim)
    cov_b = stats_b.covariance + shrinkage * np.eye(dim)
    s = sqrtm_psd(cov_a)
    cross = sqrtm_psd(s @ cov_b @ s)
    value = float(d_mu @ d_mu + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def fvd_lite(real_videos, gen_videos, encoder):
    """Frechet distance between encoded feature Gaussians of two video sets."""
    if len(real_videos) < 2 or len(gen_videos) < 2:
        raise InsufficientSamples("fvd_lite needs at least 2 videos per set")
    real = encoder(real_videos)
    gen = encoder(gen_videos)
    real = real.detach().cpu().numpy() if torch.is_tensor(real) else np.asarray(real)
    gen = gen.detach().cpu().numpy() if torch.is_tensor(gen) else np.asarray(gen)
    return frechet_distance(FeatureStats.from_features(real),
                            FeatureStats.from_features(gen))


STATIC_MOTION_FLOOR = 0.005


def vtq(video):
    """Temporal-quality proxy in [0, 1]: penalizes jerk beyond the local
    motion magnitude, and penalizes frozen videos by a flat 0.5."""
    video = torch.as_tensor(video, dtype=torch.float64)
    if video.shape[0] < 2:
        raise ShapeError("vtq needs at least 2 frames")
    d1 = video[1:] - video[:-1]
    m1 = d1.abs().mean().item()
    if video.shape[0] >= 3:
        d2 = d1[1:] - d1[:-1]
        excess = (d2.abs() - d1[:-1].abs()).clamp(min=0.0).mean().item()
        jerk = min(excess / (m1 + 1e-8), 1.0)
    else:
        jerk = 0.0
    score = 1.0 - jerk
    if m1 < STATIC_MOTION_FLOOR:
        score -= 0.5
    return min(max(score, 0.0), 1.0)


def vtc(video, instruction, classifier):
    """Probability the trained classifier assigns to the true instruction."""
    if classifier is None or not getattr(classifier, "trained", False):
        raise NotReady("vtc requires a trained instruction classifier")
    video = torch.as_tensor(video, dtype=torch.float32)
    probs = classifier.predict_probs(video.unsqueeze(0))
    targets = classifier.instruction_targets(instruction)
    score = 1.0
    for head, idx in targets.items():
        score *= float(probs[head][0, idx])
    return score


def vic(video, anchor_first, anchor_last):
    """Mean per-anchor similarity 1 / (1 + MSE) for frames 1 and N."""
    video = torch.as_tensor(video, dtype=torch.float64)
    a = torch.as_tensor(anchor_first, dtype=torch.float64)
    b = torch.as_tensor(anchor_last, dtype=torch.float64)
    mse_first = ((video[0] - a) ** 2).mean().item()
    mse_last = ((video[-1] - b) ** 2).mean().item()
    return 0.5 * (1.0 / (1.0 + mse_first) + 1.0 / (1.0 + mse_last))


def mask_iou(pred_probs, true_masks, threshold=0.5):
    """Frame-averaged IoU of thresholded predictions against ground truth.

    Ground truth is area-pooled to the prediction resolution and thresholded
    at 0.5; an empty-vs-empty frame counts as IoU 1.
    """
    pred = torch.as_tensor(pred_probs, dtype=torch.float64)
    true = torch.as_tensor(np.asarray(true_masks), dtype=torch.float64)
    if true.shape[-2:] != pred.shape[-2:]:
        true = downsample_mask(true, pred.shape[-2:])
    if true.shape != pred.shape:
        raise ShapeError(f"mask shapes {tuple(true.shape)} vs {tuple(pred.shape)}")
    p = pred >= threshold
    t = true >= 0.5
    flat_p = p.reshape(-1, p.shape[-2] * p.shape[-1])
    flat_t = t.reshape(-1, t.shape[-2] * t.shape[-1])
    inter = (flat_p & flat_t).sum(dim=1).double()
    union = (flat_p | flat_t).sum(dim=1).double()
    iou = torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(inter))
    return float(iou.mean())


def mid_frame_mse(gen_videos, real_videos):
    """MSE over interior frames (anchors excluded), averaged over videos."""
    total = 0.0
    for gen, real in zip(gen_videos, real_videos):
        g = torch.as_tensor(gen, dtype=torch.float64)
        r = torch.as_tensor(real, dtype=torch.float64)
        if g.shape != r.shape:
            raise ShapeError("video shape mismatch in mid_frame_mse")
        total += ((g[1:-1] - r[1:-1]) ** 2).mean().item()
    return total / max(len(gen_videos), 1)


def endpoint_mse(gen_videos, anchor_pairs):
    """MSE of generated frames 1 and N against the given anchors."""
    total = 0.0
    for gen, anchors in zip(gen_videos, anchor_pairs):
        g = torch.as_tensor(gen, dtype=torch.float64)
        a = torch.as_tensor(anchors, dtype=torch.float64)
        total += 0.5 * (((g[0] - a[0]) ** 2).mean().item()
                        + ((g[-1] - a[1]) ** 2).mean().item())
    return total / max(len(gen_videos), 1)
