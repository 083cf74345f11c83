"""Evaluation metrics: LMD, RD, PSNR, SSIM and EER."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import face
from .geometry import Pose, wrap_angle


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredTrial:
    score: float
    is_same: bool

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise MetricError("trial score must be finite")


MOUTH_IDX = list(face.MOUTH)


def lmd(gen, ref, mouth_only: bool = True, center: bool = True) -> float:
    """Mean Euclidean landmark distance over frames and points.

    With ``mouth_only`` (68-point tracks) only points 48-67 count; with
    ``center`` each frame's selected points are shifted to their centroid
    first, independently for generated and reference.
    """
    gen = np.asarray(gen, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if gen.shape != ref.shape:
        raise MetricError(f"lmd: shapes differ {gen.shape} vs {ref.shape}")
    if mouth_only and gen.shape[-2] == face.N_POINTS:
        gen, ref = gen[..., MOUTH_IDX, :], ref[..., MOUTH_IDX, :]
    if center:
        gen = gen - gen.mean(axis=-2, keepdims=True)
        ref = ref - ref.mean(axis=-2, keepdims=True)
    return float(np.linalg.norm(gen - ref, axis=-1).mean())


def _thetas(poses) -> np.ndarray:
    return np.array([p.theta if isinstance(p, Pose) else float(p) for p in poses], dtype=np.float64)


def rd(gen_poses: Sequence, ref_poses: Sequence) -> float:
    """Mean absolute wrapped rotation difference (radians)."""
    if len(gen_poses) != len(ref_poses):
        raise MetricError(f"rd: lengths differ {len(gen_poses)} vs {len(ref_poses)}")
    if len(gen_poses) == 0:
        raise MetricError("rd: empty pose tracks")
    diff = wrap_angle(_thetas(gen_poses) - _thetas(ref_poses))
    return float(np.mean(np.abs(diff)))


PSNR_CAP = 100.0


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = g.size // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid positions."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise MetricError(f"ssim: need a 2-D image of at least {window}x{window}, got {a.shape}")
    c1, c2 = k1 ** 2, k2 ** 2
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _eer_one_polarity(scores: np.ndarray, same: np.ndarray) -> float:
    """EER where a trial scoring exactly at the threshold is neither error.

    FAR(t) = P(negative > t) and FRR(t) = P(positive < t) are evaluated at
    every distinct score; FAR - FRR goes from >= 0 at the lowest score to
    <= 0 at the highest, and the crossing is linearly interpolated between
    the two bracketing thresholds.
    """
    thresholds = np.unique(scores)
    pos, neg = np.sort(scores[same]), np.sort(scores[~same])
    far = 1.0 - np.searchsorted(neg, thresholds, side="right") / neg.size
    frr = np.searchsorted(pos, thresholds, side="left") / pos.size
    diff = far - frr
    hit = np.nonzero(diff == 0)[0]
    if hit.size:
        return float(far[hit[0]])
    i = int(np.nonzero(diff < 0)[0][0])
    d0, d1 = diff[i - 1], diff[i]
    w = d0 / (d0 - d1)
    return float(far[i - 1] + w * (far[i] - far[i - 1]))


def eer(trials: Sequence[ScoredTrial]) -> float:
    """Equal error rate, taking the better of the two score polarities."""
    scores = np.array([t.score for t in trials], dtype=np.float64)
    same = np.array([bool(t.is_same) for t in trials])
    if same.all() or not same.any():
        raise MetricError("eer: need at least one same and one different trial")
    return min(_eer_one_polarity(scores, same), _eer_one_polarity(-scores, same))


def pairwise_trials(embeddings: np.ndarray, labels: Sequence) -> list[ScoredTrial]:
    """All unordered pairs scored by cosine similarity."""
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-8)
    sims = e @ e.T
    out = []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            out.append(ScoredTrial(float(sims[i, j]), labels[i] == labels[j]))
    return out
