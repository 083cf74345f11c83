"""Rigid 2-D landmark alignment and its inverse.

A landmark frame is modelled as ``frame = R(theta) @ p_align + t`` applied
row-wise, where ``p_align`` lives in the template's (pose-free) coordinate
system.  :func:`align` recovers ``(p_align, theta, t)`` by least squares and
:func:`reconstruct` applies the forward map again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateTemplateError(ValueError):
    pass


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class Pose:
    theta: float
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(2))

    def as_vector(self) -> np.ndarray:
        return np.array([self.theta, self.t[0], self.t[1]])


@dataclass(frozen=True)
class AlignedDecomposition:
    p_align: np.ndarray  # L x 2
    pose: Pose


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def align(frame: np.ndarray, template: np.ndarray) -> AlignedDecomposition:
    """Rigid Procrustes (rotation + translation, no scale, no reflection)."""
    frame = np.asarray(frame, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    if frame.shape != template.shape or frame.ndim != 2 or frame.shape[1] != 2:
        raise ValueError(f"frame {frame.shape} and template {template.shape} must both be L x 2")
    if frame.shape[0] < 2:
        raise ValueError("need at least two landmarks")
    c_tpl = template.mean(axis=0)
    a = template - c_tpl
    if not np.any(np.abs(a) > 1e-12 * max(1.0, np.abs(template).max())):
        raise DegenerateTemplateError("template points all coincide")
    c_frm = frame.mean(axis=0)
    b = frame - c_frm
    # closed-form 2-D rotation taking template rows onto frame rows
    cross = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    dot = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    theta = wrap_angle(math.atan2(cross, dot))
    r = rotation_matrix(theta)
    t = c_frm - r @ c_tpl
    p_align = (frame - t) @ r  # row-wise R^T (x - t)
    return AlignedDecomposition(p_align, Pose(theta, t))


def reconstruct(p_align: np.ndarray, pose: Pose) -> np.ndarray:
    return np.asarray(p_align, dtype=np.float64) @ rotation_matrix(pose.theta).T + pose.t


def apply_rigid(points: np.ndarray, theta: float, t) -> np.ndarray:
    return reconstruct(points, Pose(theta, t))


def generalized_procrustes(frames: np.ndarray, iterations: int = 5) -> np.ndarray:
    """Mean aligned shape of ``frames`` (N x L x 2), centred at the origin."""
    frames = np.asarray(frames, dtype=np.float64)
    template = frames[0] - frames[0].mean(axis=0)
    for _ in range(iterations):
        aligned = np.stack([align(f, template).p_align for f in frames])
        template = aligned.mean(axis=0)
        template = template - template.mean(axis=0)
    return template
