"""68-point facial landmark topology and a parametric canonical face."""

from __future__ import annotations

import numpy as np

N_POINTS = 68
JAW = range(0, 17)
RIGHT_BROW = range(17, 22)
LEFT_BROW = range(22, 27)
NOSE_BRIDGE = range(27, 31)
NOSE_BASE = range(31, 36)
EYE_A = range(36, 42)
EYE_B = range(42, 48)
MOUTH_OUTER = range(48, 60)
MOUTH_INNER = range(60, 68)
MOUTH = range(48, 68)

# (indices, closed?) polylines used by the wireframe renderer
CONNECTIVITY: list[tuple[tuple[int, ...], bool]] = [
    (tuple(JAW), False),
    (tuple(RIGHT_BROW), False),
    (tuple(LEFT_BROW), False),
    (tuple(NOSE_BRIDGE), False),
    (tuple(NOSE_BASE), False),
    (tuple(EYE_A), True),
    (tuple(EYE_B), True),
    (tuple(MOUTH_OUTER), True),
    (tuple(MOUTH_INNER), True),
]


def interocular_distance(points: np.ndarray) -> float:
    a = points[list(EYE_A)].mean(axis=0)
    b = points[list(EYE_B)].mean(axis=0)
    return float(np.linalg.norm(a - b))


def mouth_points(opening: float = 0.0, width: float = 1.0, smile: float = 0.0,
                 centre=(0.0, -0.55)) -> np.ndarray:
    """20 mouth points (outer 12, inner 8) for simple shape parameters."""
    cx, cy = centre
    half = 0.38 * width
    s7 = np.sin(np.linspace(0.0, np.pi, 7))
    s5 = np.sin(np.linspace(0.0, np.pi, 5))
    outer_x = half * np.concatenate([np.cos(np.linspace(np.pi, 0.0, 7)),
                                     np.cos(np.linspace(0.0, np.pi, 7))[1:-1]])
    outer_y = np.concatenate([0.03 + (0.08 + 0.4 * opening) * s7,
                              -(0.1 + 0.6 * opening) * s7[1:-1]])
    outer_y[[0, 6]] += 0.12 * smile
    ix = 0.8 * half * np.cos(np.linspace(np.pi, 0.0, 5))
    inner_x = np.concatenate([ix, ix[3:0:-1]])
    inner_y = np.concatenate([0.01 + 0.4 * opening * s5,
                              -0.01 - 0.6 * opening * s5[3:0:-1]])
    inner_y[[0, 4]] += 0.1 * smile
    return np.column_stack([np.concatenate([outer_x, inner_x]) + cx,
                            np.concatenate([outer_y, inner_y]) + cy])


def canonical_face(jaw_width: float = 1.0, chin_length: float = 1.0, brow_raise: float = 0.0,
                   mouth: np.ndarray | None = None) -> np.ndarray:
    """A frontal 68-point face with unit inter-ocular distance."""
    pts = np.zeros((N_POINTS, 2))
    phi = np.linspace(np.pi, 2.0 * np.pi, 17)
    pts[list(JAW)] = np.column_stack([0.95 * jaw_width * np.cos(phi),
                                      0.3 + 1.25 * chin_length * np.sin(phi)])
    bx = np.linspace(-0.85, -0.2, 5)
    by = 0.62 + brow_raise + 0.1 * np.sin(np.linspace(0.2, np.pi - 0.2, 5))
    pts[list(RIGHT_BROW)] = np.column_stack([bx, by])
    pts[list(LEFT_BROW)] = np.column_stack([-bx[::-1], by[::-1]])
    pts[list(NOSE_BRIDGE)] = np.column_stack([np.zeros(4), np.linspace(0.35, -0.08, 4)])
    pts[list(NOSE_BASE)] = np.column_stack([np.linspace(-0.2, 0.2, 5),
                                            -0.17 - 0.04 * np.cos(np.linspace(-1.2, 1.2, 5))])
    ang = np.linspace(np.pi, -np.pi, 7)[:-1]
    eye = np.column_stack([0.2 * np.cos(ang), 0.08 * np.sin(ang)])
    pts[list(EYE_A)] = eye + [-0.5, 0.35]
    pts[list(EYE_B)] = eye * [-1.0, 1.0] + [0.5, 0.35]
    pts[list(MOUTH)] = mouth_points() if mouth is None else mouth
    return pts
