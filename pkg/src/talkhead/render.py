"""Wireframe rasteriser for landmark frames and binary PGM I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import face


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderSpec:
    width: int = 256
    height: int = 256
    connectivity: list = field(default_factory=lambda: list(face.CONNECTIVITY))
    stroke: float = 1.0
    margin: float = 0.1

    def check(self, n_points: int) -> None:
        for idx, _closed in self.connectivity:
            if max(idx) >= n_points:
                raise RenderError(f"connectivity index {max(idx)} out of range for {n_points} points")


def fit_to_canvas(points: np.ndarray, spec: RenderSpec) -> np.ndarray:
    """Uniform min-max fit into the canvas with a margin; y axis flipped to rows."""
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    if not (extent > 0).any():
        raise RenderError("degenerate bounding box: all landmarks coincide")
    usable = np.array([spec.width, spec.height]) * (1.0 - 2.0 * spec.margin) - 1
    scale = np.min(np.where(extent > 0, usable / np.where(extent > 0, extent, 1.0), np.inf))
    centre = (lo + hi) / 2.0
    col = (pts[:, 0] - centre[0]) * scale + (spec.width - 1) / 2.0
    row = (centre[1] - pts[:, 1]) * scale + (spec.height - 1) / 2.0
    # snap first so float noise from a global shift cannot flip a half-pixel rounding
    snapped = np.round(np.column_stack([col, row]), 6)
    return np.rint(snapped).astype(int)


def _line(img: np.ndarray, c0: int, r0: int, c1: int, r1: int, value: float) -> None:
    dc, dr = abs(c1 - c0), -abs(r1 - r0)
    sc, sr = (1 if c0 < c1 else -1), (1 if r0 < r1 else -1)
    err = dc + dr
    while True:
        img[r0, c0] = value
        if c0 == c1 and r0 == r1:
            return
        e2 = 2 * err
        if e2 >= dr:
            err += dr
            c0 += sc
        if e2 <= dc:
            err += dc
            r0 += sr


def rasterize(frame: np.ndarray, spec: RenderSpec | None = None) -> np.ndarray:
    """Bresenham polylines for each connectivity group on a black canvas."""
    spec = spec or RenderSpec()
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[0] == face.N_POINTS:
        spec.check(frame.shape[0])
        groups = spec.connectivity
    else:
        groups = [(tuple(range(frame.shape[0])), False)]
    px = fit_to_canvas(frame, spec)
    img = np.zeros((spec.height, spec.width))
    for idx, closed in groups:
        seq = list(idx) + ([idx[0]] if closed else [])
        if len(seq) == 1:
            img[px[seq[0], 1], px[seq[0], 0]] = spec.stroke
        for a, b in zip(seq[:-1], seq[1:]):
            _line(img, px[a, 0], px[a, 1], px[b, 0], px[b, 1], spec.stroke)
    return img


def write_pgm(path, img: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise RenderError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return pixels.astype(np.float64) / maxval
