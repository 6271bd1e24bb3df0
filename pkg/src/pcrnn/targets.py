"""Periodic 2-D target trajectories (circle, square, triangle)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle")


@dataclass(frozen=True)
class TargetSpec:
    shape: str
    period: int = 60
    length: int = 1000
    amplitude: float = 1.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.period < 2:
            raise ValueError("period must be >= 2")
        if self.length < self.period:
            raise ValueError("length must cover at least one period")
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")
        edges = {"square": 4, "triangle": 3}.get(self.shape)
        if edges and self.period < 3 * edges:
            raise ValueError(f"{self.shape} needs at least {3 * edges} samples per period")


def _polygon(vertices: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Points at fractional arc length ``phase`` in [0, 1) along a closed polygon."""
    closed = np.vstack([vertices, vertices[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = phase * cum[-1]
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = ((s - cum[idx]) / seg[idx])[:, None]
    return closed[idx] + frac * (closed[idx + 1] - closed[idx])


def shape_curve(shape: str, phase, amplitude: float = 1.0) -> np.ndarray:
    """Position on the unit-period curve at ``phase`` (fraction of a period)."""
    phase = np.mod(np.atleast_1d(np.asarray(phase, dtype=float)), 1.0)
    if shape == "circle":
        angle = 2 * np.pi * phase
        return amplitude * np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    if shape == "square":
        corners = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
        return amplitude * _polygon(corners, phase)
    if shape == "triangle":
        angles = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
        return amplitude * _polygon(np.stack([np.cos(angles), np.sin(angles)], axis=-1), phase)
    raise ValueError(f"unknown shape {shape!r}")


def generate_targets(spec: TargetSpec) -> np.ndarray:
    """(length, 2) array tracing the shape once per period at constant speed.

    Samples sit at integer phases t/period, so the sequence is exactly periodic.
    """
    t = np.arange(spec.length)
    one_period = shape_curve(spec.shape, np.arange(spec.period) / spec.period, spec.amplitude)
    return one_period[t % spec.period]
