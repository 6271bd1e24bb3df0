"""Attractor occupancy, transition statistics and prior landscapes."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .prior import GmmPrior, gmm_log_density

NEUTRAL = -1


@dataclass
class Visit:
    label: int
    start: int  # index of first step
    end: int  # index one past the last step


@dataclass
class AttractorLabeling:
    """Per-step labels (``NEUTRAL`` = -1) and the visits they form."""

    labels: np.ndarray
    visits: list[Visit]
    theta: float
    dwell: int
    p: int
    t: np.ndarray | None = None

    @property
    def visit_sequence(self) -> list[int]:
        return [v.label for v in self.visits]


def _runs(values: np.ndarray):
    """(value, start, end) for maximal runs of equal values."""
    if len(values) == 0:
        return []
    edges = np.flatnonzero(np.diff(values)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [len(values)]])
    return [(int(values[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def classify_attractors(causes, theta: float = 0.5, dwell: int = 30, p: int | None = None, t=None) -> AttractorLabeling:
    """Label each step with the single cause above ``theta``, if any.

    A label only stands if it holds for at least ``dwell`` consecutive
    steps; shorter runs become neutral. Two visits of the same attractor
    separated by fewer than ``dwell`` steps are merged into one, so brief
    excursions are not read as leaving and re-entering.
    """
    causes = np.asarray(causes, dtype=float)
    if causes.ndim != 2:
        raise ValueError("causes must be a (steps, p) array")
    if p is not None and causes.shape[1] != p:
        raise ValueError(f"causes have {causes.shape[1]} columns, expected p={p}")
    if dwell < 1:
        raise ValueError("dwell must be >= 1")
    above = causes > theta
    raw = np.where(above.sum(axis=1) == 1, np.argmax(above, axis=1), NEUTRAL)
    visits: list[Visit] = []
    for label, start, end in _runs(raw):
        if label == NEUTRAL or end - start < dwell:
            continue
        if visits and visits[-1].label == label and start - visits[-1].end < dwell:
            visits[-1].end = end
        else:
            visits.append(Visit(label, start, end))
    labels = np.full(len(raw), NEUTRAL, dtype=np.int64)
    for v in visits:
        labels[v.start : v.end] = v.label
    return AttractorLabeling(labels, visits, theta, dwell, causes.shape[1], None if t is None else np.asarray(t))


def extract_transitions(labeling: AttractorLabeling, count_self: bool = True) -> list[tuple[int, int, int]]:
    """(from, to, step) for each pair of consecutive visits.

    ``step`` is the time (or index) at which the second visit starts.
    Re-entries of the same attractor only appear when the neutral gap was
    at least ``dwell`` long; ``count_self=False`` drops them.
    """
    pairs = []
    times = labeling.t
    for a, b in zip(labeling.visits, labeling.visits[1:]):
        if a.label == b.label and not count_self:
            continue
        step = int(times[b.start]) if times is not None else b.start
        pairs.append((a.label, b.label, step))
    return pairs


@dataclass
class TransitionMatrix:
    counts: np.ndarray
    probabilities: np.ndarray  # rows without outgoing transitions are NaN
    n_transitions: int

    @property
    def unpopulated_rows(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.counts.sum(axis=1) == 0)]

    def to_dict(self, **extra) -> dict:
        probs = [None if np.isnan(row).any() else row.tolist() for row in self.probabilities]
        return {
            "counts": self.counts.tolist(),
            "probabilities": probs,
            "n_transitions": self.n_transitions,
            "unpopulated_rows": self.unpopulated_rows,
            **extra,
        }

    def write_json(self, path, **extra) -> None:
        with open(path, "w", newline="\n") as fh:
            json.dump(self.to_dict(**extra), fh, indent=2)
            fh.write("\n")


def estimate_transition_matrix(pairs, p: int) -> TransitionMatrix:
    counts = np.zeros((p, p), dtype=np.int64)
    for pair in pairs:
        counts[pair[0], pair[1]] += 1
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(totals > 0, counts / totals, np.nan)
    return TransitionMatrix(counts, probs, int(counts.sum()))


def row_independence_score(tm: TransitionMatrix) -> float:
    """Largest total-variation distance between two rows; 0 means the next
    state does not depend on the current one."""
    if tm.unpopulated_rows:
        raise ValueError(f"rows {tm.unpopulated_rows} have no outgoing transitions")
    P = tm.probabilities
    diffs = 0.5 * np.abs(P[:, None, :] - P[None, :, :]).sum(axis=-1)
    return float(diffs.max())


@dataclass
class AnalysisConfig:
    theta: float = 0.5
    dwell: int = 30
    count_self: bool = True

    def __post_init__(self):
        if self.dwell < 1:
            raise ValueError("dwell must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "AnalysisConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown analysis config keys: {sorted(unknown)}")
        return cls(**doc)


def pooled_transitions(traces, cfg: AnalysisConfig, p: int, times=None):
    """Label each cause trace separately and pool their transitions.

    No transition is formed across the boundary between two traces.
    Returns (labelings, pairs, matrix).
    """
    labelings, pairs = [], []
    for i, causes in enumerate(traces):
        lab = classify_attractors(causes, cfg.theta, cfg.dwell, p=p, t=None if times is None else times[i])
        labelings.append(lab)
        pairs.extend(extract_transitions(lab, cfg.count_self))
    return labelings, pairs, estimate_transition_matrix(pairs, p)


@dataclass
class Landscape:
    axis0: np.ndarray
    axis1: np.ndarray
    density: np.ndarray  # (len(axis0), len(axis1))

    def write_csv(self, path) -> None:
        g0, g1 = np.meshgrid(self.axis0, self.axis1, indexing="ij")
        with open(path, "w", newline="\n") as fh:
            fh.write("c0,c1,density\n")
            np.savetxt(fh, np.column_stack([g0.ravel(), g1.ravel(), self.density.ravel()]), fmt="%.17g", delimiter=",")

    def local_maxima(self) -> np.ndarray:
        """Grid points not exceeded by any of their 8 neighbours, as (k, 2) coordinates."""
        d = self.density
        padded = np.pad(d, 1, constant_values=-np.inf)
        is_max = np.ones_like(d, dtype=bool)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di or dj:
                    shifted = padded[1 + di : 1 + di + d.shape[0], 1 + dj : 1 + dj + d.shape[1]]
                    is_max &= d >= shifted
        idx = np.argwhere(is_max)
        return np.column_stack([self.axis0[idx[:, 0]], self.axis1[idx[:, 1]]])


def gmm_landscape(
    prior: GmmPrior,
    sigma_c: float,
    bounds=(-0.5, 1.5, -0.5, 1.5),
    resolution: int = 201,
    dims=(0, 1),
    anchor=None,
) -> Landscape:
    """Mixture density on a regular grid over two coordinates.

    For p > 2 the grid is a slice through ``anchor`` (default the origin)
    varying coordinates ``dims``.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    lo0, hi0, lo1, hi1 = bounds
    if not (lo0 < hi0 and lo1 < hi1):
        raise ValueError(f"empty bounds {bounds}")
    if prior.dim < 2:
        raise ValueError("a landscape needs at least two cause dimensions")
    a0 = np.linspace(lo0, hi0, resolution)
    a1 = np.linspace(lo1, hi1, resolution)
    base = np.zeros(prior.dim) if anchor is None else np.asarray(anchor, dtype=float)
    pts = np.broadcast_to(base, (resolution, resolution, prior.dim)).copy()
    pts[..., dims[0]] = a0[:, None]
    pts[..., dims[1]] = a1[None, :]
    return Landscape(a0, a1, np.exp(gmm_log_density(pts, prior, sigma_c)))
