"""Minimum-jerk point-to-point reference trajectories (rest-to-rest quintic)."""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError, ParameterError
from .streams import Trajectory

logger = logging.getLogger(__name__)

# grid round-off allowed at the segment ends
TIME_SLACK = 1e-12


class MinJerkState(NamedTuple):
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray


@dataclass(frozen=True, eq=False)
class MinJerkSegment:
    x0: np.ndarray
    x1: np.ndarray
    T: float

    def __post_init__(self):
        if not self.T > 0:
            raise ParameterError(f"segment duration must be > 0, got {self.T}")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x1", np.asarray(self.x1, dtype=float))

    @property
    def delta(self) -> np.ndarray:
        return self.x1 - self.x0


def profile(tau):
    """s(τ) = 10τ³ − 15τ⁴ + 6τ⁵ and its first three τ-derivatives."""
    tau = np.asarray(tau, dtype=float)
    t2 = tau * tau
    t3 = t2 * tau
    s = t3 * (10.0 - 15.0 * tau + 6.0 * t2)
    ds = 30.0 * t2 * (1.0 - 2.0 * tau + t2)
    dds = 60.0 * tau - 180.0 * t2 + 120.0 * t3
    ddds = 60.0 - 360.0 * tau + 360.0 * t2
    return s, ds, dds, ddds


def _check_times(seg: MinJerkSegment, t: np.ndarray) -> np.ndarray:
    if np.any(~np.isfinite(t)) or np.any(t < -TIME_SLACK) or np.any(t > seg.T + TIME_SLACK):
        raise DomainError(f"time outside [0, {seg.T}]")
    return np.clip(t, 0.0, seg.T)


def evaluate(seg: MinJerkSegment, t: float) -> MinJerkState:
    """Position, velocity and acceleration at time t in [0, T]."""
    states = evaluate_many(seg, np.array([t], dtype=float))
    return MinJerkState(states.position[0], states.velocity[0], states.acceleration[0])


def evaluate_many(seg: MinJerkSegment, times: np.ndarray) -> MinJerkState:
    times = _check_times(seg, np.asarray(times, dtype=float))
    s, ds, dds, _ = profile(times / seg.T)
    delta = seg.delta
    return MinJerkState(
        position=seg.x0 + np.outer(s, delta),
        velocity=np.outer(ds / seg.T, delta),
        acceleration=np.outer(dds / seg.T**2, delta),
    )


def jerk_many(seg: MinJerkSegment, times: np.ndarray) -> np.ndarray:
    times = _check_times(seg, np.asarray(times, dtype=float))
    _, _, _, ddds = profile(times / seg.T)
    return np.outer(ddds / seg.T**3, seg.delta)


def sample(seg: MinJerkSegment, rate: float) -> Trajectory:
    """Uniform grid over [0, T] that includes both endpoints."""
    if not rate > 0:
        raise ParameterError(f"sampling rate must be > 0, got {rate}")
    n = max(2, int(round(seg.T * rate)) + 1)
    tau = np.linspace(0.0, 1.0, n)
    s, _, _, _ = profile(tau)
    positions = seg.x0 + np.outer(s, seg.delta)
    positions[-1] = seg.x1
    return Trajectory(tau * seg.T, positions, meta={"source": "minjerk", "T": seg.T})


def reach_positions(
    x0: np.ndarray, x1: np.ndarray, onset: float, duration: float, times: np.ndarray
) -> np.ndarray:
    """Rest at x0 until onset, quintic reach, then hold at x1."""
    seg = MinJerkSegment(x0, x1, duration)
    local = np.clip(np.asarray(times, dtype=float) - onset, 0.0, duration)
    s, _, _, _ = profile(local / duration)
    return seg.x0 + np.outer(s, seg.delta)
