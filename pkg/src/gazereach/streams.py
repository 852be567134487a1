"""Timestamped sensor streams and 3D trajectories."""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ParameterError, ShapeError, TrialValidationError

logger = logging.getLogger(__name__)

RATE_TOLERANCE = 0.2


class TimedSample(NamedTuple):
    t: float
    value: np.ndarray


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Stream:
    """One sensor channel group sampled at a nominal rate.

    `times` are seconds relative to trial start in the stream's own clock;
    adding `clock_offset` maps them to the master clock.
    """

    name: str
    nominal_rate: float
    dim: int
    times: np.ndarray
    values: np.ndarray
    clock_offset: float = 0.0

    def __post_init__(self):
        if self.nominal_rate <= 0:
            raise ParameterError(f"stream {self.name}: nominal rate must be > 0, got {self.nominal_rate}")
        times = _frozen(self.times).reshape(-1)
        values = _frozen(self.values)
        if values.ndim == 1:
            values = _frozen(values.reshape(-1, 1) if self.dim == 1 else values.reshape(-1, self.dim))
        if values.shape != (len(times), self.dim):
            raise ShapeError(
                f"stream {self.name}: values shape {values.shape} does not match ({len(times)}, {self.dim})"
            )
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def samples(self) -> list[TimedSample]:
        return [TimedSample(float(t), v) for t, v in zip(self.times, self.values)]

    @property
    def master_times(self) -> np.ndarray:
        return self.times + self.clock_offset

    @property
    def nominal_period(self) -> float:
        return 1.0 / self.nominal_rate

    def check_monotonic(self) -> None:
        """Raise TrialValidationError at the first non-increasing timestamp."""
        if len(self.times) < 2:
            return
        bad = np.nonzero(np.diff(self.times) <= 0)[0]
        if len(bad):
            row = int(bad[0]) + 1
            raise TrialValidationError(
                f"stream {self.name}: timestamp at row {row} ({self.times[row]!r}) "
                f"does not increase on {self.times[row - 1]!r}",
                stream=self.name,
                row=row,
            )

    def estimated_rate(self) -> float | None:
        """Rate from the median inter-sample interval, None with fewer than 2 samples."""
        if len(self.times) < 2:
            return None
        median = float(np.median(np.diff(self.times)))
        return 1.0 / median if median > 0 else None

    def rate_matches(self, tolerance: float = RATE_TOLERANCE) -> bool:
        rate = self.estimated_rate()
        if rate is None:
            return True
        return abs(1.0 / rate - self.nominal_period) <= tolerance * self.nominal_period

    def window(self, start: float, end: float) -> "Stream":
        """Samples with start <= t <= end (stream clock)."""
        mask = (self.times >= start) & (self.times <= end)
        return Stream(self.name, self.nominal_rate, self.dim, self.times[mask], self.values[mask], self.clock_offset)

    def with_offset(self, offset: float) -> "Stream":
        return Stream(self.name, self.nominal_rate, self.dim, self.times, self.values, offset)

    def equals(self, other: "Stream") -> bool:
        return (
            self.name == other.name
            and self.nominal_rate == other.nominal_rate
            and self.dim == other.dim
            and self.clock_offset == other.clock_offset
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-stamped 3D hand positions, optionally with a per-axis variance envelope."""

    times: np.ndarray
    positions: np.ndarray
    variance: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = _frozen(self.times).reshape(-1)
        positions = _frozen(self.positions)
        if positions.ndim != 2 or positions.shape[0] != len(times):
            raise ShapeError(f"trajectory positions shape {positions.shape} does not match {len(times)} times")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)
        if self.variance is not None:
            variance = _frozen(self.variance)
            if variance.shape != positions.shape:
                raise ShapeError(f"variance shape {variance.shape} does not match positions {positions.shape}")
            object.__setattr__(self, "variance", variance)

    def __len__(self) -> int:
        return len(self.times)

    def prefix(self, cut: float) -> "Trajectory":
        mask = self.times <= cut
        variance = self.variance[mask] if self.variance is not None else None
        return Trajectory(self.times[mask], self.positions[mask], variance, dict(self.meta))

    def to_stream(self, name: str = "hand_pos", rate: float | None = None) -> Stream:
        if rate is None:
            rate = 1.0 / float(np.median(np.diff(self.times))) if len(self.times) > 1 else 1.0
        return Stream(name, rate, self.positions.shape[1], self.times, self.positions)

    @classmethod
    def from_stream(cls, stream: Stream) -> "Trajectory":
        return cls(stream.times, stream.values)

    def to_csv(self, header_lines: list[str] | None = None) -> str:
        """`t,x,y,z[,var_x,var_y,var_z]` rows, full float precision."""
        axes = ["x", "y", "z"][: self.positions.shape[1]]
        columns = ["t", *axes]
        if self.variance is not None:
            columns += [f"var_{a}" for a in axes]
        lines = list(header_lines or [])
        lines.append(",".join(columns))
        for i, t in enumerate(self.times):
            row = [t, *self.positions[i]]
            if self.variance is not None:
                row += list(self.variance[i])
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"
