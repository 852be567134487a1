"""Clock-offset estimation and alignment of multi-rate streams onto a master grid."""

import logging
import math
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DataError, InputError, InsufficientDataError, NoOverlapError, ParameterError
from .streams import Stream

logger = logging.getLogger(__name__)

# relative to the source period; equidistant grid points go to the earlier sample
TIE_TOLERANCE = 1e-9

# channels holding identifiers rather than measurements
CATEGORICAL_STREAMS = frozenset({"video_frame", "gaze_target"})


class AlignPolicy(str, Enum):
    NEAREST = "NearestSample"
    LINEAR = "LinearInterp"


def default_policy(name: str) -> AlignPolicy:
    return AlignPolicy.NEAREST if name in CATEGORICAL_STREAMS else AlignPolicy.LINEAR


@dataclass(frozen=True)
class OffsetEstimate:
    offset: float
    residual_rms: float
    n_pairs: int = 0


def estimate_offset(pairs: Sequence[tuple[float, float]]) -> OffsetEstimate:
    """Least-squares constant shift with master_t ≈ local_t + offset."""
    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if len(arr) < 2:
        raise InsufficientDataError(f"offset estimation needs at least 2 (local, master) pairs, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise DataError("offset estimation pairs contain non-finite timestamps")
    diff = arr[:, 1] - arr[:, 0]
    offset = float(diff.mean())
    residual = float(np.sqrt(np.mean((diff - offset) ** 2)))
    logger.debug(f"Clock offset {offset:.6f} s from {len(arr)} pairs (rms {residual:.2e} s)")
    return OffsetEstimate(offset, residual, len(arr))


@dataclass(frozen=True, eq=False)
class AlignedBundle:
    """Streams resampled onto one uniform master grid.

    `max_alignment_error` is the largest distance between a grid time and the
    source sample it took its value from (NearestSample) or the nearer of the
    two it interpolated between (LinearInterp).
    """

    master_times: np.ndarray
    values: dict[str, np.ndarray]
    max_alignment_error: dict[str, float]
    policies: dict[str, AlignPolicy] = field(default_factory=dict)
    master_rate: float = 0.0

    def __len__(self) -> int:
        return len(self.master_times)

    def columns(self) -> list[str]:
        cols = ["t"]
        for name, vals in self.values.items():
            cols += [f"{name}__c{k}" for k in range(vals.shape[1])]
        return cols

    def to_csv(self, header_lines: list[str] | None = None) -> str:
        """Wide format, one column per `<stream>__c<k>` channel."""
        lines = list(header_lines or [])
        lines.append(",".join(self.columns()))
        blocks = [self.master_times.reshape(-1, 1), *self.values.values()]
        table = np.hstack(blocks) if blocks else np.empty((0, 1))
        for row in table:
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def master_grid(streams: Mapping[str, Stream], master_rate: float) -> np.ndarray:
    """Uniform grid at master_rate over the intersection of the streams' master-clock ranges."""
    if not master_rate > 0 or not math.isfinite(master_rate):
        raise ParameterError(f"master rate must be a positive number, got {master_rate}")
    if not streams:
        raise InputError("align needs at least one stream")
    for name, stream in streams.items():
        if len(stream) == 0:
            raise InputError(f"stream {name} is empty")
    lo = max(float(s.master_times[0]) for s in streams.values())
    hi = min(float(s.master_times[-1]) for s in streams.values())
    if lo > hi:
        raise NoOverlapError(f"streams {sorted(streams)} share no time range (latest start {lo}, earliest end {hi})")
    n = int(math.floor((hi - lo) * master_rate + 1e-9)) + 1
    grid = lo + np.arange(n) / master_rate
    grid[-1] = min(grid[-1], hi)
    return grid


def _nearest(src: np.ndarray, grid: np.ndarray, period: float) -> np.ndarray:
    right = np.clip(np.searchsorted(src, grid, side="left"), 0, len(src) - 1)
    left = np.clip(right - 1, 0, len(src) - 1)
    d_left = np.abs(grid - src[left])
    d_right = np.abs(src[right] - grid)
    return np.where(d_left <= d_right + TIE_TOLERANCE * period, left, right)


def align_stream(stream: Stream, grid: np.ndarray, policy: AlignPolicy) -> tuple[np.ndarray, float]:
    """Values of one stream on the grid and the largest alignment error."""
    src = stream.master_times
    if policy is AlignPolicy.NEAREST:
        idx = _nearest(src, grid, stream.nominal_period)
        values = stream.values[idx]
        err = np.abs(grid - src[idx])
    else:
        values = np.column_stack([np.interp(grid, src, stream.values[:, c]) for c in range(stream.dim)])
        idx = _nearest(src, grid, stream.nominal_period)
        err = np.abs(grid - src[idx])
    max_err = float(err.max()) if len(err) else 0.0
    return values.reshape(len(grid), stream.dim), max_err


def align(
    streams: Mapping[str, Stream],
    master_rate: float,
    policy: AlignPolicy | None = None,
    policies: Mapping[str, AlignPolicy] | None = None,
) -> AlignedBundle:
    """Resample streams (after their clock offsets) onto a master grid.

    `policy` applies to every stream; without it each stream uses its default
    (NearestSample for categorical streams, LinearInterp otherwise). Entries in
    `policies` override both. Nothing is extrapolated past a stream's range.
    """
    grid = master_grid(streams, master_rate)
    chosen: dict[str, AlignPolicy] = {}
    values: dict[str, np.ndarray] = {}
    errors: dict[str, float] = {}
    for name, stream in streams.items():
        pol = (policies or {}).get(name) or policy or default_policy(name)
        chosen[name] = AlignPolicy(pol)
        values[name], errors[name] = align_stream(stream, grid, chosen[name])
        bound = 0.5 * stream.nominal_period
        if chosen[name] is AlignPolicy.NEAREST and errors[name] > bound * (1 + 1e-6):
            logger.warning(
                f"stream {name}: alignment error {errors[name]:.4f} s exceeds half its nominal period {bound:.4f} s"
            )
    logger.debug(f"Aligned {len(streams)} streams onto {len(grid)} samples at {master_rate:g} Hz")
    return AlignedBundle(grid, values, errors, chosen, master_rate)


def align_many(
    bundles: Sequence[Mapping[str, Stream]],
    master_rate: float,
    policy: AlignPolicy | None = None,
    workers: int = 1,
) -> list[AlignedBundle]:
    """Align independent trials; output order follows input order."""
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: align(s, master_rate, policy), bundles))
