"""Two-way ANOVA with Type II sums of squares for unbalanced designs."""

import logging
import math
from collections.abc import Hashable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DegenerateDesignError, DesignError, InputError

logger = logging.getLogger(__name__)

SS_TYPE = "II"


@dataclass(frozen=True)
class AnovaRow:
    source: str
    ss: float
    df: int
    ms: float
    F: float | None = None
    p: float | None = None

    def to_dict(self) -> dict:
        return {"source": self.source, "ss": self.ss, "df": self.df, "ms": self.ms, "F": self.F, "p": self.p}


@dataclass
class AnovaTable:
    factor_a: str
    factor_b: str
    rows: dict[str, AnovaRow]
    levels_a: list[str] = field(default_factory=list)
    levels_b: list[str] = field(default_factory=list)
    cell_counts: dict[str, int] = field(default_factory=dict)
    ss_type: str = SS_TYPE

    @property
    def F_A(self) -> float:
        return self.rows[self.factor_a].F

    @property
    def F_B(self) -> float:
        return self.rows[self.factor_b].F

    @property
    def F_interaction(self) -> float:
        return self.rows["interaction"].F

    @property
    def dof(self) -> dict[str, tuple[int, int]]:
        """(effect df, residual df) per tested effect."""
        res = self.rows["residual"].df
        return {name: (row.df, res) for name, row in self.rows.items() if row.F is not None}

    @property
    def p_values(self) -> dict[str, float]:
        return {name: row.p for name, row in self.rows.items() if row.p is not None}

    def to_dict(self) -> dict:
        return {
            "ss_type": self.ss_type,
            "factors": [self.factor_a, self.factor_b],
            "levels": {self.factor_a: self.levels_a, self.factor_b: self.levels_b},
            "cell_counts": self.cell_counts,
            "rows": [row.to_dict() for row in self.rows.values()],
        }


def _rss(y: np.ndarray, groups: np.ndarray) -> float:
    """Residual SS around group means."""
    total = 0.0
    for g in np.unique(groups):
        members = y[groups == g]
        total += float(np.sum((members - members.mean()) ** 2))
    return total


def _rss_additive(y: np.ndarray, a: np.ndarray, b: np.ndarray, n_a: int, n_b: int) -> float:
    design = np.zeros((len(y), 1 + (n_a - 1) + (n_b - 1)))
    design[:, 0] = 1.0
    for i in range(1, n_a):
        design[a == i, i] = 1.0
    for j in range(1, n_b):
        design[b == j, n_a - 1 + j] = 1.0
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(np.sum((y - design @ coef) ** 2))


def _f_test(ss: float, df: int, ss_res: float, df_res: int, tol: float) -> tuple[float, float]:
    if ss <= tol:
        return 0.0, 1.0
    if ss_res <= tol:
        return math.inf, 0.0
    f_value = (ss / df) / (ss_res / df_res)
    return float(f_value), float(stats.f.sf(f_value, df, df_res))


def anova_two_way(
    responses: Sequence[tuple[Hashable, Hashable, float]],
    factor_a: str = "A",
    factor_b: str = "B",
) -> AnovaTable:
    """Two-way ANOVA with interaction over (level_a, level_b, response) rows.

    Main effects are Type II: each is tested after the other main effect.
    A zero effect SS gives F = 0, p = 1; a zero residual with a non-zero effect
    gives F = inf, p = 0.
    """
    if not responses:
        raise InputError("anova needs at least one response")
    a_raw = [r[0] for r in responses]
    b_raw = [r[1] for r in responses]
    y = np.asarray([float(r[2]) for r in responses])
    if not np.all(np.isfinite(y)):
        raise InputError("responses must be finite")
    levels_a = sorted(set(a_raw), key=str)
    levels_b = sorted(set(b_raw), key=str)
    for name, levels in ((factor_a, levels_a), (factor_b, levels_b)):
        if len(levels) < 2:
            raise DegenerateDesignError(f"factor {name} has a single level {levels}")
    a = np.array([levels_a.index(v) for v in a_raw])
    b = np.array([levels_b.index(v) for v in b_raw])

    cell_counts = {}
    for i, la in enumerate(levels_a):
        for j, lb in enumerate(levels_b):
            count = int(np.sum((a == i) & (b == j)))
            if count == 0:
                raise DesignError(f"empty cell ({factor_a}={la}, {factor_b}={lb})")
            cell_counts[f"{la}|{lb}"] = count

    n, n_a, n_b = len(y), len(levels_a), len(levels_b)
    df_a, df_b = n_a - 1, n_b - 1
    df_ab = df_a * df_b
    df_res = n - n_a * n_b
    if df_res < 1:
        raise DesignError("no residual degrees of freedom: every cell needs at least two responses somewhere")

    yc = y - y.mean()
    ss_total = float(np.sum(yc**2))
    rss_a = _rss(yc, a)
    rss_b = _rss(yc, b)
    rss_full = _rss(yc, a * n_b + b)
    rss_add = _rss_additive(yc, a, b, n_a, n_b)

    ss_a = max(rss_b - rss_add, 0.0)
    ss_b = max(rss_a - rss_add, 0.0)
    ss_ab = max(rss_add - rss_full, 0.0)
    ss_res = rss_full
    # round-off scale of the sums of squares
    tol = 1e-9 * ss_total + n * (16.0 * np.finfo(float).eps * float(np.max(np.abs(y)))) ** 2

    rows = {}
    for name, ss, df in ((factor_a, ss_a, df_a), (factor_b, ss_b, df_b), ("interaction", ss_ab, df_ab)):
        f_value, p = _f_test(ss, df, ss_res, df_res, tol)
        rows[name] = AnovaRow(name, ss, df, ss / df, f_value, p)
    rows["residual"] = AnovaRow("residual", ss_res, df_res, ss_res / df_res)
    rows["total"] = AnovaRow("total", ss_total, n - 1, ss_total / (n - 1))
    logger.debug(f"ANOVA {factor_a} x {factor_b}: F = {[r.F for r in rows.values() if r.F is not None]}")
    return AnovaTable(
        factor_a,
        factor_b,
        rows,
        [str(v) for v in levels_a],
        [str(v) for v in levels_b],
        cell_counts,
    )
