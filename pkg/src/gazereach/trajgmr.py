"""Gaussian mixture regression: mean trajectory and covariance envelope conditioned on time."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import IncompatibleModelError, InputError, ParameterError, UnsupportedConditioningError
from .streams import Trajectory
from .trajgmm import LOG_2PI, ActionModel, FitMeta, GmmModel

logger = logging.getLogger(__name__)

# floor on the time variance of a component
TIME_VAR_FLOOR = 1e-12
COVARIANCE_FORM = "moment-matched"


@dataclass(frozen=True, eq=False)
class GmrQuery:
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        if not np.all(np.isfinite(times)):
            raise InputError("query times must be finite")
        if len(times) > 1 and np.any(np.diff(times) < 0):
            raise InputError("query times must be non-decreasing")
        object.__setattr__(self, "times", times)


@dataclass(frozen=True, eq=False)
class GmrOutput:
    times: np.ndarray
    mean: np.ndarray  # (n, O)
    covariance: np.ndarray  # (n, O, O)
    responsibilities: np.ndarray  # (n, K)
    meta: dict = field(default_factory=lambda: {"covariance": COVARIANCE_FORM})

    @property
    def variance(self) -> np.ndarray:
        return np.diagonal(self.covariance, axis1=1, axis2=2)

    def to_csv(self, header_lines: list[str] | None = None, names: Sequence[str] | None = None) -> str:
        """`t, mean_*, var_*` rows; raw variance, no banding."""
        names = list(names or [f"y{i}" for i in range(self.mean.shape[1])])
        lines = list(header_lines or [])
        lines.append(",".join(["t", *(f"mean_{n}" for n in names), *(f"var_{n}" for n in names)]))
        variance = self.variance
        for i, t in enumerate(self.times):
            row = [t, *self.mean[i], *variance[i]]
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def regress(model: GmmModel, q: GmrQuery | Sequence[float] | np.ndarray) -> GmrOutput:
    """Condition the joint mixture on time.

    Per component the conditional is linear in t; responsibilities come from
    the time marginals in log space, and the mixture covariance is the full
    law-of-total-variance form.
    """
    if model.input_dims != (0,):
        raise UnsupportedConditioningError(f"regression conditions on time only, model inputs are {model.input_dims}")
    if not isinstance(q, GmrQuery):
        q = GmrQuery(np.asarray(q, dtype=float))
    t = q.times
    out = list(model.output_dims)
    k_count = model.n_components

    cond_means = np.empty((k_count, len(t), len(out)))
    cond_covs = np.empty((k_count, len(out), len(out)))
    log_h = np.empty((len(t), k_count))
    with np.errstate(divide="ignore"):
        log_priors = np.log(model.priors)
    for k in range(k_count):
        mu, sigma = model.means[k], model.covariances[k]
        s_tt = max(float(sigma[0, 0]), TIME_VAR_FLOOR)
        s_xt = sigma[out, 0]
        cond_means[k] = mu[out] + np.outer(t - mu[0], s_xt / s_tt)
        cond_covs[k] = sigma[np.ix_(out, out)] - np.outer(s_xt, s_xt) / s_tt
        log_h[:, k] = log_priors[k] - 0.5 * (LOG_2PI + np.log(s_tt) + (t - mu[0]) ** 2 / s_tt)

    h = np.exp(log_h - logsumexp(log_h, axis=1, keepdims=True))
    mean = np.einsum("nk,kno->no", h, cond_means)
    centered = cond_means - mean[None, :, :]
    covariance = np.einsum("nk,kab->nab", h, cond_covs) + np.einsum("nk,kna,knb->nab", h, centered, centered)
    covariance = 0.5 * (covariance + np.transpose(covariance, (0, 2, 1)))
    return GmrOutput(t, mean, covariance, h)


def check_time_normalization(metas: Sequence[FitMeta]) -> FitMeta:
    first = metas[0]
    for meta in metas[1:]:
        if meta.normalize_time != first.normalize_time or not np.isclose(meta.time_scale, first.time_scale):
            raise IncompatibleModelError(
                f"models disagree on time normalization: "
                f"({first.normalize_time}, {first.time_scale}) vs ({meta.normalize_time}, {meta.time_scale})"
            )
    return first


def _as_models(models: ActionModel | Sequence[GmmModel]) -> tuple[GmmModel, ...]:
    models = models.models if isinstance(models, ActionModel) else tuple(models)
    if len(models) not in (1, 3):
        raise IncompatibleModelError(f"expected 3 per-axis models or 1 joint model, got {len(models)}")
    if len(models) == 1 and len(models[0].output_dims) != 3:
        raise IncompatibleModelError(f"joint model must predict 3 axes, predicts {len(models[0].output_dims)}")
    return models


def predict(models: ActionModel | Sequence[GmmModel], seconds) -> tuple[np.ndarray, np.ndarray]:
    """3D mean (n, 3) and covariance (n, 3, 3) at times in seconds since arm onset."""
    models = _as_models(models)
    meta = check_time_normalization([m.fit_meta for m in models])
    q = GmrQuery(meta.to_model_time(seconds))
    if len(models) == 1:
        result = regress(models[0], q)
        return result.mean, result.covariance
    results = [regress(m, q) for m in models]
    mean = np.column_stack([r.mean[:, 0] for r in results])
    covariance = np.zeros((len(q.times), 3, 3))
    for axis, r in enumerate(results):
        covariance[:, axis, axis] = r.covariance[:, 0, 0]
    return mean, covariance


def reconstruct_action(models: ActionModel | Sequence[GmmModel], n_points: int = 100) -> Trajectory:
    """Mean reach on a uniform grid over the modeled duration, with a per-axis variance envelope."""
    if n_points < 2:
        raise ParameterError(f"n_points must be >= 2, got {n_points}")
    models = _as_models(models)
    meta = check_time_normalization([m.fit_meta for m in models])
    seconds = np.linspace(0.0, meta.time_scale, n_points)
    mean, covariance = predict(models, seconds)
    variance = np.diagonal(covariance, axis1=1, axis2=2)
    return Trajectory(
        seconds,
        mean,
        variance,
        meta={"source": "gmr", "covariance": COVARIANCE_FORM, "time_scale": meta.time_scale},
    )
