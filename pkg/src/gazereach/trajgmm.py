"""Time-indexed Gaussian mixture models of demonstrated reaches, fitted by EM."""

import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .config import EmConfig
from .dataset import Dataset, TrialRecord, reach_window
from .errors import (
    CoverageError,
    DataError,
    InsufficientDataError,
    NumericalError,
    SchemaError,
    ShapeError,
    StorageError,
)
from .scene import ALL_LABELS, LABEL_INDEX, ActionLabel

logger = logging.getLogger(__name__)

MODEL_VERSION = "gmm-v1"
BUNDLE_FORMAT = "gmm-v1-bundle"
AXES = ("x", "y", "z")
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class GmmComponent:
    prior: float
    mean: np.ndarray
    covariance: np.ndarray


@dataclass
class FitMeta:
    iterations: int = 0
    loglik: float = float("nan")
    converged: bool = False
    seed: int | None = None
    normalize_time: bool = True
    time_scale: float = 1.0
    reg: list[float] = field(default_factory=list)
    n_rows: int = 0
    n_trials: int = 0
    objective_history: list[float] = field(default_factory=list)
    loglik_history: list[float] = field(default_factory=list)

    def to_model_time(self, seconds):
        """Seconds since arm onset to the model's time axis."""
        seconds = np.asarray(seconds, dtype=float)
        return seconds / self.time_scale if self.normalize_time else seconds


@dataclass(frozen=True, eq=False)
class GmmModel:
    """K-component joint mixture over (time, outputs...).

    Arrays are stacked: priors (K,), means (K, D), covariances (K, D, D).
    """

    priors: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    input_dims: tuple[int, ...] = (0,)
    output_dims: tuple[int, ...] = (1,)
    fit_meta: FitMeta = field(default_factory=FitMeta)

    def __post_init__(self):
        priors = np.asarray(self.priors, dtype=float).reshape(-1)
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covariances, dtype=float)
        k = len(priors)
        if k < 1 or means.ndim != 2 or means.shape[0] != k or covs.shape != (k, means.shape[1], means.shape[1]):
            raise ShapeError(f"inconsistent mixture shapes: priors {priors.shape}, means {means.shape}, covs {covs.shape}")
        dims = sorted(self.input_dims + self.output_dims)
        if dims != list(range(means.shape[1])):
            raise ShapeError(
                f"input_dims {self.input_dims} and output_dims {self.output_dims} must partition {means.shape[1]} dims"
            )
        if abs(priors.sum() - 1.0) > 1e-9 or np.any(priors < 0):
            raise NumericalError(f"mixture priors must be >= 0 and sum to 1, got sum {priors.sum()!r}")
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "input_dims", tuple(self.input_dims))
        object.__setattr__(self, "output_dims", tuple(self.output_dims))

    @property
    def n_components(self) -> int:
        return len(self.priors)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[GmmComponent]:
        return [GmmComponent(float(p), m, c) for p, m, c in zip(self.priors, self.means, self.covariances)]

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "K": self.n_components,
            "dim": self.dim,
            "input_dims": list(self.input_dims),
            "output_dims": list(self.output_dims),
            "priors": self.priors.tolist(),
            "means": self.means.tolist(),
            "covariances": [c.reshape(-1).tolist() for c in self.covariances],
            "fit_meta": asdict(self.fit_meta),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GmmModel":
        if data.get("version") != MODEL_VERSION:
            raise SchemaError(f"unsupported model version {data.get('version')!r}, expected {MODEL_VERSION!r}")
        try:
            k, d = int(data["K"]), int(data["dim"])
            covs = np.asarray(data["covariances"], dtype=float).reshape(k, d, d)
            return cls(
                priors=np.asarray(data["priors"], dtype=float),
                means=np.asarray(data["means"], dtype=float).reshape(k, d),
                covariances=covs,
                input_dims=tuple(data["input_dims"]),
                output_dims=tuple(data["output_dims"]),
                fit_meta=FitMeta(**data.get("fit_meta", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed {MODEL_VERSION} model: {exc}") from exc


@dataclass(frozen=True, eq=False)
class TrainingMatrix:
    """Joint samples (t, outputs...) pooled from several trials; `source` is the trial id per row."""

    rows: np.ndarray
    source: np.ndarray | None = None
    time_scale: float = 1.0
    normalize_time: bool = True

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows.reshape(-1, 1)
        if not np.all(np.isfinite(rows)):
            raise DataError("training matrix contains non-finite values")
        object.__setattr__(self, "rows", rows)
        if self.source is not None:
            source = np.asarray(self.source, dtype=int)
            if source.shape != (len(rows),):
                raise ShapeError(f"source has {source.shape} entries for {len(rows)} rows")
            object.__setattr__(self, "source", source)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def n_trials(self) -> int:
        return 0 if self.source is None else len(np.unique(self.source))


# --- density ---


def component_logpdf(x: np.ndarray, means: np.ndarray, covariances: np.ndarray) -> np.ndarray:
    """(N, K) matrix of log N(x_j; μ_k, Σ_k), via Cholesky factors."""
    n, d = x.shape
    out = np.empty((n, len(means)))
    for k, (mu, sigma) in enumerate(zip(means, covariances)):
        try:
            chol = linalg.cholesky(sigma, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"component {k} covariance is not positive definite") from exc
        soln = linalg.solve_triangular(chol, (x - mu).T, lower=True)
        out[:, k] = -0.5 * d * LOG_2PI - np.sum(np.log(np.diag(chol))) - 0.5 * np.sum(soln**2, axis=0)
    return out


def _weighted_logpdf(x: np.ndarray, priors: np.ndarray, means: np.ndarray, covariances: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_priors = np.log(priors)
    return component_logpdf(x, means, covariances) + log_priors


def loglik(model: GmmModel, rows) -> float:
    """Σ_j log Σ_k π_k N(ξ_j; μ_k, Σ_k); 0 for no rows."""
    x = rows.rows if isinstance(rows, TrainingMatrix) else np.asarray(rows, dtype=float)
    if x.size == 0:
        return 0.0
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != model.dim:
        raise ShapeError(f"rows have {x.shape[1]} columns, model has {model.dim} dims")
    lp = _weighted_logpdf(x, model.priors, model.means, model.covariances)
    return float(np.sum(logsumexp(lp, axis=1)))


# --- EM ---


def regularization(x: np.ndarray, reg_scale: float) -> np.ndarray:
    """Per-dimension covariance floor: reg_scale times the data variance (1 for constant columns)."""
    var = x.var(axis=0)
    return reg_scale * np.where(var > 0, var, 1.0)


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically, first column most significant."""
    return x[np.lexsort(x.T[::-1])]


def kmeans_init(x: np.ndarray, k: int, rng: np.random.Generator, iters: int) -> np.ndarray:
    """k-means++ seeding plus Lloyd iterations on standardized data; returns hard labels."""
    std = x.std(axis=0)
    z = (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)
    n = len(z)
    centers = [z[int(rng.integers(n))]]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2) / total, rng.random(), side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers.append(z[idx])
        d2 = np.minimum(d2, np.sum((z - z[idx]) ** 2, axis=1))
    centers = np.array(centers)
    labels = np.zeros(n, dtype=int)
    for _ in range(iters):
        dist = np.sum((z[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dist, axis=1)
        for j in range(k):
            members = z[new_labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    dist = np.sum((z[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return np.argmin(dist, axis=1)


def kbins_init(x: np.ndarray, k: int) -> np.ndarray:
    """Equal-count bins along the first column of canonically ordered rows."""
    return (np.arange(len(x)) * k) // len(x)


def _m_step(x, resp, reg, prev_means, prev_covs):
    n = len(x)
    nk = resp.sum(axis=0)
    priors = nk / nk.sum()
    means = prev_means.copy()
    covs = prev_covs.copy()
    floor = n * np.diag(reg)
    for k in range(resp.shape[1]):
        if nk[k] < 1e10 * np.finfo(float).tiny:
            continue
        mu = resp[:, k] @ x / nk[k]
        diff = x - mu
        scatter = (resp[:, k][:, None] * diff).T @ diff
        sigma = (scatter + floor) / nk[k]
        means[k] = mu
        covs[k] = 0.5 * (sigma + sigma.T)
    return priors, means, covs


def _penalty(covs: np.ndarray, reg: np.ndarray, n: int) -> float:
    """Log of the covariance prior that the regularized M-step maximizes."""
    total = 0.0
    for sigma in covs:
        inv_diag = np.diag(linalg.cho_solve(linalg.cho_factor(sigma, lower=True), np.eye(len(reg))))
        total += float(np.dot(reg, inv_diag))
    return -0.5 * n * total


def fit(data: TrainingMatrix, K: int, config: EmConfig | None = None, seed: int = 0) -> GmmModel:
    """EM fit of a K-component mixture over all columns, column 0 being time.

    Initialization (time bins, or seeded k-means++) depends on the row set only,
    not its order. The recorded objective (log-likelihood plus the covariance-floor
    prior) never decreases.
    """
    config = config or EmConfig()
    if not isinstance(data, TrainingMatrix):
        data = TrainingMatrix(data)
    n, d = data.rows.shape
    if K < 1:
        raise InsufficientDataError(f"need at least one component, got K={K}")
    if n < K:
        raise InsufficientDataError(f"{n} rows cannot support K={K} components")
    x = canonical_order(data.rows)
    reg = regularization(x, config.reg_scale)

    if config.init == "kbins":
        labels = kbins_init(x, K)
    else:
        labels = kmeans_init(x, K, np.random.default_rng(seed), config.kmeans_iters)
    # soft one-hot keeps every component populated
    resp = np.full((n, K), 1e-3 / K)
    resp[np.arange(n), labels] += 1.0 - 1e-3

    means = np.zeros((K, d))
    covs = np.tile(np.diag(reg), (K, 1, 1))
    history: list[float] = []
    ll_history: list[float] = []
    ll = float("nan")
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        priors, means, covs = _m_step(x, resp, reg, means, covs)
        lp = _weighted_logpdf(x, priors, means, covs)
        log_norm = logsumexp(lp, axis=1)
        ll = float(np.sum(log_norm))
        ll_history.append(ll)
        history.append(ll + _penalty(covs, reg, n))
        if not np.isfinite(history[-1]):
            raise NumericalError(f"EM objective became non-finite at iteration {iterations}")
        if len(history) > 1 and history[-1] - history[-2] <= config.tol * abs(history[-2]):
            converged = True
            break
        resp = np.exp(lp - log_norm[:, None])
        logger.debug(f"EM iteration {iterations}: objective {history[-1]:.6f}")

    if not converged:
        logger.warning(f"EM did not converge in {config.max_iters} iterations (K={K}, {n} rows)")
    meta = FitMeta(
        iterations=iterations,
        loglik=ll,
        converged=converged,
        seed=seed,
        normalize_time=data.normalize_time,
        time_scale=data.time_scale,
        reg=reg.tolist(),
        n_rows=n,
        n_trials=data.n_trials,
        objective_history=history,
        loglik_history=ll_history,
    )
    return GmmModel(priors, means, covs, (0,), tuple(range(1, d)), meta)


# --- training data from trials ---


def trial_rows(
    trial: TrialRecord,
    axes: Sequence[int],
    normalize_time: bool,
    speed_threshold: float = 0.05,
    pad: float = 0.0,
):
    """Reach-window samples of one trial as (t, coords...) rows, t from arm onset.

    `pad` widens the window by that fraction of the reach duration on both
    sides, so the rest and hold samples pin the mixture at the endpoints.
    Samples outside the recording are simply absent.
    """
    onset, end = reach_window(trial, speed_threshold)
    duration = end - onset
    hand = trial.hand
    lo, hi = onset - pad * duration, end + pad * duration
    mask = (hand.times >= lo - 1e-9) & (hand.times <= hi + 1e-9)
    t = hand.times[mask] - onset
    if normalize_time:
        t = t / duration
    return np.column_stack([t, hand.values[mask][:, list(axes)]]), duration


def training_matrix(
    trials: Sequence[TrialRecord],
    axes: Sequence[int],
    normalize_time: bool = True,
    speed_threshold: float = 0.05,
    pad: float = 0.0,
) -> TrainingMatrix:
    if not trials:
        raise InsufficientDataError("no trials to build a training matrix from")
    blocks, sources, durations = [], [], []
    for trial in trials:
        rows, duration = trial_rows(trial, axes, normalize_time, speed_threshold, pad)
        blocks.append(rows)
        sources.append(np.full(len(rows), trial.trial_id))
        durations.append(duration)
    return TrainingMatrix(
        np.vstack(blocks),
        np.concatenate(sources),
        time_scale=float(np.mean(durations)),
        normalize_time=normalize_time,
    )


@dataclass(frozen=True, eq=False)
class ActionModel:
    """Either three per-axis (t, x_i) models or one joint (t, x, y, z) model."""

    label: ActionLabel
    models: tuple[GmmModel, ...]

    @property
    def joint(self) -> bool:
        return len(self.models) == 1

    @property
    def fit_meta(self) -> FitMeta:
        return self.models[0].fit_meta

    def to_dict(self) -> dict:
        return {"label": self.label.token, "joint": self.joint, "models": [m.to_dict() for m in self.models]}

    @classmethod
    def from_dict(cls, data: dict) -> "ActionModel":
        try:
            models = tuple(GmmModel.from_dict(m) for m in data["models"])
            label = ActionLabel.from_token(data["label"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed action model: {exc}") from exc
        if len(models) not in (1, 3):
            raise SchemaError(f"{data['label']}: expected 1 joint or 3 per-axis models, got {len(models)}")
        return cls(label, models)


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Per-label action models plus what the evaluation needs to know about training."""

    models: dict[ActionLabel, ActionModel]
    training_ids: frozenset[int] = frozenset()
    training_counts: dict[ActionLabel, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, label: ActionLabel) -> ActionModel:
        try:
            return self.models[label]
        except KeyError:
            raise CoverageError(f"bundle has no model for {label.token}", missing=[label.token]) from None

    def check_coverage(self) -> None:
        missing = [label.token for label in ALL_LABELS if label not in self.models]
        if missing:
            raise CoverageError(f"bundle lacks models for {', '.join(missing)}", missing=missing)

    def all_models(self) -> list[GmmModel]:
        return [m for label in ALL_LABELS if label in self.models for m in self.models[label].models]

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": MODEL_VERSION,
            "meta": self.meta,
            "training_ids": sorted(self.training_ids),
            "training_counts": {label.token: n for label, n in self.training_counts.items()},
            "actions": [self.models[label].to_dict() for label in ALL_LABELS if label in self.models],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelBundle":
        if data.get("format") != BUNDLE_FORMAT:
            raise SchemaError(f"not a model bundle (format {data.get('format')!r})")
        try:
            actions = [ActionModel.from_dict(a) for a in data["actions"]]
            counts = {ActionLabel.from_token(k): int(v) for k, v in data.get("training_counts", {}).items()}
            ids = frozenset(int(i) for i in data.get("training_ids", []))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed model bundle: {exc}") from exc
        return cls({a.label: a for a in actions}, ids, counts, dict(data.get("meta", {})))


def save_bundle(bundle: ModelBundle, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(bundle.to_dict(), indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write model bundle {path}: {exc}") from exc
    return path


def load_bundle(path: str | Path) -> ModelBundle:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise StorageError(f"cannot read model bundle {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from exc
    return ModelBundle.from_dict(data)


def fit_seed(seed: int, label: ActionLabel, part: int) -> int:
    """Independent seed per (label, axis) fit."""
    return int(np.random.SeedSequence([seed, LABEL_INDEX[label], part]).generate_state(1)[0])


def fit_action_models(
    d: Dataset, config: EmConfig | None = None, seed: int = 0, speed_threshold: float = 0.05
) -> ModelBundle:
    """Fit every label on its pooled trials: three (t, x_i) models, or one joint model.

    Fits run on `config.workers` threads; each owns its seed, so the result
    does not depend on the worker count.
    """
    config = config or EmConfig()
    counts = d.counts
    missing = [label.token for label in ALL_LABELS if counts[label] == 0]
    if missing:
        raise CoverageError(f"no training trials for {', '.join(missing)}", missing=missing)

    parts = [(0, 1, 2)] if config.joint else [(0,), (1,), (2,)]
    jobs = []
    for label in ALL_LABELS:
        trials = d.by_label(label)
        for p, axes in enumerate(parts):
            matrix = training_matrix(trials, axes, config.normalize_time, speed_threshold, config.window_pad)
            jobs.append((label, p, matrix))

    def run(job):
        label, p, matrix = job
        return fit(matrix, config.n_components, config, fit_seed(seed, label, p))

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        fitted = list(pool.map(run, jobs))

    models: dict[ActionLabel, list[GmmModel]] = {label: [] for label in ALL_LABELS}
    for (label, _, _), model in zip(jobs, fitted):
        models[label].append(model)
    n_converged = sum(m.fit_meta.converged for m in fitted)
    logger.info(f"Fitted {len(fitted)} models (K={config.n_components}), {n_converged} converged")
    return ModelBundle(
        {label: ActionModel(label, tuple(ms)) for label, ms in models.items()},
        training_ids=d.trial_ids,
        training_counts=dict(counts),
        meta={"em": config.model_dump(mode="json"), "seed": seed},
    )
