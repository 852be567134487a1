"""Action anticipation from partial observations and the gated evaluation.

Each gate cuts a trial at a cue event (first goal saccade, head turn, arm
onset, end of trial). The classifier fuses whatever cues the gate shows
with per-label priors and reports a posterior over the six labels.
"""

import csv
import io
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from .anova import AnovaTable, anova_two_way
from .config import GIVE_PATTERN_NAMES, DetectionConfig, EvalConfig, TimingConfig
from .dataset import GAZE_STREAM, HEAD_STREAM, Dataset, TrialRecord, reach_window
from .errors import (
    DataError,
    DegenerateDesignError,
    DesignError,
    InputError,
    InsufficientDataError,
    LeakageError,
)
from .gaze import (
    Fixation,
    FixationTarget,
    GazePattern,
    HeadCoordination,
    TargetKind,
    angle_between,
    collapse,
    detect_fixations,
    generate_script,
    head_heading_at,
    nearest_target,
    pattern_kinds,
    scene_targets,
)
from .scene import ALL_LABELS, LABEL_INDEX, Action, ActionLabel, SceneGeometry, unit
from .streams import Trajectory
from .trajgmm import ModelBundle
from .trajgmr import predict

logger = logging.getLogger(__name__)

CHANCE = {"overall": 1.0 / 6.0, "direction": 1.0 / 3.0, "action": 1.0 / 2.0}
EVENT_NAMES = ("saccade", "head_onset", "arm_onset", "arm_end", "end")


class Gate(str, Enum):
    PRE = "PRE"
    G = "G"
    GH = "GH"
    GHA = "GHA"
    GHA_PLUS = "GHA+"

    @property
    def rank(self) -> int:
        return list(Gate).index(self)

    @property
    def shows_head(self) -> bool:
        return self.rank >= Gate.GH.rank

    @property
    def shows_arm(self) -> bool:
        return self.rank >= Gate.GHA.rank

    @classmethod
    def parse(cls, name: str) -> "Gate":
        name = name.strip()
        if name == "GHAplus":
            return cls.GHA_PLUS
        try:
            return cls(name)
        except ValueError:
            raise InputError(f"unknown gate {name!r}, expected one of {[g.value for g in cls]}") from None


@dataclass(frozen=True, eq=False)
class Observation:
    """Cues visible up to a gate cut.

    `gaze_targets` is the assigned fixation-target sequence (initial object
    first), `head_direction` the unit head heading at the cut,
    `arm_prefix` the hand positions with times counted from arm onset and
    `head_elapsed` the seconds from the first goal saccade to the head reading.
    """

    scene: SceneGeometry
    viewpoint: tuple[float, float, float] = (0.0, -0.25, 0.45)
    gaze_targets: tuple[FixationTarget, ...] | None = None
    head_direction: np.ndarray | None = None
    arm_prefix: Trajectory | None = None
    gate: Gate | None = None
    head_elapsed: float | None = None

    @property
    def cues(self) -> list[str]:
        present = []
        if self.gaze_targets:
            present.append("gaze")
        if self.head_direction is not None:
            present.append("head")
        if self.arm_prefix is not None and len(self.arm_prefix):
            present.append("arm")
        return present

    @property
    def empty(self) -> bool:
        return not self.cues


@dataclass(frozen=True)
class Posterior:
    probs: dict[ActionLabel, float]
    log_likelihoods: dict[str, dict[ActionLabel, float]] = field(default_factory=dict)

    @property
    def argmax(self) -> ActionLabel:
        return max(ALL_LABELS, key=lambda label: (self.probs[label], -LABEL_INDEX[label]))

    def to_dict(self) -> dict:
        return {
            "probs": {label.token: p for label, p in self.probs.items()},
            "argmax": self.argmax.token,
            "log_likelihoods": {
                cue: {label.token: v for label, v in table.items()} for cue, table in self.log_likelihoods.items()
            },
        }


# --- priors ---


def make_priors(mode: str, counts: Mapping[ActionLabel, int] | None = None) -> dict[ActionLabel, float]:
    """Empirical (training trial counts) or uniform label priors."""
    if mode == "uniform":
        return {label: 1.0 / len(ALL_LABELS) for label in ALL_LABELS}
    if mode != "empirical":
        raise InputError(f"unknown prior mode {mode!r}")
    counts = counts or {}
    total = sum(counts.get(label, 0) for label in ALL_LABELS)
    if total == 0:
        logger.warning("no training counts recorded, falling back to uniform priors")
        return make_priors("uniform")
    return {label: counts.get(label, 0) / total for label in ALL_LABELS}


def posterior_from_log(scores: Mapping[ActionLabel, float]) -> dict[ActionLabel, float]:
    """Normalize unnormalized log scores."""
    values = np.array([scores[label] for label in ALL_LABELS], dtype=float)
    probs = np.exp(values - logsumexp(values))
    probs = probs / probs.sum()
    return {label: float(p) for label, p in zip(ALL_LABELS, probs)}


# --- cue likelihoods ---


def label_patterns(label: ActionLabel, weights: Mapping[str, float] | None) -> list[tuple[GazePattern, float]]:
    """Gaze patterns available to a label with normalized weights."""
    if label.action is Action.PLACE:
        return [(GazePattern.GOAL_ONLY, 1.0)]
    weights = weights or {name: 1.0 for name in GIVE_PATTERN_NAMES}
    total = sum(weights.get(name, 0.0) for name in GIVE_PATTERN_NAMES)
    return [(GazePattern(name), weights.get(name, 0.0) / total) for name in GIVE_PATTERN_NAMES]


def post_pickup(targets: Sequence[FixationTarget]) -> list[tuple[TargetKind, object]]:
    """(kind, direction) sequence after leaving the initial object."""
    seq = [t for t in collapse(list(targets)) if t.kind is not TargetKind.INITIAL_OBJECT]
    return [(t.kind, t.direction) for t in collapse(seq)]


def gaze_loglik(
    targets: Sequence[FixationTarget],
    label: ActionLabel,
    weights: Mapping[str, float] | None = None,
    switches: int = 1,
    confusion: float = 0.1,
) -> float:
    """Log probability that the label's gaze patterns produce the observed sequence so far.

    A pattern explains the observation when the observed post-pickup sequence
    is a prefix of the pattern's target sequence; `confusion` mass is spread
    evenly over the labels to absorb misread fixations.
    """
    observed = post_pickup(targets)
    match = 0.0
    for pattern, weight in label_patterns(label, weights):
        expected = [(kind, label.direction) for kind in pattern_kinds(pattern, switches)]
        if observed == expected[: len(observed)]:
            match += weight
    value = (1.0 - confusion) * match + confusion / len(ALL_LABELS)
    return math.log(value) if value > 0 else -math.inf


def head_loglik(
    direction: np.ndarray,
    label: ActionLabel,
    scene: SceneGeometry,
    viewpoint,
    weights: Mapping[str, float] | None = None,
    switches: int = 1,
    sigma: float = 0.15,
    elapsed: float | None = None,
    timing: TimingConfig | None = None,
) -> float:
    """Gaussian on the angle between the observed head heading and the label's expected one, mixed over patterns.

    With `elapsed` (seconds since the first goal saccade) the expected heading
    is where the rate-limited head would be by then, usually mid-turn. Without
    it every target of the pattern counts as a resting heading.
    """
    viewpoint = np.asarray(viewpoint, dtype=float)
    observed = unit(np.asarray(direction, dtype=float))
    timing = (timing or TimingConfig()).model_copy(update={"switches": switches})
    coord = HeadCoordination.from_timing(timing)
    terms, log_w = [], []
    for pattern, weight in label_patterns(label, weights):
        if weight <= 0:
            continue
        if elapsed is None:
            kinds = pattern_kinds(pattern, switches)
            expected = [unit(np.asarray(FixationTarget.of(k, label.direction, scene).point) - viewpoint) for k in kinds]
        else:
            script = generate_script(label, pattern, timing, scene)
            expected = [head_heading_at(script, coord, scene, viewpoint, timing.saccade_time + elapsed)]
        for heading in expected:
            theta = angle_between(observed, heading)
            terms.append(-0.5 * (theta / sigma) ** 2 - math.log(sigma * math.sqrt(2 * math.pi)))
            log_w.append(math.log(weight / len(expected)))
    return float(logsumexp(np.array(terms) + np.array(log_w)))


def arm_loglik(prefix: Trajectory, action_model, obs_std: float = 0.005, stride: int = 1) -> float:
    """Σ log N(x_t; μ(t), Σ(t) + σ²I) over every `stride`-th prefix sample (t from arm onset)."""
    times = prefix.times[::stride]
    positions = prefix.positions[::stride]
    if len(times) == 0:
        return 0.0
    scale = action_model.fit_meta.time_scale
    mean, cov = predict(action_model, np.clip(times, 0.0, scale))
    cov = cov + (obs_std**2) * np.eye(3)
    chol = np.linalg.cholesky(cov)
    diff = (positions - mean)[:, :, None]
    soln = np.linalg.solve(chol, diff)[:, :, 0]
    log_det = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return float(np.sum(-0.5 * (3 * math.log(2 * math.pi) + log_det + np.sum(soln**2, axis=1))))


def classify(
    obs: Observation,
    models: ModelBundle,
    priors: Mapping[ActionLabel, float],
    params: EvalConfig | None = None,
    pattern_weights: Mapping[str, float] | None = None,
    switches: int = 1,
    timing: TimingConfig | None = None,
) -> Posterior:
    """Posterior ∝ prior × Π cue likelihoods, accumulated in log space."""
    params = params or EvalConfig()
    if obs.empty:
        raise InputError("observation carries no cue (gaze, head or arm)")
    if abs(sum(priors.values()) - 1.0) > 1e-9 or any(priors.get(label, -1) < 0 for label in ALL_LABELS):
        raise InputError("priors must cover all six labels and sum to 1")
    models.check_coverage()

    tables: dict[str, dict[ActionLabel, float]] = {}
    if obs.gaze_targets:
        tables["gaze"] = {
            label: gaze_loglik(obs.gaze_targets, label, pattern_weights, switches, params.gaze_confusion)
            for label in ALL_LABELS
        }
    if obs.head_direction is not None:
        tables["head"] = {
            label: head_loglik(
                obs.head_direction,
                label,
                obs.scene,
                obs.viewpoint,
                pattern_weights,
                switches,
                params.head_sigma,
                obs.head_elapsed,
                timing,
            )
            for label in ALL_LABELS
        }
    if obs.arm_prefix is not None and len(obs.arm_prefix):
        tables["arm"] = {
            label: arm_loglik(obs.arm_prefix, models[label], params.arm_obs_std, params.arm_stride)
            for label in ALL_LABELS
        }
    scores = {label: math.log(priors[label]) if priors[label] > 0 else -math.inf for label in ALL_LABELS}
    for table in tables.values():
        for label in ALL_LABELS:
            scores[label] += table[label]
    return Posterior(posterior_from_log(scores), tables)


# --- events and gate cuts ---


def detect_events(trial: TrialRecord, params: DetectionConfig | None = None) -> dict[str, float]:
    """Cue events of an ingested trial from its streams.

    saccade: start of the first fixation assigned to a target other than the
    initial object. head_onset: first head sample turned more than
    `head_onset_angle` from its starting heading. Arm onset and end: smoothed
    hand speed crossing `speed_threshold` around the speed peak.
    """
    params = params or DetectionConfig()
    events: dict[str, float] = {"end": trial.duration}
    gaze = trial.streams.get(GAZE_STREAM)
    if gaze is not None and len(gaze):
        targets = scene_targets(trial.scene)
        for fix in detect_fixations(gaze, params):
            tgt = nearest_target(fix.centroid, targets, params.assignment_radius)
            if tgt is not None and tgt.kind is not TargetKind.INITIAL_OBJECT:
                events["saccade"] = fix.start
                break
    head = trial.streams.get(HEAD_STREAM)
    if head is not None and len(head):
        start = unit(head.values[0])
        turned = [i for i, h in enumerate(head.values) if angle_between(start, unit(h)) > params.head_onset_angle]
        if turned:
            events["head_onset"] = float(head.times[turned[0]])
    try:
        events["arm_onset"], events["arm_end"] = reach_window(trial, params.speed_threshold, use_events=False)
    except (InsufficientDataError, DataError):
        logger.warning(f"trial {trial.trial_id}: no arm movement detected")
    return events


def trial_events(trial: TrialRecord, params: DetectionConfig | None = None) -> dict[str, float]:
    """Recorded events, completed by detection where some are missing."""
    if all(name in trial.events for name in EVENT_NAMES):
        return dict(trial.events)
    detected = detect_events(trial, params)
    return {**detected, **trial.events}


def gate_cut(gate: Gate, events: Mapping[str, float], params: EvalConfig | None = None) -> float:
    params = params or EvalConfig()
    needed = {
        Gate.PRE: "saccade",
        Gate.G: "saccade",
        Gate.GH: "head_onset",
        Gate.GHA: "arm_onset",
        Gate.GHA_PLUS: "end",
    }[gate]
    if needed not in events:
        raise InsufficientDataError(f"gate {gate.value} needs the {needed} event")
    t = events[needed]
    if gate is Gate.PRE:
        return max(t - params.pre_margin, 0.0)
    offset = {
        Gate.G: params.gaze_glimpse,
        Gate.GH: params.head_glimpse,
        Gate.GHA: params.arm_glimpse,
        Gate.GHA_PLUS: 0.0,
    }[gate]
    return t + offset


# --- observations ---


@dataclass(frozen=True, eq=False)
class TrialView:
    """What the observer perceives of one trial, before any gate cut.

    Fixation centroids and the head heading carry the observer's perception
    noise, drawn once per trial so every gate sees the same perturbation.
    """

    trial: TrialRecord
    events: dict[str, float]
    fixations: list[Fixation]
    assigned: list[FixationTarget]
    head_noise: np.ndarray
    viewpoint: tuple[float, float, float]
    min_duration: float = 0.1


def perceive(
    trial: TrialRecord,
    seed: int,
    params: EvalConfig | None = None,
    detection: DetectionConfig | None = None,
    viewpoint=(0.0, -0.25, 0.45),
) -> TrialView:
    params = params or EvalConfig()
    detection = detection or DetectionConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, trial.trial_id]))
    gaze = trial.streams.get(GAZE_STREAM)
    fixations = detect_fixations(gaze, detection) if gaze is not None and len(gaze) else []
    noise = rng.normal(0.0, params.observer_gaze_std, size=(len(fixations), 3))
    targets = scene_targets(trial.scene)
    assigned = [nearest_target(f.centroid + noise[i, : len(f.centroid)], targets) for i, f in enumerate(fixations)]
    head_noise = rng.normal(0.0, params.observer_head_std, size=3)
    return TrialView(
        trial, trial_events(trial, detection), fixations, assigned, head_noise, tuple(viewpoint), detection.min_duration
    )


def observe(view: TrialView, gate: Gate, params: EvalConfig | None = None, blur: Iterable[str] = ()) -> Observation:
    """Observation at a gate: cues the gate shows, minus blurred ones."""
    params = params or EvalConfig()
    blur = set(blur)
    trial = view.trial
    cut = gate_cut(gate, view.events, params)

    gaze_targets = None
    if "eyes" not in blur:
        visible = [
            tgt
            for fix, tgt in zip(view.fixations, view.assigned)
            if fix.start + view.min_duration <= cut + 1e-9
        ]
        gaze_targets = tuple(visible) or None

    head_direction = head_elapsed = None
    head = trial.streams.get(HEAD_STREAM)
    if gate.shows_head and "head" not in blur and head is not None and len(head):
        idx = int(np.searchsorted(head.times, cut + 1e-9, side="right")) - 1
        if idx >= 0:
            head_direction = unit(unit(head.values[idx]) + view.head_noise)
            if "saccade" in view.events:
                head_elapsed = float(head.times[idx]) - view.events["saccade"]

    arm_prefix = None
    if gate.shows_arm and "arm_onset" in view.events:
        onset = view.events["arm_onset"]
        hand = trial.hand
        mask = (hand.times >= onset - 1e-9) & (hand.times <= cut + 1e-9)
        if np.any(mask):
            arm_prefix = Trajectory(hand.times[mask] - onset, hand.values[mask])

    return Observation(trial.scene, view.viewpoint, gaze_targets, head_direction, arm_prefix, gate, head_elapsed)


# --- gated evaluation ---


@dataclass(frozen=True)
class TrialResult:
    trial_id: int
    gate: Gate
    truth: ActionLabel
    predicted: ActionLabel
    p_truth: float
    cues: tuple[str, ...]

    @property
    def correct(self) -> bool:
        return self.predicted == self.truth

    @property
    def direction_correct(self) -> bool:
        return self.predicted.direction == self.truth.direction

    @property
    def action_correct(self) -> bool:
        return self.predicted.action == self.truth.action


@dataclass
class GateResult:
    gate: Gate
    n: int
    accuracy: float
    direction_accuracy: float
    action_accuracy: float
    place_accuracy: float | None
    give_accuracy: float | None
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return {
            "gate": self.gate.value,
            "n": self.n,
            "accuracy": self.accuracy,
            "direction_accuracy": self.direction_accuracy,
            "action_accuracy": self.action_accuracy,
            "place_accuracy": self.place_accuracy,
            "give_accuracy": self.give_accuracy,
            "confusion": {"labels": [label.token for label in ALL_LABELS], "rows": self.confusion},
        }


def _mean(values: list[bool]) -> float | None:
    return float(np.mean(values)) if values else None


def summarize_gate(gate: Gate, results: Sequence[TrialResult]) -> GateResult:
    confusion = [[0] * len(ALL_LABELS) for _ in ALL_LABELS]
    for r in results:
        confusion[LABEL_INDEX[r.truth]][LABEL_INDEX[r.predicted]] += 1
    return GateResult(
        gate=gate,
        n=len(results),
        accuracy=_mean([r.correct for r in results]) or 0.0,
        direction_accuracy=_mean([r.direction_correct for r in results]) or 0.0,
        action_accuracy=_mean([r.action_correct for r in results]) or 0.0,
        place_accuracy=_mean([r.correct for r in results if r.truth.action is Action.PLACE]),
        give_accuracy=_mean([r.correct for r in results if r.truth.action is Action.GIVE]),
        confusion=confusion,
    )


@dataclass
class GatedReport:
    gates: list[GateResult]
    trials: list[TrialResult]
    chance: dict[str, float] = field(default_factory=lambda: dict(CHANCE))
    anova: AnovaTable | None = None
    anova_note: str | None = None
    prior_mode: str = "empirical"
    blur: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def gate(self, gate: Gate) -> GateResult:
        for result in self.gates:
            if result.gate is gate:
                return result
        raise KeyError(gate.value)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "prior_mode": self.prior_mode,
            "blur": list(self.blur),
            "chance": self.chance,
            "gates": [g.to_dict() for g in self.gates],
            "anova": self.anova.to_dict() if self.anova else None,
            "anova_note": self.anova_note,
        }

    def rows_csv(self, header_lines: list[str] | None = None) -> str:
        """One row per (trial, gate) for external statistics tools."""
        buffer = io.StringIO()
        for line in header_lines or []:
            buffer.write(line + "\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(
            ["trial_id", "gate", "truth", "predicted", "correct", "direction_correct", "action_correct", "p_truth"]
        )
        for r in self.trials:
            writer.writerow(
                [
                    r.trial_id,
                    r.gate.value,
                    r.truth.token,
                    r.predicted.token,
                    int(r.correct),
                    int(r.direction_correct),
                    int(r.action_correct),
                    repr(r.p_truth),
                ]
            )
        return buffer.getvalue()

    def summary_table(self) -> str:
        lines = [f"{'gate':<6}{'n':>6}{'overall':>10}{'direction':>11}{'action':>9}{'place':>8}{'give':>8}"]
        for g in self.gates:
            place = f"{g.place_accuracy:.3f}" if g.place_accuracy is not None else "-"
            give = f"{g.give_accuracy:.3f}" if g.give_accuracy is not None else "-"
            lines.append(
                f"{g.gate.value:<6}{g.n:>6}{g.accuracy:>10.3f}{g.direction_accuracy:>11.3f}"
                f"{g.action_accuracy:>9.3f}{place:>8}{give:>8}"
            )
        lines.append(
            f"{'chance':<6}{'':>6}{self.chance['overall']:>10.3f}{self.chance['direction']:>11.3f}"
            f"{self.chance['action']:>9.3f}"
        )
        return "\n".join(lines)


def check_leakage(test: Dataset, models: ModelBundle) -> None:
    overlap = sorted(test.trial_ids & models.training_ids)
    if overlap:
        shown = ", ".join(str(i) for i in overlap[:10])
        more = f" and {len(overlap) - 10} more" if len(overlap) > 10 else ""
        raise LeakageError(f"{len(overlap)} test trial(s) were used for training: {shown}{more}")


def _gate_anova(results: Sequence[TrialResult]) -> tuple[AnovaTable | None, str | None]:
    rows = [(r.gate.value, "Place" if r.truth.action is Action.PLACE else "Give", float(r.correct)) for r in results]
    try:
        return anova_two_way(rows, factor_a="gate", factor_b="action"), None
    except (DegenerateDesignError, DesignError, InputError) as exc:
        logger.info(f"ANOVA skipped: {exc}")
        return None, str(exc)


def run_gated_eval(
    test: Dataset,
    models: ModelBundle,
    gates: Sequence[Gate | str] | None = None,
    seed: int = 0,
    params: EvalConfig | None = None,
    detection: DetectionConfig | None = None,
    pattern_weights: Mapping[str, float] | None = None,
    switches: int = 1,
    viewpoint=(0.0, -0.25, 0.45),
    workers: int = 1,
    timing: TimingConfig | None = None,
) -> GatedReport:
    """Classify every test trial at every gate and aggregate per gate.

    Trials are processed in trial-id order; perception noise is seeded per
    trial, so the report does not depend on `workers`.
    """
    params = params or EvalConfig()
    gate_list = sorted({Gate.parse(g) if isinstance(g, str) else g for g in (gates or params.gates)}, key=lambda g: g.rank)
    check_leakage(test, models)
    models.check_coverage()
    priors = make_priors(params.prior_mode, models.training_counts)
    trials = sorted(test.trials, key=lambda t: t.trial_id)

    def run(trial: TrialRecord) -> list[TrialResult]:
        view = perceive(trial, seed, params, detection, viewpoint)
        out = []
        for gate in gate_list:
            obs = observe(view, gate, params, params.blur)
            if obs.empty:
                probs = dict(priors)
            else:
                probs = classify(obs, models, priors, params, pattern_weights, switches, timing).probs
            predicted = Posterior(probs).argmax
            out.append(TrialResult(trial.trial_id, gate, trial.label, predicted, probs[trial.label], tuple(obs.cues)))
        return out

    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_trial = list(pool.map(run, trials))
    results = [r for rs in per_trial for r in rs]

    summaries = [summarize_gate(g, [r for r in results if r.gate is g]) for g in gate_list]
    anova, note = _gate_anova(results)
    for s in summaries:
        logger.info(
            f"gate {s.gate.value}: overall {s.accuracy:.3f}, direction {s.direction_accuracy:.3f}, "
            f"action {s.action_accuracy:.3f} over {s.n} trials"
        )
    return GatedReport(summaries, results, dict(CHANCE), anova, note, params.prior_mode, tuple(params.blur))
