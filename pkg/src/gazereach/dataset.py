"""Trial records, the trial CSV format, dataset validation and synthesis."""

import json
import logging
import math
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import savgol_filter

from .config import NoiseSpec, RatesConfig, TimingConfig
from .errors import (
    DataError,
    InsufficientDataError,
    ParameterError,
    SchemaError,
    StorageError,
    TrialValidationError,
)
from .gaze import (
    GIVE_PATTERNS,
    GazePattern,
    HeadCoordination,
    eye_head_timeline,
    generate_script,
    render_gaze_stream,
    sample_times,
)
from .minjerk import reach_positions
from .scene import ALL_LABELS, Action, ActionLabel, SceneGeometry
from .streams import Stream, Trajectory

logger = logging.getLogger(__name__)

HAND_STREAM = "hand_pos"
GAZE_STREAM = "gaze_point"
HEAD_STREAM = "head_orient"
VIDEO_STREAM = "video_frame"
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "gazereach-trials-v1"
DEFAULT_VIEWPOINT = (0.0, -0.25, 0.45)


@dataclass(frozen=True, eq=False)
class TrialRecord:
    """One recorded (or synthesized) trial.

    `events` holds known event times in seconds (saccade, head_onset,
    arm_onset, arm_end, end) when the generator knows them.
    """

    trial_id: int
    label: ActionLabel
    streams: dict[str, Stream]
    scene: SceneGeometry
    events: dict[str, float] = field(default_factory=dict)
    gaze_pattern: GazePattern | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        hand = self.streams.get(HAND_STREAM)
        if hand is None:
            raise TrialValidationError(f"trial {self.trial_id}: missing '{HAND_STREAM}' stream", stream=HAND_STREAM)
        if hand.dim != 3:
            raise TrialValidationError(
                f"trial {self.trial_id}: '{HAND_STREAM}' must have 3 channels, has {hand.dim}", stream=HAND_STREAM
            )

    @property
    def hand(self) -> Stream:
        return self.streams[HAND_STREAM]

    def hand_trajectory(self) -> Trajectory:
        return Trajectory.from_stream(self.hand)

    @property
    def duration(self) -> float:
        return float(self.hand.times[-1]) if len(self.hand) else 0.0


@dataclass(frozen=True)
class Dataset:
    trials: tuple[TrialRecord, ...] = ()

    @property
    def counts(self) -> dict[ActionLabel, int]:
        counts = {label: 0 for label in ALL_LABELS}
        for trial in self.trials:
            counts[trial.label] += 1
        return counts

    @property
    def trial_ids(self) -> frozenset[int]:
        return frozenset(t.trial_id for t in self.trials)

    def by_label(self, label: ActionLabel) -> list[TrialRecord]:
        return [t for t in self.trials if t.label == label]

    def sorted(self) -> "Dataset":
        return Dataset(tuple(sorted(self.trials, key=lambda t: t.trial_id)))

    def __len__(self) -> int:
        return len(self.trials)


# --- trial CSV ---


def serialize_trial(trial: TrialRecord, extra_header: Mapping[str, str] | None = None) -> str:
    """Header block of `# key=value` lines, then one section per stream."""
    lines = [f"# trial_id={trial.trial_id}", f"# label={trial.label.token}"]
    lines += [f"# {k}={v}" for k, v in trial.scene.to_header().items()]
    if trial.gaze_pattern is not None:
        lines.append(f"# gaze_pattern={trial.gaze_pattern.value}")
    lines += [f"# event_{name}={value!r}" for name, value in trial.events.items()]
    lines += [f"# {k}={v}" for k, v in trial.meta.items()]
    lines += [f"# {k}={v}" for k, v in (extra_header or {}).items()]
    for stream in trial.streams.values():
        section = f"# stream={stream.name} rate={stream.nominal_rate!r} dim={stream.dim}"
        if stream.clock_offset:
            section += f" offset={stream.clock_offset!r}"
        lines.append(section)
        for t, row in zip(stream.times, stream.values):
            lines.append(f"{t:.9f}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


_RESERVED = {"trial_id", "label", "gaze_pattern"}


def _stream_section(body: str, lineno: int) -> dict:
    fields = {}
    for token in body.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise SchemaError(f"line {lineno}: malformed stream header token {token!r}")
        fields[key] = value
    try:
        return {
            "name": fields["stream"],
            "rate": float(fields["rate"]),
            "dim": int(fields["dim"]),
            "offset": float(fields.get("offset", 0.0)),
            "times": [],
            "rows": [],
        }
    except KeyError as exc:
        raise SchemaError(f"line {lineno}: stream header lacks {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise SchemaError(f"line {lineno}: bad stream header value: {exc}") from exc


def parse_trial(content: str | bytes) -> TrialRecord:
    """Parse one trial CSV (see `serialize_trial`)."""
    try:
        text = content.decode("utf-8") if isinstance(content, bytes) else content
    except UnicodeDecodeError as exc:
        raise SchemaError(f"trial file is not valid UTF-8: {exc}") from exc
    header: dict[str, str] = {}
    sections: list[dict] = []
    current: dict | None = None

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("stream="):
                current = _stream_section(body, lineno)
                sections.append(current)
                continue
            if current is not None:
                raise SchemaError(f"line {lineno}: header line after the first stream section")
            key, sep, value = body.partition("=")
            if not sep or not key.strip():
                raise SchemaError(f"line {lineno}: malformed header {body!r}, expected key=value")
            header[key.strip()] = value.strip()
            continue
        if current is None:
            raise SchemaError(f"line {lineno}: data row before any stream section")
        parts = line.split(",")
        if len(parts) != current["dim"] + 1:
            raise SchemaError(
                f"line {lineno}: stream {current['name']} expects {current['dim'] + 1} columns, got {len(parts)}"
            )
        try:
            t, *values = (float(p) for p in parts)
        except ValueError as exc:
            raise SchemaError(f"line {lineno}: non-numeric value: {exc}") from exc
        row = len(current["times"])
        if t < 0:
            raise TrialValidationError(
                f"stream {current['name']}: negative timestamp at row {row} (line {lineno})",
                stream=current["name"],
                row=row,
            )
        if row and t <= current["times"][-1]:
            raise TrialValidationError(
                f"stream {current['name']}: timestamp {t!r} at row {row} (line {lineno}) "
                f"does not increase on {current['times'][-1]!r}",
                stream=current["name"],
                row=row,
            )
        current["times"].append(t)
        current["rows"].append(values)

    for key in ("trial_id", "label"):
        if key not in header:
            raise SchemaError(f"header lacks required key {key!r}")
    try:
        trial_id = int(header["trial_id"])
    except ValueError as exc:
        raise SchemaError(f"trial_id must be an integer, got {header['trial_id']!r}") from exc
    label = ActionLabel.from_token(header["label"])
    try:
        scene = SceneGeometry.from_header(header)
    except KeyError as exc:
        raise SchemaError(f"header lacks geometry key {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise SchemaError(f"bad geometry point: {exc}") from exc
    pattern = None
    if "gaze_pattern" in header:
        try:
            pattern = GazePattern(header["gaze_pattern"])
        except ValueError as exc:
            raise SchemaError(f"unknown gaze_pattern {header['gaze_pattern']!r}") from exc

    geometry_keys = set(scene.to_header())
    events: dict[str, float] = {}
    meta: dict[str, str] = {}
    for key, value in header.items():
        if key in _RESERVED or key in geometry_keys:
            continue
        if key.startswith("event_"):
            try:
                events[key[len("event_") :]] = float(value)
            except ValueError as exc:
                raise SchemaError(f"event {key} must be a number, got {value!r}") from exc
        else:
            meta[key] = value

    streams = {}
    for sec in sections:
        if sec["name"] in streams:
            raise SchemaError(f"stream {sec['name']} appears twice")
        values = np.array(sec["rows"], dtype=float).reshape(-1, sec["dim"])
        streams[sec["name"]] = Stream(sec["name"], sec["rate"], sec["dim"], sec["times"], values, sec["offset"])
    return TrialRecord(trial_id, label, streams, scene, events, pattern, meta)


# --- reach window ---


def hand_speed(hand: Stream, window: float = 0.25) -> np.ndarray:
    """Savitzky-Golay smoothed hand speed (m/s) at every sample."""
    n = len(hand)
    if n < 5:
        return np.zeros(n)
    length = min(int(round(window * hand.nominal_rate)) | 1, n if n % 2 else n - 1)
    if length < 5:
        return np.linalg.norm(np.gradient(hand.values, hand.times, axis=0), axis=1)
    dt = float(np.median(np.diff(hand.times)))
    velocity = savgol_filter(hand.values, length, 2, deriv=1, delta=dt, axis=0)
    return np.linalg.norm(velocity, axis=1)


def reach_window(
    trial: TrialRecord, speed_threshold: float = 0.05, use_events: bool = True
) -> tuple[float, float]:
    """Arm onset and arm end in trial time.

    Recorded events win. Otherwise walk out from the speed peak to where the
    smoothed speed first drops below the threshold on either side.
    """
    if use_events and "arm_onset" in trial.events and "arm_end" in trial.events:
        start, end = trial.events["arm_onset"], trial.events["arm_end"]
    else:
        start, end = _detect_reach(trial, speed_threshold)
    if not end > start:
        raise DataError(f"trial {trial.trial_id}: empty reach window [{start}, {end}]")
    return start, end


def _detect_reach(trial: TrialRecord, speed_threshold: float) -> tuple[float, float]:
    hand = trial.hand
    speed = hand_speed(hand)
    if len(speed) == 0 or speed.max() < speed_threshold:
        raise InsufficientDataError(f"trial {trial.trial_id}: hand never exceeds {speed_threshold} m/s")
    peak = int(np.argmax(speed))
    below = np.nonzero(speed[:peak] < speed_threshold)[0]
    start = int(below[-1]) + 1 if len(below) else 0
    below = np.nonzero(speed[peak:] < speed_threshold)[0]
    end = peak + int(below[0]) if len(below) else len(speed) - 1
    return float(hand.times[start]), float(hand.times[end])


# --- validation ---


@dataclass
class ValidationIssue:
    severity: str
    message: str
    trial_id: int | None = None
    stream: str | None = None

    def to_dict(self) -> dict:
        return {"severity": self.severity, "trial_id": self.trial_id, "stream": self.stream, "message": self.message}


@dataclass
class ValidationReport:
    total: int
    counts: dict[str, int]
    missing_labels: list[str]
    rate_estimates: dict[int, dict[str, float | None]]
    violations: list[ValidationIssue] = field(default_factory=list)
    warnings: list[ValidationIssue] = field(default_factory=list)

    @property
    def no_trials(self) -> bool:
        return self.total == 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "no_trials": self.no_trials,
            "counts": self.counts,
            "missing_labels": self.missing_labels,
            "rate_estimates": {str(k): v for k, v in self.rate_estimates.items()},
            "violations": [v.to_dict() for v in self.violations],
            "warnings": [w.to_dict() for w in self.warnings],
        }


def validate_dataset(d: Dataset, training: bool = False) -> ValidationReport:
    """Count labels, estimate stream rates and collect every violation.

    With `training` a label without trials is a violation; otherwise it is only listed.
    """
    counts = {label.token: n for label, n in d.counts.items()}
    missing = [token for token, n in counts.items() if n == 0]
    report = ValidationReport(total=len(d), counts=counts, missing_labels=missing, rate_estimates={})
    if training and missing:
        report.violations.append(ValidationIssue("error", f"labels without trials: {', '.join(missing)}"))

    seen: set[int] = set()
    for trial in d.trials:
        if trial.trial_id in seen:
            report.violations.append(ValidationIssue("error", "duplicate trial id", trial.trial_id))
        seen.add(trial.trial_id)
        rates: dict[str, float | None] = {}
        for name, stream in trial.streams.items():
            rates[name] = stream.estimated_rate()
            if len(stream) == 0:
                report.violations.append(ValidationIssue("error", "empty stream", trial.trial_id, name))
                continue
            try:
                stream.check_monotonic()
            except TrialValidationError as exc:
                report.violations.append(ValidationIssue("error", str(exc), trial.trial_id, name))
            if stream.times[0] < 0:
                report.violations.append(ValidationIssue("error", "negative timestamp", trial.trial_id, name))
            if not np.all(np.isfinite(stream.values)):
                report.violations.append(ValidationIssue("error", "non-finite values", trial.trial_id, name))
            if not stream.rate_matches():
                message = f"estimated rate {rates[name]:.2f} Hz differs from nominal {stream.nominal_rate:g} Hz"
                report.warnings.append(ValidationIssue("warning", message, trial.trial_id, name))
        report.rate_estimates[trial.trial_id] = rates

    for issue in report.warnings:
        logger.warning(f"trial {issue.trial_id} stream {issue.stream}: {issue.message}")
    logger.info(f"Validated {report.total} trials: {len(report.violations)} violations, {len(report.warnings)} warnings")
    return report


# --- synthesis ---


def normalize_counts(counts: Mapping) -> dict[ActionLabel, int]:
    out = {label: 0 for label in ALL_LABELS}
    for key, n in counts.items():
        label = key if isinstance(key, ActionLabel) else ActionLabel.from_token(str(key))
        if int(n) != n or n < 0:
            raise ParameterError(f"count for {label.token} must be a non-negative integer, got {n}")
        out[label] = int(n)
    return out


def _pattern_probabilities(weights: Mapping | None) -> np.ndarray:
    if weights is None:
        return np.full(len(GIVE_PATTERNS), 1.0 / len(GIVE_PATTERNS))
    lookup = {GazePattern(k) if not isinstance(k, GazePattern) else k: float(v) for k, v in weights.items()}
    w = np.array([lookup.get(p, 0.0) for p in GIVE_PATTERNS])
    if np.any(w < 0) or w.sum() <= 0:
        raise ParameterError("give-pattern weights must be >= 0 with a positive sum")
    return w / w.sum()


def synthesize_trial(
    trial_id: int,
    label: ActionLabel,
    geometry: SceneGeometry,
    noise: NoiseSpec,
    rng: np.random.Generator,
    timing: TimingConfig | None = None,
    rates: RatesConfig | None = None,
    pattern_probs: np.ndarray | None = None,
    viewpoint=DEFAULT_VIEWPOINT,
) -> TrialRecord:
    timing = timing or TimingConfig()
    rates = rates or RatesConfig()
    probs = _pattern_probabilities(None) if pattern_probs is None else pattern_probs

    jitter = float(rng.uniform(0.0, noise.start_jitter)) if noise.start_jitter > 0 else 0.0
    saccade = timing.saccade_time + jitter
    reach = timing.reach_for(label.action.value)
    onset = saccade + timing.arm_lag
    arm_end = onset + reach
    end = arm_end + timing.hold

    if label.action is Action.PLACE:
        pattern = GazePattern.GOAL_ONLY
    else:
        pattern = GIVE_PATTERNS[int(rng.choice(len(GIVE_PATTERNS), p=probs))]
    script = generate_script(label, pattern, timing.model_copy(update={"saccade_time": saccade}), geometry)

    hand_t = sample_times(rates.hand, end)
    hand = reach_positions(np.asarray(geometry.ball_start), geometry.goal(label), onset, reach, hand_t)
    if noise.position_std > 0:
        hand = hand + rng.normal(0.0, noise.position_std, size=hand.shape)

    gaze = render_gaze_stream(script, rates.gaze, end, noise.gaze_std, rng, name=GAZE_STREAM)

    timeline = eye_head_timeline(script, HeadCoordination.from_timing(timing), geometry, viewpoint, rates.head, end)
    head = timeline.head.values
    if noise.head_std > 0:
        head = head + rng.normal(0.0, noise.head_std, size=head.shape)
        head = head / np.linalg.norm(head, axis=1, keepdims=True)

    video_t = sample_times(rates.video, end)
    streams = {
        HAND_STREAM: Stream(HAND_STREAM, rates.hand, 3, hand_t, hand),
        GAZE_STREAM: gaze,
        HEAD_STREAM: Stream(HEAD_STREAM, rates.head, 3, timeline.head.times, head),
        VIDEO_STREAM: Stream(VIDEO_STREAM, rates.video, 1, video_t, np.arange(len(video_t), dtype=float)),
    }
    events = {
        "saccade": saccade,
        "head_onset": saccade + timing.head_lag,
        "arm_onset": onset,
        "arm_end": arm_end,
        "end": end,
    }
    return TrialRecord(trial_id, label, streams, geometry, events, pattern)


def synthesize_dataset(
    geometry: SceneGeometry,
    counts: Mapping,
    noise: NoiseSpec,
    seed: int,
    timing: TimingConfig | None = None,
    rates: RatesConfig | None = None,
    pattern_weights: Mapping | None = None,
    viewpoint=DEFAULT_VIEWPOINT,
    first_trial_id: int = 1,
) -> Dataset:
    """Desk-scale dataset: min-jerk reaches plus gaze/head streams from the state machine.

    Deterministic for a fixed seed. Trial order is shuffled, as in the recording
    protocol, and trial ids follow that order.
    """
    timing = timing or TimingConfig()
    rates = rates or RatesConfig()
    for name, rate in rates.model_dump().items():
        if not rate > 0 or not math.isfinite(rate):
            raise ParameterError(f"{name} rate must be a positive number, got {rate}")
    for action in ("P", "G"):
        if not timing.reach_for(action) > 0:
            raise ParameterError(f"reach duration for action {action} must be > 0")
    probs = _pattern_probabilities(pattern_weights)
    per_label = normalize_counts(counts)

    labels = [label for label in ALL_LABELS for _ in range(per_label[label])]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    children = np.random.SeedSequence(seed).spawn(len(labels))
    trials = tuple(
        synthesize_trial(
            first_trial_id + i,
            labels[j],
            geometry,
            noise,
            np.random.default_rng(children[i]),
            timing,
            rates,
            probs,
            viewpoint,
        )
        for i, j in enumerate(order)
    )
    logger.info(f"Synthesized {len(trials)} trials (seed={seed})")
    return Dataset(trials)


# --- dataset directories ---


def trial_filename(trial_id: int) -> str:
    return f"trial_{trial_id:04d}.csv"


def save_dataset(d: Dataset, directory: str | Path, extra_header: Mapping[str, str] | None = None) -> Path:
    """Write one CSV per trial plus a JSON manifest; returns the manifest path."""
    directory = Path(directory)
    entries = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for trial in d.trials:
            name = trial_filename(trial.trial_id)
            (directory / name).write_text(serialize_trial(trial, extra_header), encoding="utf-8")
            entries.append({"file": name, "trial_id": trial.trial_id, "label": trial.label.token})
        manifest = {
            "format": MANIFEST_FORMAT,
            "meta": dict(extra_header or {}),
            "counts": {label.token: n for label, n in d.counts.items()},
            "trials": entries,
        }
        path = directory / MANIFEST_NAME
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {directory}: {exc}") from exc
    logger.info(f"Wrote {len(entries)} trials to {directory}")
    return path


def load_dataset(directory: str | Path, workers: int = 1) -> Dataset:
    """Read a manifest and its trial files; files are parsed independently."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise StorageError(f"{directory} has no {MANIFEST_NAME}") from exc
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from exc
    try:
        entries = manifest["trials"]
        files = [directory / entry["file"] for entry in entries]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed manifest ({exc})") from exc

    def read(file: Path) -> TrialRecord:
        try:
            return parse_trial(file.read_bytes())
        except OSError as exc:
            raise StorageError(f"cannot read {file}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=workers) as pool:
        trials = tuple(pool.map(read, files))

    for entry, trial in zip(entries, trials):
        if entry.get("label") != trial.label.token or entry.get("trial_id") != trial.trial_id:
            raise SchemaError(f"{entry['file']}: manifest entry disagrees with the file header")
    dataset = Dataset(trials)
    expected = manifest.get("counts")
    actual = {label.token: n for label, n in dataset.counts.items()}
    if expected is not None and expected != actual:
        raise SchemaError(f"{path}: manifest counts {expected} disagree with trial files {actual}")
    logger.info(f"Loaded {len(trials)} trials from {directory}")
    return dataset


__all__ = [
    "Dataset",
    "TrialRecord",
    "ValidationIssue",
    "ValidationReport",
    "hand_speed",
    "load_dataset",
    "parse_trial",
    "reach_window",
    "save_dataset",
    "serialize_trial",
    "synthesize_dataset",
    "synthesize_trial",
    "validate_dataset",
]
