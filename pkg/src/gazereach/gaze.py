"""Fixation detection and the placing/giving gaze state machine.

Placing: initial object -> place marker. Giving: initial object -> one of four
face/handover patterns. Eye direction jumps to each new target (saccade); the
head follows after a lag with a bounded angular speed.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .config import DetectionConfig, TimingConfig
from .errors import CompatibilityError, InputError, SchemaError
from .scene import Action, ActionLabel, Direction, SceneGeometry, unit
from .streams import Stream

logger = logging.getLogger(__name__)

DURATION_SLACK = 1e-9


class TargetKind(str, Enum):
    INITIAL_OBJECT = "InitialObject"
    PLACE_MARKER = "PlaceMarker"
    PARTNER_FACE = "PartnerFace"
    HANDOVER_POINT = "HandoverPoint"


class GazePattern(str, Enum):
    GOAL_ONLY = "GoalOnly"
    HAND_ONLY = "HandOnly"
    FACE_ONLY = "FaceOnly"
    HAND_THEN_FACE = "HandThenFace"
    FACE_THEN_HAND = "FaceThenHand"


GIVE_PATTERNS = (
    GazePattern.HAND_ONLY,
    GazePattern.FACE_ONLY,
    GazePattern.HAND_THEN_FACE,
    GazePattern.FACE_THEN_HAND,
)
SWITCHING_PATTERNS = (GazePattern.HAND_THEN_FACE, GazePattern.FACE_THEN_HAND)


@dataclass(frozen=True)
class FixationTarget:
    kind: TargetKind
    direction: Direction | None
    point: tuple[float, float, float]

    @classmethod
    def of(cls, kind: TargetKind, direction: Direction | None, scene: SceneGeometry) -> "FixationTarget":
        if kind is TargetKind.INITIAL_OBJECT:
            return cls(kind, None, scene.ball_start)
        group = {
            TargetKind.PLACE_MARKER: scene.place_markers,
            TargetKind.PARTNER_FACE: scene.partner_faces,
            TargetKind.HANDOVER_POINT: scene.handover_points,
        }[kind]
        return cls(kind, direction, group[direction])

    @property
    def name(self) -> str:
        return self.kind.value if self.direction is None else f"{self.kind.value}({self.direction.value})"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "direction": self.direction.value if self.direction else None,
            "point": list(self.point),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FixationTarget":
        direction = Direction(data["direction"]) if data.get("direction") else None
        x, y, z = (float(v) for v in data["point"])
        return cls(TargetKind(data["kind"]), direction, (x, y, z))


def scene_targets(scene: SceneGeometry) -> list[FixationTarget]:
    """All ten fixation targets of a scene."""
    targets = [FixationTarget.of(TargetKind.INITIAL_OBJECT, None, scene)]
    for kind in (TargetKind.PLACE_MARKER, TargetKind.PARTNER_FACE, TargetKind.HANDOVER_POINT):
        targets.extend(FixationTarget.of(kind, d, scene) for d in Direction)
    return targets


@dataclass(frozen=True, eq=False)
class Fixation:
    start: float
    end: float
    centroid: np.ndarray
    dispersion: float
    first_index: int = 0
    last_index: int = 0

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class GazeEvent:
    t: float
    target: FixationTarget


@dataclass(frozen=True)
class GazeScript:
    label: ActionLabel
    pattern: GazePattern
    events: tuple[GazeEvent, ...]

    def target_at(self, t: float) -> FixationTarget:
        current = self.events[0].target
        for event in self.events:
            if event.t > t:
                break
            current = event.target
        return current

    @property
    def switch_times(self) -> np.ndarray:
        return np.array([e.t for e in self.events])

    def to_dict(self) -> dict:
        return {
            "label": self.label.token,
            "pattern": self.pattern.value,
            "events": [{"t": e.t, **e.target.to_dict()} for e in self.events],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GazeScript":
        try:
            events = tuple(GazeEvent(float(e["t"]), FixationTarget.from_dict(e)) for e in data["events"])
            return cls(ActionLabel.from_token(data["label"]), GazePattern(data["pattern"]), events)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed gaze script: {exc}") from exc


# --- fixation detection ---


def _dispersion(window: np.ndarray) -> float:
    return float(np.sum(window.max(axis=0) - window.min(axis=0)))


def detect_fixations(gaze: Stream, params: DetectionConfig | None = None) -> list[Fixation]:
    """Dispersion-threshold identification (I-DT).

    A fixation is a maximal run of samples whose summed per-axis range stays
    within the threshold and which lasts at least the minimum duration.
    """
    params = params or DetectionConfig()
    if gaze.dim not in (2, 3):
        raise InputError(f"gaze stream {gaze.name} must have 2 or 3 channels, has {gaze.dim}")
    t, x = gaze.times, gaze.values
    n = len(t)
    fixations: list[Fixation] = []
    i = 0
    while i < n:
        j = int(np.searchsorted(t, t[i] + params.min_duration - DURATION_SLACK, side="left"))
        if j >= n:
            break
        if _dispersion(x[i : j + 1]) > params.dispersion_threshold:
            i += 1
            continue
        lo = x[i : j + 1].min(axis=0)
        hi = x[i : j + 1].max(axis=0)
        while j + 1 < n:
            new_lo = np.minimum(lo, x[j + 1])
            new_hi = np.maximum(hi, x[j + 1])
            if float(np.sum(new_hi - new_lo)) > params.dispersion_threshold:
                break
            lo, hi = new_lo, new_hi
            j += 1
        fixations.append(
            Fixation(
                start=float(t[i]),
                end=float(t[j]),
                centroid=x[i : j + 1].mean(axis=0),
                dispersion=float(np.sum(hi - lo)),
                first_index=i,
                last_index=j,
            )
        )
        i = j + 1
    logger.debug(f"{gaze.name}: {len(fixations)} fixations in {n} samples")
    return fixations


def nearest_target(
    point: np.ndarray, targets: list[FixationTarget], radius: float | None = None
) -> FixationTarget | None:
    """Closest target to a gaze point; None when farther than `radius`."""
    pts = np.array([tgt.point for tgt in targets])[:, : len(point)]
    dist = np.linalg.norm(pts - np.asarray(point), axis=1)
    k = int(np.argmin(dist))
    if radius is not None and dist[k] > radius:
        return None
    return targets[k]


def collapse(targets: list[FixationTarget]) -> list[FixationTarget]:
    """Drop consecutive repeats (a long dwell may be split into several fixations)."""
    out: list[FixationTarget] = []
    for tgt in targets:
        if not out or out[-1] != tgt:
            out.append(tgt)
    return out


@dataclass
class PatternResult:
    pattern: GazePattern | None
    sequence: list[FixationTarget] = field(default_factory=list)
    unassigned: list[int] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    @property
    def classified(self) -> bool:
        return self.pattern is not None


def classify_pattern(
    fixes: list[Fixation],
    scene: SceneGeometry,
    label_action: Action,
    radius: float | None = None,
) -> PatternResult:
    """Map the post-pickup fixation-target sequence to one of the five patterns."""
    if not fixes:
        raise InputError("classify_pattern needs at least one fixation")
    radius = DetectionConfig().assignment_radius if radius is None else radius
    targets = scene_targets(scene)
    assigned: list[FixationTarget] = []
    result = PatternResult(pattern=None)
    for i, fix in enumerate(fixes):
        tgt = nearest_target(fix.centroid, targets, radius)
        if tgt is None:
            result.unassigned.append(i)
        else:
            assigned.append(tgt)
    if result.unassigned:
        result.diagnostics.append(f"{len(result.unassigned)} fixation(s) farther than {radius} m from any target")
    sequence = collapse(assigned)
    result.sequence = sequence
    if not sequence:
        result.diagnostics.append("no fixation within the assignment radius of a scene target")
        return result

    start = 0
    while start < len(sequence) and sequence[start].kind is TargetKind.INITIAL_OBJECT:
        start += 1
    post = [tgt for tgt in sequence[start:] if tgt.kind is not TargetKind.INITIAL_OBJECT]
    if len(post) != len(sequence) - start:
        result.diagnostics.append("gaze returned to the initial object after pickup")
    post = collapse(post)
    if not post:
        result.diagnostics.append("no fixation after pickup")
        return result
    if len({tgt.direction for tgt in post}) > 1:
        result.diagnostics.append("post-pickup targets point to more than one direction")

    kinds = [tgt.kind for tgt in post]
    if label_action is Action.PLACE:
        if all(k is TargetKind.PLACE_MARKER for k in kinds):
            result.pattern = GazePattern.GOAL_ONLY
        else:
            result.diagnostics.append(f"placing sequence contains {[t.name for t in post]}")
        return result

    if any(k is TargetKind.PLACE_MARKER for k in kinds):
        result.diagnostics.append(f"giving sequence contains a place marker: {[t.name for t in post]}")
        return result
    has_face = TargetKind.PARTNER_FACE in kinds
    has_hand = TargetKind.HANDOVER_POINT in kinds
    if kinds[0] is TargetKind.HANDOVER_POINT:
        result.pattern = GazePattern.HAND_THEN_FACE if has_face else GazePattern.HAND_ONLY
    else:
        result.pattern = GazePattern.FACE_THEN_HAND if has_hand else GazePattern.FACE_ONLY
    return result


# --- state machine ---


def pattern_kinds(pattern: GazePattern, switches: int = 1) -> list[TargetKind]:
    """Post-pickup target kinds a pattern visits, in order."""
    if pattern is GazePattern.GOAL_ONLY:
        return [TargetKind.PLACE_MARKER]
    if pattern is GazePattern.HAND_ONLY:
        return [TargetKind.HANDOVER_POINT]
    if pattern is GazePattern.FACE_ONLY:
        return [TargetKind.PARTNER_FACE]
    first, second = (
        (TargetKind.HANDOVER_POINT, TargetKind.PARTNER_FACE)
        if pattern is GazePattern.HAND_THEN_FACE
        else (TargetKind.PARTNER_FACE, TargetKind.HANDOVER_POINT)
    )
    return [first if k % 2 == 0 else second for k in range(switches + 1)]


def check_compatible(label: ActionLabel, pattern: GazePattern) -> None:
    if (label.action is Action.PLACE) != (pattern is GazePattern.GOAL_ONLY):
        raise CompatibilityError(
            f"pattern {pattern.value} is not available for {label.token}: "
            "placing uses GoalOnly, giving uses a face/handover pattern"
        )


def generate_script(
    label: ActionLabel, pattern: GazePattern, timing: TimingConfig, scene: SceneGeometry
) -> GazeScript:
    """Fixation-target events: initial object at 0, then the pattern's targets."""
    check_compatible(label, pattern)
    events = [GazeEvent(0.0, FixationTarget.of(TargetKind.INITIAL_OBJECT, None, scene))]
    t = timing.saccade_time
    for kind in pattern_kinds(pattern, timing.switches):
        events.append(GazeEvent(t, FixationTarget.of(kind, label.direction, scene)))
        t += timing.dwell
    return GazeScript(label, pattern, tuple(events))


def sample_times(rate: float, end: float) -> np.ndarray:
    """k / rate for k = 0 .. floor(end * rate), rounded to nanoseconds."""
    n = int(math.floor(end * rate + 1e-9)) + 1
    return np.array([round(k / rate, 9) for k in range(n)])


def render_gaze_stream(
    script: GazeScript,
    rate: float,
    end: float,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    name: str = "gaze_point",
) -> Stream:
    """World-space gaze points following the script, saccades instantaneous."""
    times = sample_times(rate, end)
    idx = np.clip(np.searchsorted(script.switch_times, times, side="right") - 1, 0, None)
    points = np.array([e.target.point for e in script.events])[idx]
    if noise_std > 0:
        rng = rng or np.random.default_rng(0)
        points = points + rng.normal(0.0, noise_std, size=points.shape)
    return Stream(name, rate, 3, times, points)


# --- eye/head coordination ---


@dataclass(frozen=True)
class HeadCoordination:
    head_lag: float
    head_rate_limit: float  # rad/s; inf means the head snaps to its target

    def __post_init__(self):
        if self.head_lag < 0:
            raise InputError(f"head_lag must be >= 0, got {self.head_lag}")
        if not self.head_rate_limit > 0:
            raise InputError(f"head_rate_limit must be > 0, got {self.head_rate_limit}")

    @classmethod
    def from_timing(cls, timing: TimingConfig) -> "HeadCoordination":
        return cls(timing.head_lag, timing.head_rate_limit)


@dataclass(frozen=True)
class EyeHeadTimeline:
    eye: Stream
    head: Stream
    eye_arrivals: tuple[float, ...]
    head_arrivals: tuple[float | None, ...]


def angle_between(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0)))


def _rotate_towards(h: np.ndarray, g: np.ndarray, theta: float, step: float) -> np.ndarray:
    """Move unit vector h by `step` radians along the great circle to g."""
    sin_theta = math.sin(theta)
    if sin_theta < 1e-12:
        return g.copy()
    a = (math.sin(theta - step) * h + math.sin(step) * g) / sin_theta
    return a / np.linalg.norm(a)


def eye_head_timeline(
    script: GazeScript,
    coord: HeadCoordination,
    scene: SceneGeometry,
    viewpoint,
    rate: float = 120.0,
    end: float | None = None,
) -> EyeHeadTimeline:
    """Unit eye and head direction streams seen from `viewpoint`.

    The eye steps to each target at its switch time. The head starts turning
    `head_lag` later and rotates at no more than `head_rate_limit`.
    """
    viewpoint = np.asarray(viewpoint, dtype=float)
    directions = [unit(np.asarray(e.target.point) - viewpoint) for e in script.events]
    switches = script.switch_times
    end = float(switches[-1] + 1.0) if end is None else end
    times = sample_times(rate, end)

    idx = np.clip(np.searchsorted(switches, times, side="right") - 1, 0, None)
    eye = np.array(directions)[idx]

    omega = coord.head_rate_limit
    changes = [0.0] + [float(t) + coord.head_lag for t in switches[1:]]
    head = np.empty_like(eye)
    arrivals: list[float | None] = [0.0] + [None] * (len(directions) - 1)
    h = directions[0].copy()
    target = 0
    cur = float(times[0]) if len(times) else 0.0
    k = 1

    def advance(h: np.ndarray, until: float) -> np.ndarray:
        g = directions[target]
        theta = angle_between(h, g)
        if theta == 0.0:
            return h
        dt = until - cur
        reach = math.inf if math.isinf(omega) else omega * dt
        if reach >= theta:
            if arrivals[target] is None:
                arrivals[target] = cur if math.isinf(omega) else cur + theta / omega
            return g.copy()
        return _rotate_towards(h, g, theta, reach)

    for n, tn in enumerate(times):
        while k < len(changes) and changes[k] <= tn:
            h = advance(h, changes[k])
            cur = changes[k]
            target = k
            k += 1
            if angle_between(h, directions[target]) == 0.0 and arrivals[target] is None:
                arrivals[target] = cur
        h = advance(h, float(tn))
        cur = float(tn)
        head[n] = h

    eye_arrivals = tuple(
        float(times[np.searchsorted(times, t - DURATION_SLACK)]) if t <= times[-1] else math.inf
        for t in switches
    )
    return EyeHeadTimeline(
        eye=Stream("eye_dir", rate, 3, times, eye),
        head=Stream("head_dir", rate, 3, times, head),
        eye_arrivals=eye_arrivals,
        head_arrivals=tuple(arrivals),
    )


def head_heading_at(
    script: GazeScript, coord: HeadCoordination, scene: SceneGeometry, viewpoint, t: float
) -> np.ndarray:
    """Head direction of `eye_head_timeline` at time `t`, without sampling the whole timeline."""
    if t <= 0:
        return unit(np.asarray(script.events[0].target.point, dtype=float) - np.asarray(viewpoint, dtype=float))
    # a two-sample timeline [0, t]; the head advances exactly between samples
    return eye_head_timeline(script, coord, scene, viewpoint, rate=1.0 / t, end=t).head.values[-1]
