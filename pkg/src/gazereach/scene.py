"""Action labels and tabletop scene geometry."""

import logging
from dataclasses import dataclass
from enum import Enum
from itertools import combinations

import numpy as np

from .config import GeometryConfig
from .errors import GeometryError, LabelError

logger = logging.getLogger(__name__)

Point = tuple[float, float, float]


class Action(str, Enum):
    PLACE = "P"
    GIVE = "G"


class Direction(str, Enum):
    LEFT = "L"
    MIDDLE = "M"
    RIGHT = "R"


@dataclass(frozen=True)
class ActionLabel:
    """One of the six action-configurations, e.g. (Give, Right) == "G_R"."""

    action: Action
    direction: Direction

    @property
    def token(self) -> str:
        return f"{self.action.value}_{self.direction.value}"

    @classmethod
    def from_token(cls, token: str) -> "ActionLabel":
        action, sep, direction = token.strip().partition("_")
        try:
            if not sep:
                raise ValueError(token)
            return cls(Action(action), Direction(direction))
        except ValueError as exc:
            valid = ", ".join(label.token for label in ALL_LABELS)
            raise LabelError(f"unknown label {token!r} (expected one of {valid})") from exc

    def __str__(self) -> str:
        return self.token


ALL_LABELS: tuple[ActionLabel, ...] = tuple(
    ActionLabel(action, direction) for action in (Action.PLACE, Action.GIVE) for direction in Direction
)
LABEL_INDEX = {label: i for i, label in enumerate(ALL_LABELS)}


def _point(values) -> Point:
    x, y, z = (float(v) for v in values)
    return (x, y, z)


@dataclass(frozen=True)
class SceneGeometry:
    """Ball start plus per-direction place markers, partner faces and handover points (meters)."""

    ball_start: Point
    place_markers: dict[Direction, Point]
    partner_faces: dict[Direction, Point]
    handover_points: dict[Direction, Point]

    def __post_init__(self):
        self.validate()

    def __hash__(self) -> int:
        return hash(tuple(self.all_points()))

    @classmethod
    def default(cls, cfg: GeometryConfig | None = None) -> "SceneGeometry":
        cfg = cfg or GeometryConfig()
        bx, by, bz = cfg.ball_start
        offsets = {Direction.LEFT: -cfg.lateral_spacing, Direction.MIDDLE: 0.0, Direction.RIGHT: cfg.lateral_spacing}
        markers = {d: (bx + dx, by + cfg.depth, bz) for d, dx in offsets.items()}
        return cls(
            ball_start=_point(cfg.ball_start),
            place_markers=markers,
            partner_faces={d: (x, y, z + cfg.face_height) for d, (x, y, z) in markers.items()},
            handover_points={d: (x, y, z + cfg.handover_height) for d, (x, y, z) in markers.items()},
        )

    def all_points(self) -> list[Point]:
        points = [self.ball_start]
        for group in (self.place_markers, self.partner_faces, self.handover_points):
            points.extend(group[d] for d in Direction)
        return points

    def validate(self) -> None:
        for name, group in (
            ("place_markers", self.place_markers),
            ("partner_faces", self.partner_faces),
            ("handover_points", self.handover_points),
        ):
            if set(group) != set(Direction):
                raise GeometryError(f"{name} needs exactly the directions L, M, R")
            xs = [group[d][0] for d in Direction]
            if not xs[0] < xs[1] < xs[2]:
                raise GeometryError(f"{name} must be laterally ordered left < middle < right, got x={xs}")
        for a, b in combinations(self.all_points(), 2):
            if np.allclose(a, b, atol=1e-12, rtol=0.0):
                raise GeometryError(f"scene points must be distinct, {a} appears twice")

    def goal(self, label: ActionLabel) -> np.ndarray:
        """End point of the hand for a label: place marker or handover point."""
        group = self.place_markers if label.action is Action.PLACE else self.handover_points
        return np.asarray(group[label.direction], dtype=float)

    def to_header(self) -> dict[str, str]:
        header = {"ball_start": _fmt_point(self.ball_start)}
        for key, group in (
            ("place_marker", self.place_markers),
            ("partner_face", self.partner_faces),
            ("handover_point", self.handover_points),
        ):
            for d in Direction:
                header[f"{key}_{d.value}"] = _fmt_point(group[d])
        return header

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "SceneGeometry":
        """Inverse of `to_header`; raises KeyError/ValueError on missing or bad entries."""
        groups = {}
        for key in ("place_marker", "partner_face", "handover_point"):
            groups[key] = {d: _parse_point(header[f"{key}_{d.value}"]) for d in Direction}
        return cls(
            ball_start=_parse_point(header["ball_start"]),
            place_markers=groups["place_marker"],
            partner_faces=groups["partner_face"],
            handover_points=groups["handover_point"],
        )

    def to_dict(self) -> dict:
        return {
            "ball_start": list(self.ball_start),
            "place_markers": {d.value: list(p) for d, p in self.place_markers.items()},
            "partner_faces": {d.value: list(p) for d, p in self.partner_faces.items()},
            "handover_points": {d.value: list(p) for d, p in self.handover_points.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneGeometry":
        return cls(
            ball_start=_point(data["ball_start"]),
            place_markers={Direction(k): _point(v) for k, v in data["place_markers"].items()},
            partner_faces={Direction(k): _point(v) for k, v in data["partner_faces"].items()},
            handover_points={Direction(k): _point(v) for k, v in data["handover_points"].items()},
        )


def _fmt_point(p: Point) -> str:
    return ",".join(repr(float(v)) for v in p)


def _parse_point(raw: str) -> Point:
    parts = raw.split(",")
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated coordinates, got {raw!r}")
    return _point(parts)


def unit(v: np.ndarray) -> np.ndarray:
    """Normalize a direction vector; zero-length raises GeometryError."""
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        raise GeometryError("zero-length direction (target coincides with viewpoint)")
    return np.asarray(v, dtype=float) / norm
