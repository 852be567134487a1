"""Tests for fixation detection, gaze patterns and eye/head coordination."""

import math

import numpy as np
import pytest

from gazereach.config import DetectionConfig, TimingConfig
from gazereach.errors import CompatibilityError, InputError
from gazereach.gaze import (
    GIVE_PATTERNS,
    FixationTarget,
    GazePattern,
    GazeScript,
    HeadCoordination,
    TargetKind,
    angle_between,
    check_compatible,
    classify_pattern,
    detect_fixations,
    eye_head_timeline,
    generate_script,
    head_heading_at,
    pattern_kinds,
    render_gaze_stream,
    sample_times,
    scene_targets,
)
from gazereach.scene import ALL_LABELS, Action, ActionLabel, unit
from gazereach.streams import Stream

VIEWPOINT = (0.0, -0.25, 0.45)


def _combinations():
    for label in ALL_LABELS:
        patterns = [GazePattern.GOAL_ONLY] if label.action is Action.PLACE else list(GIVE_PATTERNS)
        for pattern in patterns:
            yield label, pattern


def _end(script, timing):
    return float(script.switch_times[-1]) + timing.dwell


# --- fixation detection ---


class TestDetectFixations:
    """Test dispersion-threshold fixation detection."""

    def test_two_plateaus(self):
        """Two steady dwells separated by a jump give two fixations."""
        t = np.arange(60) / 60.0
        x = np.where(t < 0.5, 0.0, 0.3)
        gaze = Stream("gaze_point", 60.0, 3, t, np.column_stack([x, np.zeros(60), np.zeros(60)]))
        fixes = detect_fixations(gaze)
        assert len(fixes) == 2
        assert fixes[0].start == 0.0
        assert fixes[0].end == pytest.approx(29 / 60)
        assert fixes[1].start == pytest.approx(0.5)
        assert np.allclose(fixes[1].centroid, [0.3, 0.0, 0.0])
        assert fixes[0].dispersion == 0.0

    def test_smooth_pursuit_is_not_a_fixation(self):
        """A steadily moving gaze never stays within the threshold long enough."""
        t = np.arange(120) / 120.0
        values = np.column_stack([t, np.zeros(120), np.zeros(120)])
        assert detect_fixations(Stream("gaze_point", 120.0, 3, t, values)) == []

    def test_short_dwell_dropped(self):
        """Dwells shorter than the minimum duration are ignored."""
        t = np.arange(60) / 60.0
        x = np.where((t >= 0.5) & (t < 0.55), 0.3, 0.0)
        gaze = Stream("gaze_point", 60.0, 3, t, np.column_stack([x, np.zeros(60), np.zeros(60)]))
        fixes = detect_fixations(gaze, DetectionConfig(min_duration=0.1))
        assert all(not np.allclose(f.centroid[0], 0.3) for f in fixes)

    def test_wrong_dimension(self):
        """Gaze must be 2D or 3D."""
        gaze = Stream("gaze_point", 60.0, 1, [0.0, 0.1], [0.0, 0.0])
        with pytest.raises(InputError):
            detect_fixations(gaze)


# --- patterns ---


class TestPatterns:
    """Test the gaze state machine and pattern classification."""

    @pytest.mark.parametrize("noise_std", [0.0, 0.002, 0.004])
    def test_every_script_round_trips(self, scene, noise_std):
        """All 15 label/pattern pairs are recovered from their rendered gaze, with or without jitter."""
        timing = TimingConfig()
        rng = np.random.default_rng(17)
        recovered = 0
        for label, pattern in _combinations():
            script = generate_script(label, pattern, timing, scene)
            gaze = render_gaze_stream(script, 60.0, _end(script, timing), noise_std, rng)
            result = classify_pattern(detect_fixations(gaze), scene, label.action)
            assert result.pattern is pattern, (label.token, pattern.value, result.diagnostics)
            recovered += 1
        assert recovered == 15

    def test_script_targets_follow_label(self, scene):
        """Post-pickup targets all point in the label's direction."""
        for label, pattern in _combinations():
            script = generate_script(label, pattern, TimingConfig(), scene)
            assert script.events[0].target.kind is TargetKind.INITIAL_OBJECT
            assert script.events[0].t == 0.0
            for event in script.events[1:]:
                assert event.target.direction is label.direction

    def test_incompatible_pattern(self):
        """Placing cannot look at the partner's face."""
        with pytest.raises(CompatibilityError):
            check_compatible(ActionLabel.from_token("P_L"), GazePattern.FACE_ONLY)
        with pytest.raises(CompatibilityError):
            check_compatible(ActionLabel.from_token("G_R"), GazePattern.GOAL_ONLY)

    def test_switch_count(self):
        """Switching patterns alternate for the requested number of switches."""
        kinds = pattern_kinds(GazePattern.FACE_THEN_HAND, switches=3)
        assert kinds == [
            TargetKind.PARTNER_FACE,
            TargetKind.HANDOVER_POINT,
            TargetKind.PARTNER_FACE,
            TargetKind.HANDOVER_POINT,
        ]

    def test_place_with_face_unclassified(self, scene):
        """A face fixation during placing leaves the pattern unclassified."""
        label = ActionLabel.from_token("G_M")
        script = generate_script(label, GazePattern.FACE_ONLY, TimingConfig(), scene)
        gaze = render_gaze_stream(script, 60.0, _end(script, TimingConfig()))
        result = classify_pattern(detect_fixations(gaze), scene, Action.PLACE)
        assert result.pattern is None
        assert result.diagnostics

    def test_far_fixation_reported(self, scene):
        """Fixations away from every target are listed as unassigned."""
        t = np.arange(30) / 60.0
        gaze = Stream("gaze_point", 60.0, 3, t, np.tile([5.0, 5.0, 5.0], (30, 1)))
        result = classify_pattern(detect_fixations(gaze), scene, Action.GIVE)
        assert result.unassigned == [0]
        assert result.pattern is None

    def test_no_fixations(self, scene):
        """Classification needs at least one fixation."""
        with pytest.raises(InputError):
            classify_pattern([], scene, Action.GIVE)

    def test_script_dict_round_trip(self, scene):
        """Scripts survive to_dict/from_dict."""
        script = generate_script(ActionLabel.from_token("G_L"), GazePattern.HAND_THEN_FACE, TimingConfig(), scene)
        assert GazeScript.from_dict(script.to_dict()) == script

    def test_ten_scene_targets(self, scene):
        """Initial object plus three of each target kind."""
        targets = scene_targets(scene)
        assert len(targets) == 10
        assert len({t.point for t in targets}) == 10
        assert FixationTarget.from_dict(targets[4].to_dict()) == targets[4]

    def test_sample_times(self):
        """Inclusive grid rounded to nanoseconds."""
        times = sample_times(60.0, 1.0)
        assert len(times) == 61
        assert times[-1] == 1.0
        assert times[1] == round(1 / 60, 9)


# --- eye/head coordination ---


class TestEyeHead:
    """Test head lag and rate-limited head rotation."""

    def test_head_never_leads_the_eye(self, scene):
        """Over 100 random scripts the head reaches a target no earlier than switch + lag."""
        rng = np.random.default_rng(0)
        combos = list(_combinations())
        for _ in range(100):
            label, pattern = combos[int(rng.integers(len(combos)))]
            timing = TimingConfig(
                saccade_time=float(rng.uniform(0.1, 0.5)),
                dwell=float(rng.uniform(0.2, 0.6)),
                head_lag=float(rng.uniform(0.0, 0.3)),
                head_rate_limit=float(rng.uniform(1.0, 6.0)),
            )
            script = generate_script(label, pattern, timing, scene)
            timeline = eye_head_timeline(
                script, HeadCoordination.from_timing(timing), scene, VIEWPOINT, 120.0, _end(script, timing)
            )
            for k, switch in enumerate(script.switch_times[1:], 1):
                assert timeline.eye_arrivals[k] >= switch - 1e-9
                arrival = timeline.head_arrivals[k]
                if arrival is not None:
                    assert arrival >= switch + timing.head_lag - 1e-9
                    assert arrival >= timeline.eye_arrivals[k] - 1.0 / 120.0

    def test_eye_jumps_at_switch(self, scene):
        """Eye direction equals the current target's direction at every sample."""
        timing = TimingConfig()
        script = generate_script(ActionLabel.from_token("G_R"), GazePattern.HAND_THEN_FACE, timing, scene)
        timeline = eye_head_timeline(script, HeadCoordination.from_timing(timing), scene, VIEWPOINT, 120.0, 1.5)
        for t, eye in zip(timeline.eye.times, timeline.eye.values):
            target = script.target_at(float(t))
            assert np.allclose(eye, unit(np.asarray(target.point) - np.asarray(VIEWPOINT)))

    def test_rate_limited_rotation(self, scene):
        """After the lag the head closes the angle at exactly the rate limit."""
        timing = TimingConfig(head_lag=0.15, head_rate_limit=2.0)
        script = generate_script(ActionLabel.from_token("P_L"), GazePattern.GOAL_ONLY, timing, scene)
        timeline = eye_head_timeline(script, HeadCoordination.from_timing(timing), scene, VIEWPOINT, 120.0, 1.5)
        start = unit(np.asarray(script.events[0].target.point) - np.asarray(VIEWPOINT))
        goal = unit(np.asarray(script.events[1].target.point) - np.asarray(VIEWPOINT))
        theta0 = angle_between(start, goal)
        turn_start = timing.saccade_time + timing.head_lag
        for t, head in zip(timeline.head.times, timeline.head.values):
            expected = theta0 - 2.0 * max(float(t) - turn_start, 0.0)
            assert angle_between(head, goal) == pytest.approx(max(expected, 0.0), abs=1e-6)
            assert angle_between(head, start) + angle_between(head, goal) == pytest.approx(theta0, abs=1e-6)
        assert timeline.head_arrivals[1] == pytest.approx(turn_start + theta0 / 2.0)

    def test_unlimited_rate_snaps(self, scene):
        """With an infinite rate the head snaps to the target at switch + lag."""
        timing = TimingConfig(head_lag=0.125, head_rate_limit=math.inf)
        script = generate_script(ActionLabel.from_token("P_M"), GazePattern.GOAL_ONLY, timing, scene)
        timeline = eye_head_timeline(script, HeadCoordination.from_timing(timing), scene, VIEWPOINT, 120.0, 1.0)
        start = unit(np.asarray(script.events[0].target.point) - np.asarray(VIEWPOINT))
        goal = unit(np.asarray(script.events[1].target.point) - np.asarray(VIEWPOINT))
        turn = timing.saccade_time + timing.head_lag
        for t, head in zip(timeline.head.times, timeline.head.values):
            assert np.allclose(head, goal if t >= turn else start)
        assert timeline.head_arrivals[1] == pytest.approx(turn)

    def test_heading_at_matches_timeline(self, scene):
        """The head direction at any time equals the sampled timeline there."""
        timing = TimingConfig()
        coord = HeadCoordination.from_timing(timing)
        script = generate_script(ActionLabel.from_token("G_R"), GazePattern.HAND_THEN_FACE, timing, scene)
        timeline = eye_head_timeline(script, coord, scene, VIEWPOINT, 120.0, 1.5)
        for n in range(0, len(timeline.head), 7):
            t = float(timeline.head.times[n])
            assert np.allclose(head_heading_at(script, coord, scene, VIEWPOINT, t), timeline.head.values[n], atol=1e-9)

    def test_negative_lag_rejected(self):
        """Head lag must be non-negative."""
        with pytest.raises(InputError):
            HeadCoordination(-0.1, 1.0)

    def test_unlimited_rate_without_lag_follows_eye(self, scene):
        """No lag and no rate limit make the head stream equal the eye stream."""
        timing = TimingConfig(head_lag=0.0, head_rate_limit=math.inf)
        script = generate_script(ActionLabel.from_token("G_L"), GazePattern.FACE_THEN_HAND, timing, scene)
        timeline = eye_head_timeline(script, HeadCoordination.from_timing(timing), scene, VIEWPOINT, 120.0, 1.5)
        assert np.array_equal(timeline.head.values, timeline.eye.values)
