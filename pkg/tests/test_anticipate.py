"""Tests for the anticipation classifier and the gated evaluation."""

import math

import numpy as np
import pytest

from gazereach.anticipate import (
    CHANCE,
    Gate,
    Observation,
    classify,
    detect_events,
    gate_cut,
    gaze_loglik,
    head_loglik,
    make_priors,
    observe,
    perceive,
    posterior_from_log,
    run_gated_eval,
    trial_events,
)
from gazereach.config import RECORDED_COUNTS, EvalConfig, NoiseSpec, TimingConfig
from gazereach.dataset import synthesize_dataset
from gazereach.errors import InputError, LeakageError
from gazereach.gaze import (
    FixationTarget,
    GazePattern,
    HeadCoordination,
    TargetKind,
    generate_script,
    head_heading_at,
)
from gazereach.scene import ALL_LABELS, ActionLabel, Direction, unit
from gazereach.streams import Trajectory

UNIFORM = {label: 1.0 / 6.0 for label in ALL_LABELS}
VIEWPOINT = (0.0, -0.25, 0.45)


def _label(token):
    return ActionLabel.from_token(token)


def _initial(scene):
    return FixationTarget.of(TargetKind.INITIAL_OBJECT, None, scene)


def _arm_prefix(trial, cut=None):
    onset, end = trial.events["arm_onset"], trial.events["arm_end"]
    cut = end if cut is None else cut
    hand = trial.hand
    mask = (hand.times >= onset - 1e-9) & (hand.times <= cut + 1e-9)
    return Trajectory(hand.times[mask] - onset, hand.values[mask])


@pytest.fixture(scope="module")
def clean_test_set(scene):
    """Noise-free trials disjoint from the clean training ids."""
    counts = {label.token: 2 for label in ALL_LABELS}
    return synthesize_dataset(scene, counts, NoiseSpec.zero(), seed=41, first_trial_id=1001)


@pytest.fixture(scope="module")
def noisy_test_set(scene):
    """Noisy trials with ids after the noisy training set."""
    counts = {label.token: 3 for label in ALL_LABELS}
    return synthesize_dataset(scene, counts, NoiseSpec(), seed=43, first_trial_id=121)


# --- priors and posteriors ---


class TestPriors:
    """Test label priors and posterior normalization."""

    def test_empirical_from_tally(self):
        """Priors follow the training counts."""
        counts = {_label(k): v for k, v in RECORDED_COUNTS.items()}
        priors = make_priors("empirical", counts)
        assert priors[_label("G_R")] == pytest.approx(24 / 120)
        assert priors[_label("P_R")] == pytest.approx(17 / 120)
        assert sum(priors.values()) == pytest.approx(1.0)

    def test_uniform(self):
        """Uniform priors are 1/6 each."""
        assert make_priors("uniform") == UNIFORM

    def test_no_counts_falls_back_to_uniform(self):
        """Empirical priors without counts are uniform."""
        assert make_priors("empirical", {}) == UNIFORM

    def test_unknown_mode(self):
        """Only empirical and uniform exist."""
        with pytest.raises(InputError):
            make_priors("flat")

    def test_posterior_sums_to_one(self):
        """Normalized posteriors sum to one."""
        scores = {label: float(i) for i, label in enumerate(ALL_LABELS)}
        assert sum(posterior_from_log(scores).values()) == pytest.approx(1.0)

    def test_constant_shift_invariance(self):
        """Adding a constant to every log score changes nothing."""
        scores = {label: -0.5 * i for i, label in enumerate(ALL_LABELS)}
        shifted = {label: v - 700.0 for label, v in scores.items()}
        a, b = posterior_from_log(scores), posterior_from_log(shifted)
        for label in ALL_LABELS:
            assert b[label] == pytest.approx(a[label], rel=1e-12)


# --- cue likelihoods ---


class TestGazeLikelihood:
    """Test prefix matching of gaze sequences."""

    def test_place_marker_matches_place(self, scene):
        """Initial object then the left marker is explained by P_L only."""
        targets = [_initial(scene), FixationTarget.of(TargetKind.PLACE_MARKER, Direction.LEFT, scene)]
        assert gaze_loglik(targets, _label("P_L")) == pytest.approx(math.log(0.9 + 0.1 / 6))
        for token in ("P_M", "P_R", "G_L", "G_M", "G_R"):
            assert gaze_loglik(targets, _label(token)) == pytest.approx(math.log(0.1 / 6))

    def test_give_patterns_are_mixed(self, scene):
        """A first face fixation matches FaceOnly and FaceThenHand."""
        targets = [_initial(scene), FixationTarget.of(TargetKind.PARTNER_FACE, Direction.MIDDLE, scene)]
        assert gaze_loglik(targets, _label("G_M")) == pytest.approx(math.log(0.9 * 0.5 + 0.1 / 6))

    def test_no_post_pickup_fixation_is_uninformative(self, scene):
        """Only the initial object matches every label equally."""
        values = {gaze_loglik([_initial(scene)], label) for label in ALL_LABELS}
        assert len(values) == 1


class TestHeadLikelihood:
    """Test head headings against the rate-limited turn."""

    def test_mid_turn_heading_favors_give(self, scene):
        """0.4 s after the saccade the head is still turning up toward the handover point."""
        timing = TimingConfig()
        script = generate_script(_label("G_M"), GazePattern.HAND_ONLY, timing, scene)
        coord = HeadCoordination.from_timing(timing)
        heading = head_heading_at(script, coord, scene, VIEWPOINT, timing.saccade_time + 0.4)
        give = head_loglik(heading, _label("G_M"), scene, VIEWPOINT, elapsed=0.4)
        place = head_loglik(heading, _label("P_M"), scene, VIEWPOINT, elapsed=0.4)
        assert give > place
        for token in ("P_L", "P_R", "G_L", "G_R"):
            assert give > head_loglik(heading, _label(token), scene, VIEWPOINT, elapsed=0.4)

    def test_resting_heading_without_elapsed_time(self, scene):
        """Without an elapsed time a heading straight at the marker matches the place label."""
        heading = unit(np.asarray(scene.place_markers[Direction.MIDDLE]) - np.asarray(VIEWPOINT))
        place = head_loglik(heading, _label("P_M"), scene, VIEWPOINT)
        assert place == pytest.approx(-math.log(0.15 * math.sqrt(2 * math.pi)))

    def test_head_reading_at_gh_names_the_label(self, clean_test_set, clean_bundle):
        """A noise-free head reading at the GH cut scores highest under the true label."""
        params = EvalConfig(observer_head_std=0.0)
        for trial in clean_test_set.trials:
            obs = observe(perceive(trial, seed=0, params=params), Gate.GH, params)
            assert obs.head_elapsed == pytest.approx(params.head_glimpse + TimingConfig().head_lag, abs=1e-6)
            table = classify(obs, clean_bundle, UNIFORM, params).log_likelihoods["head"]
            assert max(table, key=table.get) == trial.label, trial.trial_id


class TestClassify:
    """Test posterior fusion of cues."""

    def test_place_marker_observation(self, scene, clean_bundle):
        """Gaze on the left marker gives P_L the largest posterior."""
        targets = (_initial(scene), FixationTarget.of(TargetKind.PLACE_MARKER, Direction.LEFT, scene))
        posterior = classify(Observation(scene, VIEWPOINT, gaze_targets=targets), clean_bundle, UNIFORM)
        assert posterior.argmax == _label("P_L")
        assert posterior.probs[_label("P_L")] == pytest.approx(0.9 + 0.1 / 6)
        assert sum(posterior.probs.values()) == pytest.approx(1.0)
        assert set(posterior.log_likelihoods) == {"gaze"}

    def test_uninformative_gaze_returns_priors(self, scene, clean_bundle):
        """Before the goal saccade the posterior equals the prior."""
        priors = make_priors("empirical", {_label(k): v for k, v in RECORDED_COUNTS.items()})
        obs = Observation(scene, VIEWPOINT, gaze_targets=(_initial(scene),), gate=Gate.PRE)
        posterior = classify(obs, clean_bundle, priors)
        for label in ALL_LABELS:
            assert posterior.probs[label] == pytest.approx(priors[label], rel=1e-12)

    def test_head_toward_marker(self, scene, clean_bundle):
        """A head heading at the right marker favors P_R."""
        heading = unit(np.asarray(scene.place_markers[Direction.RIGHT]) - np.asarray(VIEWPOINT))
        obs = Observation(scene, VIEWPOINT, head_direction=heading)
        assert classify(obs, clean_bundle, UNIFORM).argmax == _label("P_R")

    def test_full_arm_recovers_label(self, clean_dataset, clean_bundle):
        """The complete reach identifies every label."""
        for trial in clean_dataset.trials:
            obs = Observation(trial.scene, VIEWPOINT, arm_prefix=_arm_prefix(trial))
            assert classify(obs, clean_bundle, UNIFORM).argmax == trial.label

    def test_empty_observation(self, scene, clean_bundle):
        """No cue at all is an input error."""
        with pytest.raises(InputError):
            classify(Observation(scene), clean_bundle, UNIFORM)

    def test_priors_must_sum_to_one(self, scene, clean_bundle):
        """Priors are checked."""
        obs = Observation(scene, gaze_targets=(_initial(scene),))
        with pytest.raises(InputError):
            classify(obs, clean_bundle, {label: 0.5 for label in ALL_LABELS})


# --- events and gates ---


class TestGates:
    """Test event detection and gate cuts."""

    def test_parse(self):
        """Gate names, including the GHAplus alias."""
        assert Gate.parse("GHAplus") is Gate.GHA_PLUS
        assert Gate.parse("GHA+") is Gate.GHA_PLUS
        assert Gate.parse("G") is Gate.G
        with pytest.raises(InputError):
            Gate.parse("H")

    def test_cues_per_gate(self):
        """Head from GH on, arm from GHA on."""
        assert [g.shows_head for g in Gate] == [False, False, True, True, True]
        assert [g.shows_arm for g in Gate] == [False, False, False, True, True]

    def test_cut_times(self):
        """Cuts sit at the cue event plus the glimpse."""
        events = {"saccade": 0.3, "head_onset": 0.45, "arm_onset": 0.55, "arm_end": 1.75, "end": 2.05}
        assert gate_cut(Gate.PRE, events) == pytest.approx(0.25)
        assert gate_cut(Gate.G, events) == pytest.approx(0.45)
        assert gate_cut(Gate.GH, events) == pytest.approx(0.70)
        assert gate_cut(Gate.GHA, events) == pytest.approx(0.80)
        assert gate_cut(Gate.GHA_PLUS, events) == pytest.approx(2.05)

    def test_detected_events_match_recorded(self, clean_dataset):
        """Stream-based events land close to the generator's."""
        for trial in clean_dataset.trials[:6]:
            detected = detect_events(trial)
            assert abs(detected["saccade"] - trial.events["saccade"]) <= 1 / 60 + 1e-9
            assert 0.0 <= detected["head_onset"] - trial.events["head_onset"] <= 0.1
            assert abs(detected["arm_onset"] - trial.events["arm_onset"]) <= 0.2
            assert detected["end"] == pytest.approx(trial.events["end"])

    def test_recorded_events_preferred(self, clean_dataset):
        """Complete recorded events are used as they are."""
        trial = clean_dataset.trials[0]
        assert trial_events(trial) == trial.events

    def test_observe_respects_gates_and_blur(self, clean_dataset):
        """Each gate adds its cue; blurring removes one."""
        view = perceive(clean_dataset.trials[0], seed=0)
        assert observe(view, Gate.G).cues == ["gaze"]
        assert observe(view, Gate.GH).cues == ["gaze", "head"]
        assert observe(view, Gate.GHA).cues == ["gaze", "head", "arm"]
        assert observe(view, Gate.GHA, blur=("eyes",)).cues == ["head", "arm"]
        assert observe(view, Gate.GH, blur=("eyes", "head")).empty

    def test_arm_prefix_grows(self, clean_dataset):
        """Later gates show a longer arm prefix starting at arm onset."""
        view = perceive(clean_dataset.trials[1], seed=0)
        short = observe(view, Gate.GHA).arm_prefix
        full = observe(view, Gate.GHA_PLUS).arm_prefix
        assert short.times[0] == pytest.approx(0.0, abs=1e-9)
        assert short.times[-1] <= EvalConfig().arm_glimpse + 1e-9
        assert len(full) > len(short)

    def test_perception_is_seeded(self, clean_dataset):
        """Same seed and trial give the same perceived targets."""
        trial = clean_dataset.trials[2]
        a, b = perceive(trial, seed=5), perceive(trial, seed=5)
        assert a.assigned == b.assigned
        assert np.array_equal(a.head_noise, b.head_noise)


# --- gated evaluation ---


class TestGatedEval:
    """Test the gated evaluation harness."""

    def test_full_information_is_perfect(self, clean_test_set, clean_bundle):
        """At GHA+ every noise-free test trial is classified correctly."""
        report = run_gated_eval(clean_test_set, clean_bundle, gates=["GHA+"])
        assert report.gate(Gate.GHA_PLUS).accuracy == 1.0
        assert report.gate(Gate.GHA_PLUS).n == len(clean_test_set)

    def test_chance_baselines(self, clean_test_set, clean_bundle):
        """Reports carry 1/6, 1/3 and 1/2."""
        report = run_gated_eval(clean_test_set, clean_bundle, gates=["GHA+"])
        assert report.chance == CHANCE
        assert report.chance["overall"] == pytest.approx(0.1667, abs=1e-4)
        assert report.chance["direction"] == pytest.approx(0.3333, abs=1e-4)
        assert report.chance["action"] == 0.5

    def test_single_gate_skips_anova(self, clean_test_set, clean_bundle):
        """One gate is a degenerate ANOVA design."""
        report = run_gated_eval(clean_test_set, clean_bundle, gates=["GHA+"])
        assert report.anova is None
        assert report.anova_note

    def test_marginals_not_below_overall(self, noisy_test_set, noisy_bundle):
        """Direction and action accuracies are at least the overall accuracy."""
        report = run_gated_eval(noisy_test_set, noisy_bundle, gates=["PRE", "G", "GH", "GHA", "GHA+"], seed=1)
        assert [g.gate for g in report.gates] == list(Gate)
        for g in report.gates:
            assert g.direction_accuracy >= g.accuracy
            assert g.action_accuracy >= g.accuracy
            assert sum(map(sum, g.confusion)) == len(noisy_test_set)
        assert report.anova is not None
        assert report.anova.dof["gate"][0] == 4

    def test_pre_gate_predicts_prior_mode(self, noisy_test_set, noisy_bundle):
        """Before the goal saccade every trial gets the same prediction."""
        report = run_gated_eval(noisy_test_set, noisy_bundle, gates=["PRE"], params=EvalConfig(prior_mode="uniform"))
        predicted = {r.predicted for r in report.trials if r.cues in ((), ("gaze",))}
        assert len(predicted) <= 2

    def test_workers_do_not_change_results(self, noisy_test_set, noisy_bundle):
        """Threaded evaluation gives the same rows."""
        one = run_gated_eval(noisy_test_set, noisy_bundle, gates=["G", "GHA"], seed=3, workers=1)
        three = run_gated_eval(noisy_test_set, noisy_bundle, gates=["G", "GHA"], seed=3, workers=3)
        assert one.rows_csv() == three.rows_csv()

    def test_head_gate_keeps_gaze_accuracy(self, clean_test_set, clean_bundle):
        """Adding the head at GH does not undo what the gaze got right at G."""
        report = run_gated_eval(clean_test_set, clean_bundle, gates=["G", "GH"])
        assert report.gate(Gate.GH).accuracy >= report.gate(Gate.G).accuracy

    def test_leakage(self, clean_dataset, clean_bundle):
        """Evaluating on training trials is refused."""
        with pytest.raises(LeakageError):
            run_gated_eval(clean_dataset, clean_bundle, gates=["G"])

    def test_blurred_eyes_lower_gaze_gate(self, noisy_test_set, noisy_bundle):
        """With the eyes blurred gate G carries no cue and falls back to the prior."""
        params = EvalConfig(blur=("eyes",))
        report = run_gated_eval(noisy_test_set, noisy_bundle, gates=["G", "GHA+"], params=params)
        assert all(r.cues == () for r in report.trials if r.gate is Gate.G)
        assert report.blur == ("eyes",)
        assert report.gate(Gate.GHA_PLUS).accuracy >= report.gate(Gate.G).accuracy

    def test_report_serialization(self, noisy_test_set, noisy_bundle):
        """JSON dict and CSV rows cover every gate and trial."""
        report = run_gated_eval(noisy_test_set, noisy_bundle, gates=["G", "GH"])
        data = report.to_dict()
        assert [g["gate"] for g in data["gates"]] == ["G", "GH"]
        assert len(report.rows_csv().splitlines()) == 1 + 2 * len(noisy_test_set)
        assert "chance" in report.summary_table()

    @pytest.mark.slow
    def test_ensemble_accuracy_grows_with_gates(self, scene, noisy_bundle):
        """Over 500 trials accuracy rises from G to GHA+ and gaze alone finds the direction."""
        counts = {"P_L": 83, "P_M": 84, "P_R": 83, "G_L": 83, "G_M": 84, "G_R": 83}
        test = synthesize_dataset(scene, counts, NoiseSpec(), seed=2024, first_trial_id=121)
        report = run_gated_eval(test, noisy_bundle, gates=["G", "GH", "GHA", "GHA+"], seed=2024, workers=4)
        accuracy = [report.gate(g).accuracy for g in (Gate.G, Gate.GH, Gate.GHA, Gate.GHA_PLUS)]
        for earlier, later in zip(accuracy, accuracy[1:]):
            assert later >= earlier - 0.01
        assert accuracy[-1] >= accuracy[0]
        assert report.gate(Gate.G).direction_accuracy >= 0.80
