"""Command-line entry point: synthesize, validate, align, fit, reconstruct, gaze, eval, classify."""

import argparse
import json
import logging
import sys
from pathlib import Path

from .anticipate import Gate, classify, make_priors, observe, perceive, run_gated_eval
from .config import RunConfig, config_dump, load_run_config, provenance
from .dataset import load_dataset, parse_trial, save_dataset, synthesize_dataset, validate_dataset
from .errors import GazeReachError, StorageError
from .gaze import GazePattern, HeadCoordination, eye_head_timeline, generate_script
from .scene import ALL_LABELS, ActionLabel, SceneGeometry
from .streamsync import AlignPolicy, align
from .trajgmm import fit_action_models, load_bundle, save_bundle
from .trajgmr import reconstruct_action

logger = logging.getLogger(__name__)

RUN_CONFIG_NAME = "run_config.json"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _header(config: RunConfig) -> list[str]:
    return [f"# {k}={v}" for k, v in provenance(config).items()]


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def _write_json(path: Path, data: dict) -> Path:
    return _write(path, json.dumps(data, indent=2, sort_keys=False) + "\n")


def _record_config(directory: Path, config: RunConfig) -> None:
    """Resolved config next to every output."""
    _write_json(directory / RUN_CONFIG_NAME, {"provenance": provenance(config), "config": config_dump(config)})


def _read_trial(path: str):
    try:
        return parse_trial(Path(path).read_bytes())
    except OSError as exc:
        raise StorageError(f"cannot read trial file {path}: {exc}") from exc


def _scene(config: RunConfig) -> SceneGeometry:
    return SceneGeometry.default(config.geometry)


# --- commands ---


def cmd_synth(args, config: RunConfig) -> int:
    seed = config.test_seed if args.test else config.seed
    counts = (config.test_counts or config.counts) if args.test else config.counts
    # test sets continue the trial-id range so they never collide with training ids
    first_id = 1 + sum(config.counts.values()) if args.test else 1
    dataset = synthesize_dataset(
        _scene(config),
        counts,
        config.noise,
        seed,
        timing=config.timing,
        rates=config.rates,
        pattern_weights=config.pattern_weights,
        viewpoint=config.geometry.viewpoint,
        first_trial_id=first_id,
    )
    out = Path(args.out)
    manifest = save_dataset(dataset, out, provenance(config))
    _record_config(out, config)
    print(f"{len(dataset)} trials written to {out} ({manifest.name})")
    return 0


def cmd_validate(args, config: RunConfig) -> int:
    report = validate_dataset(load_dataset(args.dataset, config.em.workers), training=args.training)
    print(json.dumps({"provenance": provenance(config), **report.to_dict()}, indent=2))
    return 0


def cmd_align(args, config: RunConfig) -> int:
    trial = _read_trial(args.trial)
    master = trial.streams.get(config.master_stream)
    rate = args.master_rate or (master.nominal_rate if master is not None else config.rates.hand)
    policy = AlignPolicy(args.policy) if args.policy else None
    bundle = align(trial.streams, rate, policy)
    out = Path(args.out)
    header = _header(config) + [f"# trial_id={trial.trial_id}", f"# master_rate={rate!r}"]
    header += [f"# max_alignment_error_{name}={err!r}" for name, err in bundle.max_alignment_error.items()]
    _write(out, bundle.to_csv(header))
    _record_config(out.parent, config)
    print(f"{len(bundle)} aligned samples at {rate:g} Hz written to {out}")
    return 0


def cmd_fit(args, config: RunConfig) -> int:
    dataset = load_dataset(args.dataset, config.em.workers)
    bundle = fit_action_models(dataset, config.em, config.seed, config.detection.speed_threshold)
    bundle.meta.update(provenance(config))
    out = Path(args.out)
    save_bundle(bundle, out)
    _record_config(out.parent, config)
    models = bundle.all_models()
    converged = sum(m.fit_meta.converged for m in models)
    print(f"{len(models)} models (K={config.em.n_components}) written to {out}, {converged} converged")
    return 0


def cmd_reconstruct(args, config: RunConfig) -> int:
    bundle = load_bundle(args.bundle)
    bundle.check_coverage()
    out = Path(args.out)
    for label in ALL_LABELS:
        trajectory = reconstruct_action(bundle[label], args.points)
        header = _header(config) + [f"# label={label.token}", "# covariance=moment-matched"]
        _write(out / f"reconstruct_{label.token}.csv", trajectory.to_csv(header))
    _record_config(out, config)
    print(f"{len(ALL_LABELS)} reconstructions written to {out}")
    return 0


def cmd_gaze(args, config: RunConfig) -> int:
    scene = _scene(config)
    label = ActionLabel.from_token(args.label)
    pattern = GazePattern(args.pattern)
    script = generate_script(label, pattern, config.timing, scene)
    end = float(script.switch_times[-1]) + config.timing.dwell + config.timing.head_lag + 1.0
    timeline = eye_head_timeline(
        script, HeadCoordination.from_timing(config.timing), scene, config.geometry.viewpoint, config.rates.head, end
    )
    out = Path(args.out)
    stem = f"gaze_{label.token}_{pattern.value}"
    _write_json(out / f"{stem}.json", {"provenance": provenance(config), **script.to_dict()})
    lines = _header(config) + ["t,eye_x,eye_y,eye_z,head_x,head_y,head_z"]
    for i, t in enumerate(timeline.eye.times):
        values = [t, *timeline.eye.values[i], *timeline.head.values[i]]
        lines.append(",".join(repr(float(v)) for v in values))
    _write(out / f"{stem}_timeline.csv", "\n".join(lines) + "\n")
    _record_config(out, config)
    print(f"{len(script.events)} gaze events, {len(timeline.eye)} timeline samples written to {out}")
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    test = load_dataset(args.dataset, config.em.workers)
    bundle = load_bundle(args.bundle)
    report = run_gated_eval(
        test,
        bundle,
        config.eval.gates,
        config.test_seed,
        config.eval,
        config.detection,
        config.pattern_weights,
        config.timing.switches,
        config.geometry.viewpoint,
        workers=config.em.workers,
        timing=config.timing,
    )
    report.meta.update(provenance(config))
    out = Path(args.out)
    _write_json(out / "report.json", report.to_dict())
    _write(out / "report_rows.csv", report.rows_csv(_header(config)))
    _record_config(out, config)
    print(report.summary_table())
    return 0


def cmd_classify(args, config: RunConfig) -> int:
    trial = _read_trial(args.trial)
    bundle = load_bundle(args.bundle)
    gate = Gate.parse(args.gate)
    view = perceive(trial, config.test_seed, config.eval, config.detection, config.geometry.viewpoint)
    obs = observe(view, gate, config.eval, config.eval.blur)
    priors = make_priors(config.eval.prior_mode, bundle.training_counts)
    if obs.empty:
        result = {"probs": {label.token: p for label, p in priors.items()}, "argmax": None, "cues": []}
    else:
        posterior = classify(
            obs, bundle, priors, config.eval, config.pattern_weights, config.timing.switches, config.timing
        )
        result = {**posterior.to_dict(), "cues": obs.cues}
    payload = {"provenance": provenance(config), "trial_id": trial.trial_id, "gate": gate.value, **result}
    print(json.dumps(payload, indent=2))
    return 0


# --- parser ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazereach", description=__doc__)
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, dotted keys for sections (repeatable)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", help="six comma-separated counts in order P_L,P_M,P_R,G_L,G_M,G_R")
    p.add_argument("--test", action="store_true", help="use test_seed/test_counts and ids after the training range")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("validate", help="validate a dataset directory")
    p.add_argument("dataset")
    p.add_argument("--training", action="store_true", help="missing labels count as violations")
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("align", help="align the streams of one trial file")
    p.add_argument("trial")
    p.add_argument("--out", required=True)
    p.add_argument("--master-rate", type=float)
    p.add_argument("--policy", choices=[policy.value for policy in AlignPolicy])
    p.set_defaults(handler=cmd_align)

    p = sub.add_parser("fit", help="fit per-label trajectory mixtures")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--components", type=int)
    p.add_argument("--joint", action="store_true", help="one (t, x, y, z) model per label")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("reconstruct", help="GMR mean trajectories and envelopes")
    p.add_argument("bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=100)
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("gaze", help="gaze script and eye/head timeline for one label and pattern")
    p.add_argument("--label", required=True, choices=[label.token for label in ALL_LABELS])
    p.add_argument("--pattern", required=True, choices=[g.value for g in GazePattern])
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gaze)

    p = sub.add_parser("eval", help="gated evaluation of a test dataset")
    p.add_argument("dataset")
    p.add_argument("bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--gates", help="comma-separated gates, e.g. G,GH,GHA,GHA+")
    p.add_argument("--prior", choices=["empirical", "uniform"])
    p.add_argument("--blur", help="comma-separated cues to hide: eyes, head")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("classify", help="posterior for one trial file at one gate")
    p.add_argument("trial")
    p.add_argument("bundle")
    p.add_argument("--gate", default="GHA")
    p.set_defaults(handler=cmd_classify)
    return parser


def _flag_overrides(args) -> list[str]:
    """Convenience flags expressed as config overrides."""
    overrides = []
    if getattr(args, "counts", None):
        overrides.append(f"{'test_counts' if args.test else 'counts'}={args.counts}")
    if getattr(args, "components", None) is not None:
        overrides.append(f"em.n_components={args.components}")
    if getattr(args, "joint", False):
        overrides.append("em.joint=true")
    if getattr(args, "gates", None):
        gates = [Gate.parse(g).value for g in args.gates.split(",") if g.strip()]
        overrides.append(f"eval.gates={json.dumps(gates)}")
    if getattr(args, "prior", None):
        overrides.append(f"eval.prior_mode={args.prior}")
    if getattr(args, "blur", None) is not None:
        blur = [b.strip() for b in args.blur.split(",") if b.strip()]
        overrides.append(f"eval.blur={json.dumps(blur)}")
    return overrides


def _error_line(exc: GazeReachError) -> str:
    return json.dumps({"error": type(exc).__name__, "exit_code": exc.exit_code, "message": str(exc)})


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stderr, force=True)
    try:
        config = load_run_config(args.config, args.overrides + _flag_overrides(args))
        return args.handler(args, config)
    except GazeReachError as exc:
        logger.debug("command failed", exc_info=True)
        print(_error_line(exc), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
