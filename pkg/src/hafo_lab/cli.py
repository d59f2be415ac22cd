"""Command line front end.

Verbs: ``train``, ``eval-force``, ``push-sweep``, ``suspension``,
``spring-compare``, ``replay``, ``export-motions``. Every verb accepts
``--config``, ``--seed``, ``--out``, ``--threads`` and ``--log-level``;
the ``HAFO_LAB_THREADS`` environment variable overrides ``--threads``.

Usage and configuration problems exit with code 2 and print a one-line
machine-readable error object to stdout; runtime failures exit with code
1. Each verb writes a ``config.yaml`` snapshot into its output directory
holding every resolved setting needed to re-run it bit-identically in
single-worker mode.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from hafo_lab.configio import (
    SCHEMA_VERSION,
    ConfigError,
    check_schema_version,
    dump_yaml,
    load_yaml,
)
from hafo_lab.env import DrRanges, VecEnv, scenario_preset
from hafo_lab.forces import LiftProfile
from hafo_lab.harness import (
    ExperimentReport,
    evaluate_force_tiers,
    load_trace,
    polar_rows,
    push_sweep,
    record_trace,
    replay_trace,
    resolve_tiers,
    save_trace,
    scenario_from_dict,
    scenario_to_dict,
    spring_compare,
    suspension_report,
    write_csv,
)
from hafo_lab.motions import (
    Curriculum,
    CurriculumConfig,
    DatasetConfig,
    builtin_clips,
    generate_dataset,
    save_clip,
)
from hafo_lab.policy import DESK_HIDDEN, load_bundle, make_bundle
from hafo_lab.ppo import TRAIN_MODES, PpoConfig, Trainer
from hafo_lab.robot import build_model

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

THREADS_ENV_VAR = "HAFO_LAB_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

log = logging.getLogger("hafo_lab")


# --------------------------------------------------------------------------
# shared plumbing


def resolve_threads(cli_value: int | None,
                    environ: dict | None = None) -> int | None:
    """Thread count to use: the environment variable wins over the flag."""
    env = os.environ if environ is None else environ
    raw = env.get(THREADS_ENV_VAR)
    if raw is not None and raw.strip():
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(THREADS_ENV_VAR,
                              f"must be a positive integer, got {raw!r}") \
                from None
        if value <= 0:
            raise ConfigError(THREADS_ENV_VAR,
                              f"must be a positive integer, got {raw!r}")
        return value
    if cli_value is None:
        return None
    if cli_value <= 0:
        raise ConfigError("--threads", "must be a positive integer")
    return int(cli_value)


def apply_threads(n: int | None) -> None:
    """Pin BLAS/OpenMP pools; a best-effort cap, applied before heavy math."""
    if n is None:
        return
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass


def emit_error(kind: str, message: str, flag: str | None = None) -> None:
    payload: dict = {"error": {"type": kind, "message": message}}
    if flag is not None:
        payload["error"]["flag"] = flag
    print(json.dumps(payload, sort_keys=True))


def require_flag(value, flag: str, what: str):
    if value is None:
        raise ConfigError(flag, f"missing required flag {flag} ({what})")
    return value


def ensure_out(args) -> Path:
    out = Path(require_flag(args.out, "--out", "output directory"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_snapshot(out_dir: Path, command: str, settings: dict) -> Path:
    """Everything needed to re-run this invocation bit-identically."""
    payload = {"schema_version": SCHEMA_VERSION, "command": command}
    payload.update(settings)
    path = out_dir / "config.yaml"
    dump_yaml(payload, path)
    return path


def parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(flag, f"expected comma-separated integers, "
                          f"got {text!r}") from None
    if not values:
        raise ConfigError(flag, "expected at least one value")
    return values


def load_checkpoint(path_text: str, model_name: str):
    bundle, extra = load_bundle(path_text)
    model = build_model(model_name)
    return bundle, extra, model


def save_report(report: ExperimentReport, out: Path,
                snapshot: Path | None = None) -> Path:
    if snapshot is not None:
        report.artifacts.append(str(snapshot))
    path = out / "report.json"
    report.save(path)
    return path


def _summarize(report: ExperimentReport) -> None:
    for verdict in report.verdicts:
        state = "pass" if verdict["passed"] else "FAIL"
        log.info("%s: %s (%s)", verdict["criterion"], state, verdict["detail"])


# --------------------------------------------------------------------------
# train


_TRAIN_KEYS = {
    "schema_version", "model", "scenario", "n_envs", "iterations", "mode",
    "hidden", "blend_anchor", "joint_noise", "action_scale_lower",
    "checkpoint_every", "ppo", "curriculum", "dr",
}

_DR_FIELDS = {f.name for f in dataclasses.fields(DrRanges)}


def parse_dr(block, where: str = "dr") -> DrRanges:
    if block is None or block == "default":
        return DrRanges()
    if block == "none":
        return DrRanges.none()
    if not isinstance(block, dict):
        raise ConfigError(where, "must be 'default', 'none', or a mapping")
    fields = {}
    for key, value in block.items():
        if key not in _DR_FIELDS:
            raise ConfigError(f"{where}.{key}", "unknown randomization field")
        fields[key] = tuple(value) if isinstance(value, (list, tuple)) \
            else float(value)
    try:
        return dataclasses.replace(DrRanges(), **fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from exc


def parse_train_config(data: dict, where: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(where, "run config must be a mapping")
    check_schema_version(data, where)
    for key in data:
        if key != "seed" and key not in _TRAIN_KEYS:
            raise ConfigError(f"{where}.{key}", "unknown run config key")
    out = {
        "model": str(data.get("model", "g1-planar")),
        "scenario": data.get("scenario", {"preset": "mixed"}),
        "n_envs": int(data.get("n_envs", 64)),
        "iterations": int(data.get("iterations", 100)),
        "mode": str(data.get("mode", "hafo")),
        "hidden": tuple(int(h) for h in data.get("hidden", DESK_HIDDEN)),
        "blend_anchor": str(data.get("blend_anchor", "measured")),
        "joint_noise": float(data.get("joint_noise", 0.05)),
        "action_scale_lower": float(data.get("action_scale_lower", 0.25)),
        "checkpoint_every": int(data.get("checkpoint_every", 0)),
        "ppo": data.get("ppo", {}),
        "curriculum": data.get("curriculum", "none"),
        "dr": data.get("dr", "default"),
        "seed": data.get("seed"),
    }
    if out["n_envs"] <= 0 or out["iterations"] <= 0:
        raise ConfigError(where, "n_envs and iterations must be positive")
    if out["mode"] not in TRAIN_MODES:
        raise ConfigError(f"{where}.mode",
                          f"must be one of {', '.join(TRAIN_MODES)}")
    if not isinstance(out["ppo"], dict):
        raise ConfigError(f"{where}.ppo", "must be a mapping")
    return out


def build_curriculum(block, where: str = "curriculum") -> Curriculum | None:
    if block is None or block == "none":
        return None
    if block == "default":
        return Curriculum(CurriculumConfig())
    if not isinstance(block, dict):
        raise ConfigError(where, "must be 'default', 'none', or a mapping")
    try:
        return Curriculum(CurriculumConfig(**block))
    except TypeError as exc:
        raise ConfigError(where, str(exc)) from exc


def cmd_train(args) -> int:
    config_path = require_flag(args.config, "--config", "run config YAML")
    data = load_yaml(config_path)
    spec = parse_train_config(data, str(config_path))
    if args.mode is not None:
        spec["mode"] = args.mode
    if args.iterations is not None:
        spec["iterations"] = int(args.iterations)
    seed = args.seed if args.seed is not None else spec["seed"]
    seed = 0 if seed is None else int(seed)
    out = ensure_out(args)

    model = build_model(spec["model"])
    scenario = spec["scenario"]
    scenario_cfg = scenario_from_dict(scenario) if isinstance(scenario, dict) \
        else scenario_preset(str(scenario))
    anchor = spec["blend_anchor"]
    if spec["mode"] == "wo-da":
        anchor = "default"
    env = VecEnv(model, scenario_cfg, n_envs=spec["n_envs"], master_seed=seed,
                 dr_ranges=parse_dr(spec["dr"]), joint_noise=spec["joint_noise"],
                 blend_anchor=anchor,
                 action_scale_lower=spec["action_scale_lower"])
    bundle = make_bundle(model, env.obs_layout.size, env.priv_layout.size,
                         rng=np.random.default_rng(seed),
                         hidden=spec["hidden"],
                         action_scale_lower=spec["action_scale_lower"])
    try:
        ppo_cfg = PpoConfig(**spec["ppo"]) if spec["ppo"] else None
    except (TypeError, ValueError) as exc:
        raise ConfigError("ppo", str(exc)) from exc
    curriculum = build_curriculum(spec["curriculum"])

    snapshot = dict(spec)
    snapshot["scenario"] = scenario_to_dict(scenario_cfg)
    snapshot["blend_anchor"] = anchor
    snapshot["seed"] = seed
    snapshot["threads"] = args.resolved_threads
    snapshot["dr"] = spec["dr"] if isinstance(spec["dr"], str) else {
        k: list(v) if isinstance(v, tuple) else v
        for k, v in spec["dr"].items()}
    snapshot["hidden"] = list(spec["hidden"])
    write_snapshot(out, "train", snapshot)

    trainer = Trainer(env, bundle, ppo_cfg, seed=seed, mode=spec["mode"],
                      curriculum=curriculum,
                      log_path=str(out / "metrics.jsonl"),
                      checkpoint_dir=str(out / "checkpoints"),
                      checkpoint_every=spec["checkpoint_every"])
    log.info("training %s on %s: %d envs, %d iterations, seed %d",
             spec["mode"], spec["model"], spec["n_envs"], spec["iterations"],
             seed)
    history = trainer.train(spec["iterations"])
    last = history[-1]
    log.info("done: reward_lower_per_step %.4f, tracking %.4f",
             last["reward_lower_per_step"], last["tracking_per_step"])
    print(json.dumps({
        "iterations": len(history),
        "final_checkpoint": str(out / "checkpoints" / "final.ckpt"),
        "metrics": str(out / "metrics.jsonl"),
        "reward_lower_per_step": last["reward_lower_per_step"],
        "tracking_per_step": last["tracking_per_step"],
    }, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluation verbs


def cmd_eval_force(args) -> int:
    ckpt = require_flag(args.ckpt, "--ckpt", "policy checkpoint")
    out = ensure_out(args)
    bundle, _, model = load_checkpoint(ckpt, args.model)
    tiers = resolve_tiers([p for p in args.tiers.split(",") if p.strip()])
    seeds = parse_int_list(args.seeds, "--seeds")
    snapshot = write_snapshot(out, "eval-force", {
        "ckpt": str(ckpt), "model": args.model,
        "tiers": [t.name for t in tiers], "episodes": args.episodes,
        "seeds": seeds, "episode_length": args.episode_length,
        "threads": args.resolved_threads})
    report = evaluate_force_tiers(
        bundle, model, tiers=tiers, episodes=args.episodes, seeds=seeds,
        episode_length=args.episode_length)
    rows = []
    for cond in report.conditions:
        for i, seed in enumerate(seeds):
            rows.append((cond["condition"], cond["extra"]["magnitude"], seed,
                         *(cond["metrics"][k]["per_seed"][i]
                           for k in ("e_upper", "e_root", "delta_a",
                                     "termination_rate"))))
    report.artifacts.append(write_csv(
        out / "tiers.csv",
        ("tier", "magnitude_n", "seed", "e_upper", "e_root", "delta_a",
         "termination_rate"), rows))
    path = save_report(report, out, snapshot)
    _summarize(report)
    print(json.dumps({"report": str(path), "passed": report.all_passed},
                     sort_keys=True))
    return EXIT_OK


def cmd_push_sweep(args) -> int:
    ckpt = require_flag(args.ckpt, "--ckpt", "policy checkpoint")
    out = ensure_out(args)
    bundle, _, model = load_checkpoint(ckpt, args.model)
    seed = 0 if args.seed is None else args.seed
    snapshot = write_snapshot(out, "push-sweep", {
        "ckpt": str(ckpt), "model": args.model, "directions": args.directions,
        "start": args.start, "step": args.step,
        "max_magnitude": args.max_magnitude, "mode": args.push_mode,
        "seed": seed, "threads": args.resolved_threads})
    report = push_sweep(
        bundle, model, directions=args.directions, start=args.start,
        step_size=args.step, max_magnitude=args.max_magnitude,
        mode=args.push_mode, seed=seed)
    report.artifacts.append(write_csv(
        out / "polar.csv",
        ("direction_deg", "direction_rad", "max_survived_n",
         "sagittal_component_n"), polar_rows(report)))
    path = save_report(report, out, snapshot)
    _summarize(report)
    print(json.dumps({"report": str(path), "passed": report.all_passed},
                     sort_keys=True))
    return EXIT_OK


def load_profile(path_text: str | None) -> LiftProfile | None:
    if path_text is None:
        return None
    data = load_yaml(path_text)
    known = ("lift_height", "lift_rate", "hold", "lower_rate")
    for key in data:
        if key not in known:
            raise ConfigError(f"{path_text}: {key}", "unknown profile field")
    try:
        return LiftProfile(**{k: float(v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(path_text), str(exc)) from exc


def cmd_suspension(args) -> int:
    ckpt = require_flag(args.ckpt, "--ckpt", "policy checkpoint")
    out = ensure_out(args)
    bundle, _, model = load_checkpoint(ckpt, args.model)
    profile = load_profile(args.profile)
    seed = 0 if args.seed is None else args.seed
    snapshot = write_snapshot(out, "suspension", {
        "ckpt": str(ckpt), "model": args.model,
        "profile": None if profile is None else {
            k: getattr(profile, k)
            for k in ("lift_height", "lift_rate", "hold", "lower_rate")},
        "seed": seed, "threads": args.resolved_threads})
    report = suspension_report(bundle, model, profile=profile, seed=seed,
                               out_dir=out)
    path = save_report(report, out, snapshot)
    _summarize(report)
    print(json.dumps({"report": str(path), "passed": report.all_passed},
                     sort_keys=True))
    return EXIT_OK


def cmd_spring_compare(args) -> int:
    out = ensure_out(args)
    model = build_model(args.model)
    snapshot = write_snapshot(out, "spring-compare", {
        "model": args.model, "kp": args.kp, "lift_height": args.lift_height,
        "lift_rate": args.lift_rate, "hold": args.hold,
        "threads": args.resolved_threads})
    report = spring_compare(model, kp=args.kp, lift_height=args.lift_height,
                            lift_rate=args.lift_rate, hold=args.hold,
                            out_dir=out)
    path = save_report(report, out, snapshot)
    _summarize(report)
    print(json.dumps({"report": str(path), "passed": report.all_passed},
                     sort_keys=True))
    return EXIT_OK


def cmd_replay(args) -> int:
    trace_path = require_flag(args.trace, "--trace", "recorded trace file")
    if args.record:
        ckpt = require_flag(args.ckpt, "--ckpt",
                            "policy checkpoint to record with")
        bundle, _, model = load_checkpoint(ckpt, args.model)
        scenario = scenario_from_dict({"preset": args.scenario})
        seed = 0 if args.seed is None else args.seed
        trace = record_trace(bundle, model, scenario, seed=seed,
                             steps=args.steps)
        save_trace(trace_path, trace)
        log.info("recorded %d steps to %s", trace.steps, trace_path)
    try:
        trace = load_trace(trace_path)
    except FileNotFoundError:
        raise ConfigError("--trace", f"trace file not found: {trace_path}") \
            from None
    except ValueError as exc:
        raise ConfigError(str(trace_path), str(exc)) from exc
    result = replay_trace(trace, tolerance=args.tolerance)
    payload = {
        "trace": str(trace_path),
        "steps": trace.steps,
        "max_divergence": result["max_divergence"],
        "first_failing_step": result["first_failing_step"],
        "tolerance": result["tolerance"],
        "passed": result["passed"],
    }
    if args.out is not None:
        out = ensure_out(args)
        write_snapshot(out, "replay", {
            "trace": str(trace_path), "tolerance": args.tolerance,
            "threads": args.resolved_threads})
        write_csv(out / "divergence.csv", ("step", "divergence"),
                  list(enumerate(result["per_step"].tolist())))
        with open(out / "replay.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(payload, sort_keys=True))
    if not result["passed"]:
        log.error("replay diverged at step %s by %.3e",
                  result["first_failing_step"], result["max_divergence"])
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_export_motions(args) -> int:
    out = ensure_out(args)
    model = build_model(args.model)
    seed = 0 if args.seed is None else args.seed
    write_snapshot(out, "export-motions", {
        "model": args.model, "seed": seed, "n_sinusoid": args.sinusoid,
        "n_keyframe": args.keyframe, "threads": args.resolved_threads})
    arrays = model.arrays
    upper = model.upper_slice
    config = DatasetConfig(n_sinusoid=args.sinusoid, n_keyframe=args.keyframe)
    clips = list(builtin_clips(n_joints=model.n_dof_upper).values())
    clips += generate_dataset(config, arrays.q_default[upper],
                              arrays.q_lo[upper], arrays.q_hi[upper],
                              np.random.default_rng(seed))
    manifest = {"schema_version": SCHEMA_VERSION, "model": args.model,
                "seed": seed, "clips": []}
    for clip in clips:
        filename = f"{clip.name}.clip"
        save_clip(clip, str(out / filename))
        manifest["clips"].append({
            "name": clip.name, "file": filename,
            "frames": int(clip.frames.shape[0]),
            "n_joints": int(clip.frames.shape[1]),
            "frame_rate": clip.frame_rate,
            "duration": clip.duration,
        })
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %d clips to %s", len(clips), out)
    print(json.dumps({"clips": len(clips),
                      "manifest": str(out / "manifest.json")},
                     sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration YAML path")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int,
                        help=f"math thread cap ({THREADS_ENV_VAR} overrides)")
    common.add_argument("--log-level", default="info",
                        choices=("debug", "info", "warning", "error"))

    parser = argparse.ArgumentParser(
        prog="hafo-lab",
        description="Train and evaluate force-adaptive humanoid policies "
                    "on the planar simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common],
                       help="run the dual-agent trainer from a run config")
    p.add_argument("--mode", choices=TRAIN_MODES,
                   help="override the run config's training mode")
    p.add_argument("--iterations", type=int,
                   help="override the run config's iteration count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-force", parents=[common],
                       help="tracking error under per-hand force tiers")
    p.add_argument("--ckpt", help="policy checkpoint path")
    p.add_argument("--model", default="g1-planar")
    p.add_argument("--tiers", default="S,N,L",
                   help="comma list of tier names or magnitudes in newtons")
    p.add_argument("--episodes", type=int, default=8)
    p.add_argument("--seeds", default="0,1,2,3,4",
                   help="comma list of evaluation seeds")
    p.add_argument("--episode-length", type=float, default=None)
    p.set_defaults(func=cmd_eval_force)

    p = sub.add_parser("push-sweep", parents=[common],
                       help="largest survivable push per direction")
    p.add_argument("--ckpt", help="policy checkpoint path")
    p.add_argument("--model", default="g1-planar")
    p.add_argument("--directions", type=int, default=8)
    p.add_argument("--start", type=float, default=20.0)
    p.add_argument("--step", type=float, default=20.0)
    p.add_argument("--max-magnitude", type=float, default=400.0)
    p.add_argument("--mode", dest="push_mode", default="sustained",
                   choices=("sustained", "transient"))
    p.set_defaults(func=cmd_push_sweep)

    p = sub.add_parser("suspension", parents=[common],
                       help="lift, operate, and land on the rope rig")
    p.add_argument("--ckpt", help="policy checkpoint path")
    p.add_argument("--model", default="g1-planar")
    p.add_argument("--profile", help="lift profile YAML path")
    p.set_defaults(func=cmd_suspension)

    p = sub.add_parser("spring-compare", parents=[common],
                       help="damped versus stiffness-only rig response")
    p.add_argument("--model", default="g1-planar")
    p.add_argument("--kp", type=float, default=2000.0)
    p.add_argument("--lift-height", type=float, default=0.3)
    p.add_argument("--lift-rate", type=float, default=0.2)
    p.add_argument("--hold", type=float, default=5.0)
    p.set_defaults(func=cmd_spring_compare)

    p = sub.add_parser("replay", parents=[common],
                       help="re-execute a recorded trace and check divergence")
    p.add_argument("--trace", help="trace file path")
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--record", action="store_true",
                   help="record a fresh trace to --trace first")
    p.add_argument("--ckpt", help="policy checkpoint (with --record)")
    p.add_argument("--model", default="g1-planar")
    p.add_argument("--scenario", default="hand_force",
                   help="scenario preset to record (with --record)")
    p.add_argument("--steps", type=int, default=100,
                   help="steps to record (with --record)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("export-motions", parents=[common],
                       help="write the reference clip set to disk")
    p.add_argument("--model", default="g1-planar")
    p.add_argument("--sinusoid", type=int, default=16)
    p.add_argument("--keyframe", type=int, default=16)
    p.set_defaults(func=cmd_export_motions)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr)
    try:
        args.resolved_threads = resolve_threads(args.threads)
        apply_threads(args.resolved_threads)
        return args.func(args)
    except ConfigError as exc:
        flag = exc.field_path if exc.field_path.startswith("--") \
            or exc.field_path == THREADS_ENV_VAR else None
        emit_error("config", str(exc), flag=flag)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        emit_error("config", str(exc))
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - defensive envelope
        log.exception("command failed")
        emit_error("runtime", f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
