"""Experiment protocols, reports, and trace files.

This module turns trained policy bundles into the numbers the project
reports: force-tier tracking errors, directional push-survival sweeps, the
suspension lift-operate-land cycle, and the spring-versus-stiffness rig
comparison. Every protocol emits an :class:`ExperimentReport` that
validates against the bundled JSON schema, plus CSV traces for plotting.

It also defines the binary trace format used by the replay check: a
recorded rollout carries everything needed to rebuild the environment and
step the exact same actions, so replay divergence measures integrator
determinism.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Sequence

import jsonschema
import numpy as np

from hafo_lab.configio import ConfigError, bundled_text
from hafo_lab.env import (
    DrRanges,
    ScenarioConfig,
    VecEnv,
    scenario_preset,
)
from hafo_lab.forces import (
    FORCE_TIERS,
    ForceTier,
    LiftProfile,
    PushSchedule,
    build_suspension_schedule,
    compass_directions,
    tier_by_name,
)
from hafo_lab.policy import PolicyBundle, act_lower, act_upper
from hafo_lab.rewards import (
    action_smoothness,
    tracking_error_upper,
    tracking_error_velocity,
)
from hafo_lab.robot import RobotModel, compute_kinematics, point_kinematics
from hafo_lab.sim import ExternalLoad, SimParams, SimState, pd_torques, step

TRACE_MAGIC = b"HFTR"
TRACE_VERSION = 1


# --------------------------------------------------------------------------
# scenario serialization


def _profile_to_dict(profile: LiftProfile) -> dict:
    return {name: getattr(profile, name)
            for name in ("lift_height", "lift_rate", "hold", "lower_rate")}


def _push_to_dict(push: PushSchedule) -> dict:
    return {name: getattr(push, name)
            for name in ("start", "duration", "magnitude", "direction", "mode")}


def scenario_to_dict(scenario: ScenarioConfig) -> dict:
    """Flatten a scenario to plain YAML/JSON-safe values."""
    out: dict = {}
    for f in dataclasses.fields(scenario):
        value = getattr(scenario, f.name)
        if f.name == "suspension":
            out[f.name] = None if value is None else _profile_to_dict(value)
        elif f.name == "pushes":
            out[f.name] = [_push_to_dict(p) for p in value]
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def scenario_from_dict(data: dict, where: str = "scenario") -> ScenarioConfig:
    """Build a scenario from a config block.

    A ``preset`` key starts from the named preset and applies the remaining
    keys as overrides; otherwise the block must carry a ``name`` and any
    subset of the scenario fields.
    """
    if not isinstance(data, dict):
        raise ConfigError(where, "must be a mapping")
    data = dict(data)
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    preset = data.pop("preset", None)
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}.{key}", "unknown scenario field")
    if "suspension" in data and data["suspension"] is not None:
        block = data["suspension"]
        if not isinstance(block, dict):
            raise ConfigError(f"{where}.suspension", "must be a mapping or null")
        try:
            data["suspension"] = LiftProfile(**block)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.suspension", str(exc)) from exc
    if "pushes" in data:
        try:
            data["pushes"] = tuple(PushSchedule(**p) for p in data["pushes"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.pushes", str(exc)) from exc
    for key in ("vel_x_range", "vel_y_range", "yaw_range", "push_interval",
                "push_duration"):
        if key in data:
            data[key] = tuple(data[key])
    try:
        if preset is not None:
            base = scenario_preset(preset)
            data.pop("name", None)
            return dataclasses.replace(base, **data)
        return ScenarioConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from exc


# --------------------------------------------------------------------------
# reports


_REPORT_SCHEMA: dict | None = None


def report_schema() -> dict:
    global _REPORT_SCHEMA
    if _REPORT_SCHEMA is None:
        _REPORT_SCHEMA = json.loads(bundled_text("report_schema.json"))
    return _REPORT_SCHEMA


def validate_report(data: dict) -> None:
    """Check a report dict against the bundled schema; raises ConfigError."""
    try:
        jsonschema.validate(data, report_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"report.{path}", exc.message) from exc


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def metric_summary(per_seed: Sequence[float]) -> dict:
    """Mean, std and seed count for one metric across seeds."""
    values = [float(v) for v in per_seed]
    arr = np.asarray(values, dtype=float)
    finite = arr[np.isfinite(arr)]
    mean = float(finite.mean()) if finite.size else float("nan")
    std = float(finite.std()) if finite.size else float("nan")
    return {"per_seed": values, "mean": mean, "std": std,
            "n_seeds": len(values)}


@dataclass
class ExperimentReport:
    """One experiment's outcome: conditions, verdicts, and artifact paths."""

    experiment: str
    config: dict
    conditions: list[dict] = field(default_factory=list)
    verdicts: list[dict] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    schema_version: int = 1

    def add_condition(self, condition: str, metrics: dict[str, Sequence[float]],
                      extra: dict | None = None) -> dict:
        row = {"condition": condition,
               "metrics": {name: metric_summary(values)
                           for name, values in metrics.items()}}
        if extra is not None:
            row["extra"] = extra
        self.conditions.append(row)
        return row

    def add_verdict(self, criterion: str, passed: bool, detail: str) -> None:
        self.verdicts.append({"criterion": criterion, "passed": bool(passed),
                              "detail": detail})

    @property
    def all_passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts)

    def to_dict(self) -> dict:
        return _json_safe({
            "schema_version": self.schema_version,
            "experiment": self.experiment,
            "config": self.config,
            "conditions": self.conditions,
            "verdicts": self.verdicts,
            "artifacts": self.artifacts,
        })

    def save(self, path: str | Path) -> dict:
        data = self.to_dict()
        validate_report(data)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
        return data


def write_csv(path: str | Path, header: Sequence[str],
              rows: Sequence[Sequence]) -> str:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.9g}" if isinstance(v, float) else v
                             for v in row])
    return str(path)


# --------------------------------------------------------------------------
# rollout collection and metrics


def eval_env(model: RobotModel, scenario: ScenarioConfig, *, n_envs: int,
             seed: int, blend_anchor: str = "measured") -> VecEnv:
    """Evaluation environment: no model randomization, no reset-pose noise,
    so differences between policies come from the policies alone."""
    return VecEnv(model, scenario, n_envs=n_envs, master_seed=seed,
                  dr_ranges=DrRanges.none(), joint_noise=0.0,
                  blend_anchor=blend_anchor)


def policy_from_bundle(bundle: PolicyBundle,
                       mode: str = "deterministic",
                       rng: np.random.Generator | None = None) -> Callable:
    """Closure mapping (obs, theta_ref) -> (action_lower, theta_target)."""
    def act(obs: np.ndarray, theta_ref: np.ndarray):
        a_l, _ = act_lower(bundle, obs, mode=mode, rng=rng)
        _, _, theta_target, _ = act_upper(bundle, obs, theta_ref, mode=mode,
                                          rng=rng)
        return a_l, theta_target
    return act


def open_loop_policy(bundle: PolicyBundle) -> Callable:
    """Upper body replays the blended reference unchanged; the evaluation
    analog of the no-dual-agent training mode."""
    def act(obs: np.ndarray, theta_ref: np.ndarray):
        a_l, _ = act_lower(bundle, obs, mode="deterministic", rng=None)
        return a_l, theta_ref.copy()
    return act


def run_rollout(env: VecEnv, policy: Callable, steps: int) -> dict:
    """Step a policy and stack everything the metrics need, (T, N, ...)."""
    upper = env.model.upper_slice
    layout = env.obs_layout
    obs, _ = env.reset()
    rec: dict[str, list] = {k: [] for k in (
        "theta_ref", "q_upper", "commands", "base_vel", "actions",
        "spring_force", "terminated", "timeouts", "diverged", "base")}
    for _ in range(steps):
        theta_ref = env.theta_ref()
        a_l, theta_target = policy(obs, theta_ref)
        obs, priv, _, _, _, info = env.step(a_l, theta_target)
        rec["theta_ref"].append(theta_ref)
        rec["q_upper"].append(env.state.q[:, upper].copy())
        rec["commands"].append(obs[:, layout.commands].copy())
        rec["base_vel"].append(env.state.base_vel.copy())
        rec["actions"].append(np.concatenate([a_l, theta_target], axis=1))
        rec["spring_force"].append(
            priv[:, env.priv_layout.point_forces][:, :2].copy())
        rec["terminated"].append(info["terminated"].copy())
        rec["timeouts"].append(info["timeouts"].copy())
        rec["diverged"].append(info["diverged"].copy())
        rec["base"].append(env.state.base.copy())
    return {k: np.stack(v) for k, v in rec.items()}


def rollout_metrics(rollout: dict) -> dict:
    """Per-env scalar metrics from a stacked rollout.

    e_upper: mean absolute upper-joint tracking error (rad).
    e_root: mean absolute base velocity error over the commanded
    sagittal-speed and turn-rate channels.
    delta_a: mean step-to-step action difference norm.
    """
    measured = np.stack([rollout["base_vel"][:, :, 0],
                         rollout["base_vel"][:, :, 2]], axis=-1)
    commanded = rollout["commands"][:, :, [0, 2]]
    return {
        "e_upper": tracking_error_upper(rollout["q_upper"],
                                        rollout["theta_ref"]),
        "e_root": tracking_error_velocity(measured, commanded),
        "delta_a": action_smoothness(rollout["actions"]),
        "terminations": rollout["terminated"].sum(axis=0),
        "diverged": rollout["diverged"].any(axis=0),
    }


# --------------------------------------------------------------------------
# force-tier evaluation


def resolve_tiers(spec: Sequence[str | float | ForceTier]) -> list[ForceTier]:
    """Accept tier names ("S", "N", "L") and raw magnitudes."""
    tiers: list[ForceTier] = []
    for item in spec:
        if isinstance(item, ForceTier):
            tiers.append(item)
            continue
        text = str(item).strip()
        try:
            tiers.append(tier_by_name(text))
            continue
        except KeyError:
            pass
        try:
            magnitude = float(text)
        except ValueError:
            names = ", ".join(t.name for t in FORCE_TIERS)
            raise ConfigError(
                "tiers", f"{text!r} is neither a tier name ({names}) nor a "
                f"force magnitude") from None
        if magnitude < 0.0:
            raise ConfigError("tiers", "force magnitude must be nonnegative")
        tiers.append(ForceTier(text, magnitude))
    if not tiers:
        raise ConfigError("tiers", "need at least one tier")
    return tiers


def evaluate_force_tiers(
    bundle: PolicyBundle,
    model: RobotModel,
    *,
    tiers: Sequence[str | float | ForceTier] = ("S", "N", "L"),
    episodes: int = 8,
    seeds: Sequence[int] = (0,),
    episode_length: float | None = None,
    policy_factory: Callable | None = None,
) -> ExperimentReport:
    """Tracking error under per-hand force levels, mean and std over seeds.

    Each (tier, seed) pair runs ``episodes`` parallel episodes with random
    commands and reference clips; the per-seed value is the episode mean.
    """
    tier_list = resolve_tiers(tiers)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("seeds", "need at least one seed")
    if episodes <= 0:
        raise ConfigError("episodes", "must be positive")
    base = scenario_preset("hand_force")
    if episode_length is not None:
        base = dataclasses.replace(base, episode_length=float(episode_length))
    factory = policy_factory if policy_factory is not None else policy_from_bundle
    report = ExperimentReport(
        experiment="force-tiers",
        config={
            "tiers": [{"name": t.name, "magnitude": t.magnitude}
                      for t in tier_list],
            "episodes": episodes,
            "seeds": seeds,
            "episode_length": base.episode_length,
        })
    for tier in tier_list:
        scenario = dataclasses.replace(base, hand_force_magnitude=tier.magnitude,
                                       hand_probability=1.0)
        rows: dict[str, list[float]] = {
            "e_upper": [], "e_root": [], "delta_a": [], "termination_rate": []}
        for seed in seeds:
            env = eval_env(model, scenario, n_envs=episodes, seed=seed)
            rollout = run_rollout(env, factory(bundle), env.max_steps - 1)
            metrics = rollout_metrics(rollout)
            rows["e_upper"].append(float(metrics["e_upper"].mean()))
            rows["e_root"].append(float(metrics["e_root"].mean()))
            rows["delta_a"].append(float(metrics["delta_a"].mean()))
            rows["termination_rate"].append(
                float((metrics["terminations"] > 0).mean()))
        report.add_condition(f"tier_{tier.name}", rows,
                             extra={"magnitude": tier.magnitude})
    magnitudes = [t.magnitude for t in tier_list]
    means = [c["metrics"]["e_upper"]["mean"] for c in report.conditions]
    order = np.argsort(magnitudes, kind="stable")
    sorted_means = [means[i] for i in order]
    monotone = all(a < b for a, b in zip(sorted_means, sorted_means[1:]))
    report.add_verdict(
        "tier-monotonicity", monotone,
        "seed-mean e_upper ordered by force magnitude: "
        + ", ".join(f"{magnitudes[i]:g} N -> {means[i]:.5f}" for i in order))
    return report


# --------------------------------------------------------------------------
# push sweep


def push_sweep(
    bundle: PolicyBundle,
    model: RobotModel,
    *,
    directions: int = 8,
    start: float = 20.0,
    step_size: float = 20.0,
    max_magnitude: float = 400.0,
    mode: str = "sustained",
    seed: int = 0,
    settle_time: float = 2.0,
    window: float = 3.0,
) -> ExperimentReport:
    """Largest survivable push per compass direction, linear sweep.

    A trial plants the robot in stance, lets it settle, applies one push,
    and watches for termination until the window closes. The sweep walks
    magnitudes upward until the first failure and records the last
    magnitude survived. Directions are horizontal-plane angles; only their
    sagittal component acts on the planar model.
    """
    if mode not in ("sustained", "transient"):
        raise ConfigError("mode", f"must be sustained or transient, got {mode!r}")
    if start <= 0.0 or step_size <= 0.0 or max_magnitude < start:
        raise ConfigError(
            "sweep", "need 0 < start, 0 < step, max_magnitude >= start")
    duration = window if mode == "sustained" else 1.0
    episode_length = settle_time + window + 1.0
    angles = compass_directions(directions)
    base = dataclasses.replace(scenario_preset("push_sweep"),
                               episode_length=episode_length)
    report = ExperimentReport(
        experiment="push-sweep",
        config={"directions": directions, "start": start, "step": step_size,
                "max_magnitude": max_magnitude, "mode": mode, "seed": seed,
                "settle_time": settle_time, "window": window})
    policy = policy_from_bundle(bundle)
    thresholds = []
    for angle in angles:
        survived = 0.0
        magnitude = start
        while magnitude <= max_magnitude + 1e-9:
            push = PushSchedule(start=settle_time, duration=duration,
                                magnitude=magnitude, direction=float(angle),
                                mode=mode)
            scenario = dataclasses.replace(base, pushes=(push,))
            env = eval_env(model, scenario, n_envs=1, seed=seed)
            steps = min(env.max_steps - 1,
                        int(round((settle_time + window) / env.dt_control)))
            rollout = run_rollout(env, policy, steps)
            if rollout["terminated"].any():
                break
            survived = magnitude
            magnitude += step_size
        thresholds.append(survived)
        sagittal = abs(survived * float(np.cos(angle)))
        report.add_condition(
            f"direction_{np.degrees(angle):.0f}deg",
            {"max_survived": [survived]},
            extra={"direction_rad": float(angle),
                   "sagittal_component": sagittal})
    report.add_verdict(
        "nonzero-sagittal-tolerance",
        max(thresholds) >= start,
        f"best direction survived {max(thresholds):g} N "
        f"(sweep start {start:g} N)")
    return report


def polar_rows(report: ExperimentReport) -> list[tuple]:
    """CSV rows (direction_deg, direction_rad, max_survived, sagittal)."""
    rows = []
    for cond in report.conditions:
        extra = cond.get("extra", {})
        angle = extra["direction_rad"]
        rows.append((round(float(np.degrees(angle)), 3), angle,
                     cond["metrics"]["max_survived"]["mean"],
                     extra["sagittal_component"]))
    return rows


# --------------------------------------------------------------------------
# suspension protocol


def run_suspension(
    bundle: PolicyBundle,
    model: RobotModel,
    *,
    profile: LiftProfile | None = None,
    seed: int = 0,
    start: str = "ground",
    dropout_after: float | None = None,
    policy: Callable | None = None,
) -> tuple[dict, dict]:
    """One lift-operate-land cycle; returns (metrics row, rollout arrays).

    The rig cycle starts at t=0 with no jitter (for an airborne start the
    hold phase itself starts at t=0), so the hold window sits at a known
    place in the episode; tracking error is measured over that window,
    smoothness over the whole episode.
    """
    if profile is None:
        profile = LiftProfile(lift_height=0.3, lift_rate=0.75, hold=2.0,
                              lower_rate=0.2)
    t0 = -profile.lift_time if start == "airborne" else 0.0
    scenario = dataclasses.replace(
        scenario_preset("suspension"),
        suspension=profile,
        suspension_start=start,
        suspension_probability=1.0,
        rig_start_jitter=0.0,
        rig_dropout_after=dropout_after,
        episode_length=t0 + profile.total_duration + 2.0,
    )
    env = eval_env(model, scenario, n_envs=1, seed=seed)
    act = policy if policy is not None else policy_from_bundle(bundle)
    # one step short of the episode cap: the cap step auto-resets, and the
    # recorded state would be the fresh episode's, not this one's
    rollout = run_rollout(env, act, env.max_steps - 1)
    dt = env.dt_control

    lift_end = t0 + profile.lift_time
    hold_end = lift_end + profile.hold
    times = (np.arange(rollout["terminated"].shape[0]) + 1) * dt
    hold_mask = (times >= lift_end) & (times < hold_end)
    if dropout_after is not None:
        hold_mask &= times < t0 + dropout_after

    e_hold = float(tracking_error_upper(
        rollout["q_upper"][hold_mask], rollout["theta_ref"][hold_mask])[0]) \
        if hold_mask.sum() >= 1 else float("nan")
    spring_norm = np.linalg.norm(rollout["spring_force"][:, 0], axis=-1)
    row = {
        "completed": float(not rollout["terminated"].any()),
        "delta_a": float(rollout_metrics(rollout)["delta_a"][0]),
        "e_upper_hold": e_hold,
        "e_upper": float(tracking_error_upper(
            rollout["q_upper"], rollout["theta_ref"])[0]),
        "max_spring_force": float(spring_norm.max()),
        "final_height": float(rollout["base"][-1, 0, 1]),
        "diverged": float(rollout["diverged"].any()),
    }
    extras = {"times": times, "spring_norm": spring_norm, "dt": dt,
              "phase_bounds": (t0, lift_end, hold_end,
                               t0 + profile.total_duration)}
    rollout.update(extras)
    return row, rollout


def suspension_csv_rows(rollout: dict) -> list[tuple]:
    times = rollout["times"]
    spring = rollout["spring_force"][:, 0]
    norm = rollout["spring_norm"]
    height = rollout["base"][:, 0, 1]
    return [(float(t), float(fx), float(fz), float(n), float(z))
            for t, (fx, fz), n, z in zip(times, spring, norm, height)]


def suspension_report(
    bundle: PolicyBundle,
    model: RobotModel,
    *,
    profile: LiftProfile | None = None,
    seed: int = 0,
    out_dir: str | Path | None = None,
    policy: Callable | None = None,
) -> ExperimentReport:
    """Full suspension evaluation: ground start, suspended start, and a
    mid-hold rope dropout."""
    if profile is None:
        profile = LiftProfile(lift_height=0.3, lift_rate=0.75, hold=2.0,
                              lower_rate=0.2)
    dropout_at = profile.lift_time + 0.5 * profile.hold
    variants = (
        ("ground_start", {"start": "ground", "dropout_after": None}),
        ("suspended_start", {"start": "airborne", "dropout_after": None}),
        ("dropout_mid_hold", {"start": "ground", "dropout_after": dropout_at}),
    )
    report = ExperimentReport(
        experiment="suspension",
        config={"profile": _profile_to_dict(profile), "seed": seed,
                "dropout_after": dropout_at})
    rows = {}
    for name, kwargs in variants:
        row, rollout = run_suspension(bundle, model, profile=profile,
                                      seed=seed, policy=policy, **kwargs)
        rows[name] = (row, rollout)
        report.add_condition(name, {k: [v] for k, v in row.items()})
        if out_dir is not None:
            path = Path(out_dir) / f"suspension_{name}.csv"
            write_csv(path, ("t", "spring_fx", "spring_fz", "spring_norm",
                             "base_height"), suspension_csv_rows(rollout))
            report.artifacts.append(str(path))

    completed = all(row["completed"] == 1.0 for row, _ in rows.values())
    report.add_verdict(
        "lift-operate-land-completion", completed,
        "no termination in any variant" if completed else "termination: "
        + ", ".join(n for n, (r, _) in rows.items() if r["completed"] != 1.0))
    finite = all(np.isfinite([r["delta_a"], r["e_upper_hold"]]).all()
                 for r, _ in rows.values())
    report.add_verdict("finite-metrics", finite,
                       "delta_a and hold-phase e_upper finite in all variants")
    drop_row, drop_roll = rows["dropout_mid_hold"]
    t0, lift_end, hold_end, _ = drop_roll["phase_bounds"]
    after = drop_roll["times"] >= t0 + dropout_at + drop_roll["dt"]
    force_dead = float(drop_roll["spring_norm"][after].max(initial=0.0))
    report.add_verdict(
        "dropout-kills-force",
        force_dead == 0.0 and drop_row["diverged"] == 0.0,
        f"max spring force after dropout {force_dead:g} N, "
        f"diverged={bool(drop_row['diverged'])}")
    return report


# --------------------------------------------------------------------------
# spring-damper versus stiffness-only rig comparison


def _rig_trace(model: RobotModel, attachment, *, settle: float, total: float,
               params: SimParams) -> dict:
    """Raw-sim run: PD holds the default pose while the rig winches the
    pelvis; records pelvis height, rig force, and ground reaction force."""
    arrays = model.arrays
    state = SimState.standing(model, 1)
    q_default = state.q.copy()
    n_steps = int(round(total / params.dt))
    times = np.empty(n_steps)
    pelvis_z = np.empty(n_steps)
    spring = np.empty((n_steps, 2))
    grf = np.empty(n_steps)
    t = -settle
    for i in range(n_steps):
        kin = compute_kinematics(arrays, state.base, state.base_vel,
                                 state.q, state.q_dot)
        pos, vel, _, _ = point_kinematics(kin, arrays.pelvis_link,
                                          arrays.pelvis_offset)
        force = attachment.force_at(t, pos, vel)
        torques = pd_torques(arrays, state, q_default)
        loads = [ExternalLoad(link=arrays.pelvis_link,
                              offset=arrays.pelvis_offset, force=force)]
        state, info = step(model, params, state, torques, loads)
        t += params.dt
        kin = compute_kinematics(arrays, state.base, state.base_vel,
                                 state.q, state.q_dot)
        pos_after, _, _, _ = point_kinematics(kin, arrays.pelvis_link,
                                              arrays.pelvis_offset)
        times[i] = t
        pelvis_z[i] = pos_after[0, 1]
        spring[i] = force[0]
        grf[i] = info.contacts.normal[0].sum()
    return {"t": times, "pelvis_z": pelvis_z, "spring": spring, "grf": grf}


def spring_compare(
    model: RobotModel,
    *,
    kp: float = 2000.0,
    lift_height: float = 0.3,
    lift_rate: float = 0.2,
    settle: float = 1.0,
    hold: float = 5.0,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Winch the pelvis upward with a damped rig and with a stiffness-only
    rig, and compare the oscillation behavior of the two responses.

    The damped rig uses critical damping for the robot's mass; the
    stiffness-only rig drops the damping path entirely. Metrics: overshoot
    of the damped rise past its own steady value, and the late-hold
    oscillation band of each trace.
    """
    profile = LiftProfile(lift_height=lift_height, lift_rate=lift_rate,
                          hold=hold, lower_rate=lift_rate)
    params = SimParams()
    total = settle + profile.lift_time + hold
    rng = np.random.default_rng(0)
    damped_rig = build_suspension_schedule(
        profile, rng, standing_height=model.default_base_height
        + float(model.arrays.pelvis_offset[1]),
        mass=model.total_mass, kp=kp, anchor_jitter=0.0, margin=10.0)
    stiff_rig = dataclasses.replace(damped_rig, stiffness_only=True)

    damped = _rig_trace(model, damped_rig, settle=settle, total=total,
                        params=params)
    stiff = _rig_trace(model, stiff_rig, settle=settle, total=total,
                       params=params)

    z0 = damped["pelvis_z"][0]
    tail = damped["t"] >= profile.lift_time + 0.6 * hold
    rise_damped = damped["pelvis_z"] - z0
    steady = float(rise_damped[tail].mean())
    overshoot = float(rise_damped.max() - steady) / lift_height
    band_damped = 0.5 * float(np.ptp(damped["pelvis_z"][tail]))
    band_stiff = 0.5 * float(np.ptp(stiff["pelvis_z"][tail]))
    ratio = band_stiff / max(band_damped, 1e-9)

    spring_norm = np.linalg.norm(damped["spring"], axis=-1)
    early = (damped["t"] >= 0.0) & (damped["t"] <= 0.25 * profile.lift_time)
    late = (damped["t"] >= profile.lift_time) \
        & (damped["t"] <= profile.lift_time + 1.0)
    grf_drop = float(damped["grf"][early].mean() - damped["grf"][late].mean())
    spring_gain = float(spring_norm[late].mean() - spring_norm[early].mean())

    report = ExperimentReport(
        experiment="spring-compare",
        config={"kp": kp, "lift_height": lift_height, "lift_rate": lift_rate,
                "settle": settle, "hold": hold, "model": model.name})
    report.add_condition("damped", {
        "overshoot_fraction": [overshoot],
        "steady_band": [band_damped],
        "steady_rise": [steady]})
    report.add_condition("stiffness_only", {
        "oscillation_band": [band_stiff],
        "band_ratio": [ratio]})
    report.add_verdict(
        "damped-overshoot-below-10pct", overshoot < 0.10,
        f"overshoot {overshoot:.4f} of commanded displacement")
    report.add_verdict(
        "stiffness-oscillation-3x", ratio >= 3.0,
        f"stiffness-only band {band_stiff:.5f} m vs damped band "
        f"{band_damped:.5f} m (ratio {ratio:.1f})")
    report.add_verdict(
        "grf-spring-complementarity", grf_drop > 0.0 and spring_gain > 0.0,
        f"from early ramp to early hold, mean ground reaction fell by "
        f"{grf_drop:.1f} N while mean spring force rose by {spring_gain:.1f} N")
    if out_dir is not None:
        for name, trace in (("damped", damped), ("stiffness_only", stiff)):
            path = Path(out_dir) / f"spring_compare_{name}.csv"
            rows = [(float(t), float(z), float(fx), float(fz), float(g))
                    for t, z, (fx, fz), g in zip(
                        trace["t"], trace["pelvis_z"], trace["spring"],
                        trace["grf"])]
            write_csv(path, ("t", "pelvis_z", "spring_fx", "spring_fz", "grf"),
                      rows)
            report.artifacts.append(str(path))
    return report


# --------------------------------------------------------------------------
# binary rollout traces and replay


@dataclass
class SimTrace:
    """A recorded rollout: env build recipe plus actions and states."""

    model_config: str | dict
    scenario: dict
    master_seed: int
    n_envs: int
    actions_lower: np.ndarray  # (T, N, n_lower)
    theta_upper: np.ndarray    # (T, N, n_upper)
    states: np.ndarray         # (T, N, 6 + 2 J) base, base_vel, q, q_dot
    alpha: float = 1.0
    force_scale: float = 1.0
    blend_anchor: str = "measured"

    @property
    def steps(self) -> int:
        return self.actions_lower.shape[0]


def _state_vector(env: VecEnv) -> np.ndarray:
    s = env.state
    return np.concatenate([s.base, s.base_vel, s.q, s.q_dot], axis=1)


def record_trace(bundle: PolicyBundle, model: RobotModel,
                 scenario: ScenarioConfig, *, seed: int = 0, steps: int = 200,
                 n_envs: int = 1, alpha: float = 1.0,
                 force_scale: float = 1.0) -> SimTrace:
    """Run the deterministic policy and capture actions plus state history."""
    env = eval_env(model, scenario, n_envs=n_envs, seed=seed)
    env.set_difficulty(alpha, force_scale)
    policy = policy_from_bundle(bundle)
    obs, _ = env.reset()
    actions_l, targets_u, states = [], [], []
    for _ in range(steps):
        a_l, theta_target = policy(obs, env.theta_ref())
        obs, _, _, _, _, _ = env.step(a_l, theta_target)
        actions_l.append(a_l)
        targets_u.append(theta_target)
        states.append(_state_vector(env))
    return SimTrace(
        model_config=model.name,
        scenario=scenario_to_dict(scenario),
        master_seed=seed,
        n_envs=n_envs,
        actions_lower=np.stack(actions_l),
        theta_upper=np.stack(targets_u),
        states=np.stack(states),
        alpha=alpha,
        force_scale=force_scale,
    )


def _write_block(fh: BinaryIO, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def save_trace(path: str | Path, trace: SimTrace) -> None:
    """Binary trace: magic, version, JSON header, float64 arrays."""
    header = {
        "model_config": trace.model_config,
        "scenario": trace.scenario,
        "master_seed": trace.master_seed,
        "n_envs": trace.n_envs,
        "alpha": trace.alpha,
        "force_scale": trace.force_scale,
        "blend_anchor": trace.blend_anchor,
    }
    arrays = {"actions_lower": trace.actions_lower,
              "theta_upper": trace.theta_upper,
              "states": trace.states}
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<I", TRACE_VERSION))
        _write_block(fh, json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            _write_block(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(
            f"trace truncated at byte {fh.tell() - len(buf)}: "
            f"expected {n} bytes for {what}, got {len(buf)}")
    return buf


def load_trace(path: str | Path) -> SimTrace:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != TRACE_MAGIC:
            raise ValueError(f"not a trace file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != TRACE_VERSION:
            raise ValueError(f"unsupported trace version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = json.loads(_read_exact(fh, hlen, "header"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "array name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{ndim}I",
                                  _read_exact(fh, 4 * ndim, "shape"))
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
            data = _read_exact(fh, n_bytes, f"array {name}")
            arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    for need in ("actions_lower", "theta_upper", "states"):
        if need not in arrays:
            raise ValueError(f"trace missing array {need!r}")
    return SimTrace(
        model_config=header["model_config"],
        scenario=header["scenario"],
        master_seed=int(header["master_seed"]),
        n_envs=int(header["n_envs"]),
        actions_lower=arrays["actions_lower"],
        theta_upper=arrays["theta_upper"],
        states=arrays["states"],
        alpha=float(header.get("alpha", 1.0)),
        force_scale=float(header.get("force_scale", 1.0)),
        blend_anchor=str(header.get("blend_anchor", "measured")),
    )


def replay_trace(trace: SimTrace, *, sim_params: SimParams | None = None,
                 tolerance: float = 1e-9) -> dict:
    """Rebuild the environment, step the recorded actions, and measure the
    per-step state divergence from the recorded history."""
    from hafo_lab.robot import build_model

    model = build_model(trace.model_config)
    scenario = scenario_from_dict(trace.scenario)
    env = VecEnv(model, scenario, n_envs=trace.n_envs,
                 master_seed=trace.master_seed, dr_ranges=DrRanges.none(),
                 joint_noise=0.0, blend_anchor=trace.blend_anchor,
                 sim_params=sim_params)
    env.set_difficulty(trace.alpha, trace.force_scale)
    env.reset()
    per_step = np.empty(trace.steps)
    first_fail = None
    for t in range(trace.steps):
        env.step(trace.actions_lower[t], trace.theta_upper[t])
        per_step[t] = float(
            np.abs(_state_vector(env) - trace.states[t]).max())
        if first_fail is None and per_step[t] > tolerance:
            first_fail = t
    return {
        "max_divergence": float(per_step.max()) if trace.steps else 0.0,
        "per_step": per_step,
        "first_failing_step": first_fail,
        "tolerance": tolerance,
        "passed": first_fail is None,
    }
