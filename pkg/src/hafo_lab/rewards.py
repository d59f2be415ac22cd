"""Reward terms, force-presence gating, and per-agent stream totals.

Every term produces a raw value per env; the weighted value is
``weight * value * gate`` with no timestep scaling, so a termination event
contributes its full weight on the step it happens. Task terms use a shared
squared-error kernel ``exp(-err^2 / kernel_scale)``.

This module is pure array math; the environment assembles ``RewardInputs``
from sim state each control step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hafo_lab.configio import ConfigError, check_schema_version, load_bundled, load_yaml

GATES = ("always", "force_on", "force_off")
STREAMS = ("lower", "upper", "both")


@dataclass(frozen=True)
class RewardTerm:
    name: str
    weight: float
    gate: str
    stream: str


@dataclass
class RewardTable:
    terms: tuple[RewardTerm, ...]
    kernel_scale: float

    @staticmethod
    def from_config(source: str | dict) -> "RewardTable":
        data = load_yaml(source) if isinstance(source, str) else source
        check_schema_version(data, "rewards")
        scale = float(data.get("kernel_scale", 0.0))
        if scale <= 0.0:
            raise ConfigError("kernel_scale", f"must be positive, got {scale}")
        terms = []
        seen = set()
        for k, row in enumerate(data.get("terms", [])):
            where = f"terms[{k}]"
            name = row.get("name")
            if name not in _TERM_FNS:
                raise ConfigError(
                    f"{where}.name",
                    f"unknown term {name!r}; known: {sorted(_TERM_FNS)}",
                )
            if name in seen:
                raise ConfigError(f"{where}.name", f"duplicate term {name!r}")
            seen.add(name)
            gate = row.get("gate", "always")
            if gate not in GATES:
                raise ConfigError(f"{where}.gate", f"must be one of {GATES}, got {gate!r}")
            stream = row.get("stream", "both")
            if stream not in STREAMS:
                raise ConfigError(
                    f"{where}.stream", f"must be one of {STREAMS}, got {stream!r}"
                )
            terms.append(RewardTerm(name=name, weight=float(row.get("weight", 0.0)),
                                    gate=gate, stream=stream))
        return RewardTable(terms=tuple(terms), kernel_scale=scale)

    @staticmethod
    def bundled() -> "RewardTable":
        return RewardTable.from_config(load_bundled("rewards_table.yaml"))

    def weights(self) -> dict[str, float]:
        return {t.name: t.weight for t in self.terms}


@dataclass
class RewardInputs:
    """Per-step quantities the terms consume; all arrays lead with the env axis."""

    base_pitch: np.ndarray        # (N,)
    base_ang_vel: np.ndarray      # (N,)
    base_height: np.ndarray       # (N,)
    base_lin_vel: np.ndarray      # (N, 2) world vx, vz
    commands: np.ndarray          # (N, 3) vx, vy, yaw rate targets
    q_lower: np.ndarray           # (N, J_l)
    q_lower_default: np.ndarray   # (J_l,) or (N, J_l)
    q_upper: np.ndarray           # (N, J_u)
    upper_ref: np.ndarray         # (N, J_u) curriculum-blended target
    q_dot_upper: np.ndarray       # (N, J_u)
    q_acc_upper: np.ndarray       # (N, J_u)
    torques_upper: np.ndarray     # (N, J_u)
    action_lower: np.ndarray      # (N, J_l)
    prev_action_lower: np.ndarray
    action_upper: np.ndarray      # (N, J_u)
    prev_action_upper: np.ndarray
    feet_height_var: np.ndarray   # (N,) variance of the feet height gap, short window
    height_target: float | np.ndarray
    terminated: np.ndarray        # (N,) bool
    force_active: np.ndarray      # (N,) bool


def _kernel(err_sq: np.ndarray, scale: float) -> np.ndarray:
    return np.exp(-err_sq / scale)


def _t_orientation(x: RewardInputs, s: float) -> np.ndarray:
    return np.sin(x.base_pitch) ** 2


def _t_torso_orientation(x: RewardInputs, s: float) -> np.ndarray:
    # the torso rides the same floating link as the pelvis on this model
    return np.sin(x.base_pitch) ** 2


def _t_lower_action_rate(x: RewardInputs, s: float) -> np.ndarray:
    return np.sum((x.action_lower - x.prev_action_lower) ** 2, axis=1)


def _t_feet_orientation(x: RewardInputs, s: float) -> np.ndarray:
    # point feet carry no orientation; the term exists with zero value
    return np.zeros(x.base_pitch.shape[0])


def _t_termination(x: RewardInputs, s: float) -> np.ndarray:
    return x.terminated.astype(float)


def _t_feet_parallel(x: RewardInputs, s: float) -> np.ndarray:
    return x.feet_height_var


def _t_lower_stand_still_reg(x: RewardInputs, s: float) -> np.ndarray:
    return np.linalg.norm(x.q_lower - x.q_lower_default, axis=1)


def _t_base_height(x: RewardInputs, s: float) -> np.ndarray:
    return (x.base_height - x.height_target) ** 2


def _t_additional_torques(x: RewardInputs, s: float) -> np.ndarray:
    return np.sum(x.torques_upper**2, axis=1)


def _t_additional_dof_vel(x: RewardInputs, s: float) -> np.ndarray:
    return np.sum(x.q_dot_upper**2, axis=1)


def _t_additional_dof_acc(x: RewardInputs, s: float) -> np.ndarray:
    return np.sum(x.q_acc_upper**2, axis=1)


def _t_additional_action_rate(x: RewardInputs, s: float) -> np.ndarray:
    return np.sum((x.action_upper - x.prev_action_upper) ** 2, axis=1)


def _t_horizontal_ang_vel(x: RewardInputs, s: float) -> np.ndarray:
    return x.base_ang_vel**2


def _t_lin_vel_x(x: RewardInputs, s: float) -> np.ndarray:
    return _kernel((x.commands[:, 0] - x.base_lin_vel[:, 0]) ** 2, s)


def _t_lin_vel_y(x: RewardInputs, s: float) -> np.ndarray:
    # no lateral DOF: the commanded value is scored against an identically
    # zero velocity, keeping the published weight in force
    return _kernel(x.commands[:, 1] ** 2, s)


def _t_ang_vel_yaw(x: RewardInputs, s: float) -> np.ndarray:
    return _kernel(x.commands[:, 2] ** 2, s)


def _t_upper_dofs_position(x: RewardInputs, s: float) -> np.ndarray:
    return _kernel(np.sum((x.q_upper - x.upper_ref) ** 2, axis=1), s)


def _t_lower_stand_still_task(x: RewardInputs, s: float) -> np.ndarray:
    return _kernel(np.sum((x.q_lower - x.q_lower_default) ** 2, axis=1), s)


_TERM_FNS = {
    "orientation": _t_orientation,
    "torso_orientation": _t_torso_orientation,
    "lower_action_rate": _t_lower_action_rate,
    "feet_orientation": _t_feet_orientation,
    "termination": _t_termination,
    "feet_parallel": _t_feet_parallel,
    "lower_stand_still_reg": _t_lower_stand_still_reg,
    "base_height": _t_base_height,
    "additional_torques": _t_additional_torques,
    "additional_dof_vel": _t_additional_dof_vel,
    "additional_dof_acc": _t_additional_dof_acc,
    "additional_action_rate": _t_additional_action_rate,
    "horizontal_ang_vel": _t_horizontal_ang_vel,
    "lin_vel_x": _t_lin_vel_x,
    "lin_vel_y": _t_lin_vel_y,
    "ang_vel_yaw": _t_ang_vel_yaw,
    "upper_dofs_position": _t_upper_dofs_position,
    "lower_stand_still_task": _t_lower_stand_still_task,
}


@dataclass
class RewardBreakdown:
    lower_total: np.ndarray        # (N,)
    upper_total: np.ndarray        # (N,)
    weighted: dict[str, np.ndarray]  # gated weighted value per term
    values: dict[str, np.ndarray]    # raw ungated term values


def compute_rewards(table: RewardTable, inputs: RewardInputs) -> RewardBreakdown:
    n = inputs.base_pitch.shape[0]
    force_on = inputs.force_active.astype(float)
    gates = {
        "always": np.ones(n),
        "force_on": force_on,
        "force_off": 1.0 - force_on,
    }
    lower = np.zeros(n)
    upper = np.zeros(n)
    weighted: dict[str, np.ndarray] = {}
    values: dict[str, np.ndarray] = {}
    for term in table.terms:
        value = _TERM_FNS[term.name](inputs, table.kernel_scale)
        contrib = term.weight * value * gates[term.gate]
        values[term.name] = value
        weighted[term.name] = contrib
        if term.stream in ("lower", "both"):
            lower = lower + contrib
        if term.stream in ("upper", "both"):
            upper = upper + contrib
    return RewardBreakdown(lower_total=lower, upper_total=upper,
                           weighted=weighted, values=values)


def tracking_error_upper(actual: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Mean absolute joint-angle error: per-joint mean, then time mean.

    ``actual`` and ``target`` are (T, ..., J); returns shape (...).
    """
    actual = np.asarray(actual, dtype=float)
    target = np.asarray(target, dtype=float)
    if actual.shape != target.shape:
        raise ValueError(
            f"series shapes differ: actual {actual.shape} vs target {target.shape}"
        )
    if actual.shape[0] < 1:
        raise ValueError("need at least one sample")
    return np.mean(np.abs(target - actual), axis=-1).mean(axis=0)


def tracking_error_velocity(actual: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Mean absolute velocity error over the commanded channels; same
    aggregation as the joint-angle metric."""
    return tracking_error_upper(actual, target)


def action_smoothness(actions: np.ndarray) -> np.ndarray:
    """Mean step-to-step action difference norm over a series (T, ..., A)."""
    actions = np.asarray(actions, dtype=float)
    if actions.shape[0] < 2:
        raise ValueError("need at least two actions to measure smoothness")
    diffs = np.linalg.norm(np.diff(actions, axis=0), axis=-1)
    return diffs.mean(axis=0)
