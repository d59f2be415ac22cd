"""Vectorized training environment for the planar humanoid.

Composes the physics step, the disturbance rigs, the motion references and
the reward table into a batched loop with domain randomization, per-env
episode bookkeeping and auto-reset. Policies interact through flat
observation vectors whose layout is fixed by :class:`ObsLayout`; critics
additionally see privileged channels (:class:`PrivilegedLayout`) that are
never part of the actor input.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from hafo_lab.forces import (
    LiftProfile,
    PushSchedule,
    cap_magnitude,
    gate_tension,
)
from hafo_lab.motions import MotionClip, blend_reference, builtin_clips
from hafo_lab.rewards import RewardInputs, RewardTable, compute_rewards
from hafo_lab.robot import ModelArrays, RobotModel, compute_kinematics, point_kinematics
from hafo_lab.sim import DynParams, ExternalLoad, SimParams, SimState, pd_torques, step as sim_step

# Order of the force attachment points in the privileged observation.
POINT_ORDER = ("pelvis", "hand_l", "hand_r", "torso")

BLEND_ANCHORS = ("measured", "default")


def _layout(fields: list[tuple[str, int]]) -> tuple[dict[str, slice], int]:
    slices = {}
    cursor = 0
    for name, width in fields:
        slices[name] = slice(cursor, cursor + width)
        cursor += width
    return slices, cursor


@dataclass(frozen=True, eq=False)
class ObsLayout:
    """Actor observation layout; every field is a slice into the flat vector."""

    n_lower: int
    n_upper: int
    base_ang_vel: slice
    projected_gravity: slice
    commands: slice
    upper_command: slice
    dof_pos: slice
    dof_vel: slice
    last_action_lower: slice
    last_action_upper: slice
    size: int

    @staticmethod
    def build(n_lower: int, n_upper: int) -> "ObsLayout":
        n = n_lower + n_upper
        slices, size = _layout([
            ("base_ang_vel", 1),
            ("projected_gravity", 2),
            ("commands", 4),
            ("upper_command", n_upper),
            ("dof_pos", n),
            ("dof_vel", n),
            ("last_action_lower", n_lower),
            ("last_action_upper", n_upper),
        ])
        return ObsLayout(n_lower=n_lower, n_upper=n_upper, size=size, **slices)

    @staticmethod
    def for_model(model: RobotModel) -> "ObsLayout":
        return ObsLayout.build(model.n_dof_lower, model.n_dof_upper)

    def names(self) -> tuple[str, ...]:
        return ("base_ang_vel", "projected_gravity", "commands", "upper_command",
                "dof_pos", "dof_vel", "last_action_lower", "last_action_upper")


@dataclass(frozen=True, eq=False)
class PrivilegedLayout:
    """Critic observation: the actor fields plus ground-truth channels."""

    n_lower: int
    n_upper: int
    base_ang_vel: slice
    projected_gravity: slice
    commands: slice
    upper_command: slice
    dof_pos: slice
    dof_vel: slice
    last_action_lower: slice
    last_action_upper: slice
    base_lin_vel: slice
    point_forces: slice
    size: int

    @staticmethod
    def build(n_lower: int, n_upper: int) -> "PrivilegedLayout":
        n = n_lower + n_upper
        slices, size = _layout([
            ("base_ang_vel", 1),
            ("projected_gravity", 2),
            ("commands", 4),
            ("upper_command", n_upper),
            ("dof_pos", n),
            ("dof_vel", n),
            ("last_action_lower", n_lower),
            ("last_action_upper", n_upper),
            ("base_lin_vel", 2),
            ("point_forces", 2 * len(POINT_ORDER)),
        ])
        return PrivilegedLayout(n_lower=n_lower, n_upper=n_upper, size=size, **slices)

    @staticmethod
    def for_model(model: RobotModel) -> "PrivilegedLayout":
        return PrivilegedLayout.build(model.n_dof_lower, model.n_dof_upper)

    def names(self) -> tuple[str, ...]:
        return ("base_ang_vel", "projected_gravity", "commands", "upper_command",
                "dof_pos", "dof_vel", "last_action_lower", "last_action_upper",
                "base_lin_vel", "point_forces")


def _check_range(name: str, rng: tuple[float, float]) -> None:
    lo, hi = rng
    if not np.isfinite(lo) or not np.isfinite(hi) or lo > hi:
        raise ValueError(f"{name}: bad range {rng}")


@dataclass(frozen=True)
class DrRanges:
    """Per-env physical randomization intervals, sampled uniformly at reset."""

    friction: tuple[float, float] = (0.25, 1.25)
    pd_scale: tuple[float, float] = (0.9, 1.1)
    base_mass_delta: tuple[float, float] = (-1.0, 3.0)   # kg, added to the base
    link_mass_scale: tuple[float, float] = (0.9, 1.2)    # per non-base link
    base_com_offset: float = 0.01                        # m, both components
    control_delay_ms: tuple[float, float] = (0.0, 20.0)

    def __post_init__(self) -> None:
        _check_range("friction", self.friction)
        _check_range("pd_scale", self.pd_scale)
        _check_range("base_mass_delta", self.base_mass_delta)
        _check_range("link_mass_scale", self.link_mass_scale)
        _check_range("control_delay_ms", self.control_delay_ms)
        if self.friction[0] <= 0.0:
            raise ValueError("friction range must stay positive")
        if self.link_mass_scale[0] <= 0.0:
            raise ValueError("link_mass_scale range must stay positive")
        if self.base_com_offset < 0.0:
            raise ValueError("base_com_offset must be nonnegative")
        if self.control_delay_ms[0] < 0.0:
            raise ValueError("control_delay_ms must be nonnegative")

    @staticmethod
    def none() -> "DrRanges":
        """Every interval collapsed to its nominal point; no randomization."""
        return DrRanges(
            friction=(0.8, 0.8),
            pd_scale=(1.0, 1.0),
            base_mass_delta=(0.0, 0.0),
            link_mass_scale=(1.0, 1.0),
            base_com_offset=0.0,
            control_delay_ms=(0.0, 0.0),
        )


@dataclass(frozen=True)
class DrSample:
    """One env's draw from :class:`DrRanges`."""

    friction: float
    pd_scale: float
    base_mass_delta: float
    link_mass_scale: np.ndarray   # (L - 1,)
    base_com_offset: np.ndarray   # (2,)
    control_delay_ms: float


def sample_dr(ranges: DrRanges, rng: np.random.Generator, n_links: int) -> DrSample:
    """Draw one env's physical parameters; the draw order is part of the
    determinism contract and must not change."""
    off = ranges.base_com_offset
    return DrSample(
        friction=float(rng.uniform(*ranges.friction)),
        pd_scale=float(rng.uniform(*ranges.pd_scale)),
        base_mass_delta=float(rng.uniform(*ranges.base_mass_delta)),
        link_mass_scale=rng.uniform(*ranges.link_mass_scale, size=n_links - 1),
        base_com_offset=rng.uniform(-off, off, size=2) if off > 0.0 else np.zeros(2),
        control_delay_ms=float(rng.uniform(*ranges.control_delay_ms)),
    )


@dataclass(frozen=True)
class ScenarioConfig:
    """What happens to the robot during an episode.

    Magnitudes are the full-difficulty values; the live curriculum scale is
    applied by the env. Fixed ``pushes`` run on episode time and exist for
    scripted evaluations; random pushes are governed by the magnitude and
    interval fields.
    """

    name: str = "locomotion"
    episode_length: float = 20.0
    vel_x_range: tuple[float, float] = (-0.5, 0.5)
    vel_y_range: tuple[float, float] = (-0.5, 0.5)
    yaw_range: tuple[float, float] = (-0.5, 0.5)
    stance_probability: float = 0.25
    command_resample_period: float = 0.0   # s, 0 keeps commands fixed
    hand_force_magnitude: float = 0.0      # N, exact per hand while holding
    hand_probability: float = 0.0          # chance a hold window is active
    hand_hold_period: float = 2.0          # s between direction redraws
    push_magnitude: float = 0.0            # N, random pushes drawn U(0, mag)
    push_interval: tuple[float, float] = (2.0, 6.0)
    push_duration: tuple[float, float] = (0.1, 0.3)
    pushes: tuple[PushSchedule, ...] = ()
    suspension: LiftProfile | None = None
    suspension_probability: float = 0.0
    suspension_start: str = "ground"       # or "airborne"
    rig_kp: float = 2000.0
    rig_force_cap: float | None = None
    rig_margin: float = 2.0                # s the rig stays armed past the cycle
    rig_start_jitter: float = 0.5          # s, uniform delay before the cycle
    rig_dropout_after: float | None = None  # s into the cycle; permanent cutoff

    def __post_init__(self) -> None:
        if self.episode_length <= 0.0:
            raise ValueError("episode_length must be positive")
        _check_range("vel_x_range", self.vel_x_range)
        _check_range("vel_y_range", self.vel_y_range)
        _check_range("yaw_range", self.yaw_range)
        _check_range("push_interval", self.push_interval)
        _check_range("push_duration", self.push_duration)
        for name, p in (("stance_probability", self.stance_probability),
                        ("hand_probability", self.hand_probability),
                        ("suspension_probability", self.suspension_probability)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.hand_force_magnitude < 0.0 or self.push_magnitude < 0.0:
            raise ValueError("force magnitudes must be nonnegative")
        if self.hand_hold_period <= 0.0:
            raise ValueError("hand_hold_period must be positive")
        if self.suspension_start not in ("ground", "airborne"):
            raise ValueError(
                f"suspension_start must be 'ground' or 'airborne', "
                f"got {self.suspension_start!r}")
        if self.rig_kp <= 0.0:
            raise ValueError("rig_kp must be positive")
        if self.rig_force_cap is not None and self.rig_force_cap < 0.0:
            raise ValueError("rig_force_cap must be nonnegative when set")
        if self.rig_margin < 0.0 or self.rig_start_jitter < 0.0:
            raise ValueError("rig timing fields must be nonnegative")
        if self.rig_dropout_after is not None and self.rig_dropout_after < 0.0:
            raise ValueError("rig_dropout_after must be nonnegative when set")
        if self.push_interval[0] <= 0.0:
            raise ValueError("push_interval must stay positive")


_DEFAULT_PROFILE = LiftProfile(lift_height=0.4, lift_rate=0.2, hold=2.0,
                               lower_rate=0.2)

SCENARIO_NAMES = ("locomotion", "hand_force", "push_sweep", "suspension", "mixed")


def scenario_preset(name: str) -> ScenarioConfig:
    """Bundled scenario configurations by name."""
    if name == "locomotion":
        return ScenarioConfig(name=name)
    if name == "hand_force":
        return ScenarioConfig(name=name, hand_force_magnitude=30.0,
                              hand_probability=1.0)
    if name == "push_sweep":
        return ScenarioConfig(name=name, stance_probability=1.0)
    if name == "suspension":
        return ScenarioConfig(
            name=name, stance_probability=1.0, suspension=_DEFAULT_PROFILE,
            suspension_probability=1.0, rig_force_cap=600.0)
    if name == "mixed":
        return ScenarioConfig(
            name=name, hand_force_magnitude=30.0, hand_probability=0.5,
            push_magnitude=50.0, suspension=_DEFAULT_PROFILE,
            suspension_probability=0.25, rig_force_cap=600.0)
    raise ValueError(f"unknown scenario {name!r}; known: {SCENARIO_NAMES}")


def scale_disturbances(scenario: ScenarioConfig, scale: float) -> ScenarioConfig:
    """Multiply every disturbance magnitude; composes multiplicatively."""
    if scale < 0.0:
        raise ValueError(f"scale must be nonnegative, got {scale}")
    cap = scenario.rig_force_cap
    return dataclasses.replace(
        scenario,
        hand_force_magnitude=scenario.hand_force_magnitude * scale,
        push_magnitude=scenario.push_magnitude * scale,
        pushes=tuple(dataclasses.replace(p, magnitude=p.magnitude * scale)
                     for p in scenario.pushes),
        rig_force_cap=None if cap is None else cap * scale,
    )


def sample_commands(rng: np.random.Generator, scenario: ScenarioConfig) -> np.ndarray:
    """(vx, vy, yaw rate, stance flag) for one env; stance zeroes the rest."""
    vx = rng.uniform(*scenario.vel_x_range)
    vy = rng.uniform(*scenario.vel_y_range)
    yaw = rng.uniform(*scenario.yaw_range)
    stance = rng.uniform() < scenario.stance_probability
    if stance:
        vx = vy = yaw = 0.0
    return np.array([vx, vy, yaw, float(stance)])


class VecEnv:
    """Batched episodes over one scenario with auto-reset.

    ``step`` takes the lower agent's unitless action and the upper agent's
    absolute PD target (radians); both are recorded, optionally delayed by
    the randomized actuation latency, and held for ``decimation`` physics
    substeps. Returns ``(obs, privileged, reward_lower, reward_upper, done,
    info)``; observations are those of the post-reset state for finished
    envs, with the pre-reset privileged vector available in
    ``info["terminal_privileged"]`` for bootstrapping.
    """

    def __init__(
        self,
        model: RobotModel,
        scenario: ScenarioConfig | None = None,
        *,
        n_envs: int = 16,
        master_seed: int = 0,
        index_offset: int = 0,
        decimation: int = 5,
        sim_params: SimParams | None = None,
        dr_ranges: DrRanges | None = None,
        clips: dict[str, MotionClip] | None = None,
        reward_table: RewardTable | None = None,
        blend_anchor: str = "measured",
        action_scale_lower: float = 0.25,
        joint_noise: float = 0.05,
        feet_window: int = 10,
        pitch_limit: float = 1.0,
        height_floor_fraction: float = 0.5,
    ):
        if n_envs <= 0:
            raise ValueError("n_envs must be positive")
        if decimation <= 0:
            raise ValueError("decimation must be positive")
        if blend_anchor not in BLEND_ANCHORS:
            raise ValueError(
                f"blend_anchor must be one of {BLEND_ANCHORS}, got {blend_anchor!r}")
        self.model = model
        self.arrays: ModelArrays = model.arrays
        self.scenario = scenario if scenario is not None else scenario_preset("locomotion")
        self.n_envs = n_envs
        self.params = sim_params if sim_params is not None else SimParams()
        self.decimation = decimation
        self.dt_control = self.params.dt * decimation
        self.dr_ranges = dr_ranges if dr_ranges is not None else DrRanges()
        self.reward_table = reward_table if reward_table is not None else RewardTable.bundled()
        self.blend_anchor = blend_anchor
        self.action_scale_lower = float(action_scale_lower)
        self.joint_noise = float(joint_noise)
        self.feet_window = int(feet_window)
        self.pitch_limit = float(pitch_limit)
        self.height_floor = float(height_floor_fraction) * model.default_base_height

        self.n_lower = model.n_dof_lower
        self.n_upper = model.n_dof_upper
        self.obs_layout = ObsLayout.build(self.n_lower, self.n_upper)
        self.priv_layout = PrivilegedLayout.build(self.n_lower, self.n_upper)
        self.lower_slice = model.lower_slice
        self.upper_slice = model.upper_slice

        source = clips if clips is not None else builtin_clips(self.n_upper)
        self.clips: tuple[MotionClip, ...] = tuple(source.values())
        if not self.clips:
            raise ValueError("need at least one motion clip")
        for clip in self.clips:
            if clip.n_joints != self.n_upper:
                raise ValueError(
                    f"clip {clip.name!r} drives {clip.n_joints} joints, "
                    f"model has {self.n_upper} upper joints")

        self.max_steps = max(1, round(self.scenario.episode_length / self.dt_control))
        self.alpha = 1.0
        self.force_scale = 1.0

        self.rngs = [
            np.random.Generator(np.random.PCG64(
                np.random.SeedSequence((master_seed, index_offset + i))))
            for i in range(n_envs)
        ]

        n = n_envs
        arr = self.arrays
        self.state = SimState.standing(model, n)
        self.dyn = DynParams.defaults(arr, n, friction=self.params.friction)
        self._pd_scale = np.ones(n)
        self._delay_steps = np.zeros(n, dtype=int)
        max_delay = int(np.floor(
            self.dr_ranges.control_delay_ms[1] / 1000.0 / self.dt_control))
        self._hist_len = max_delay + 1
        self._hist_lower = np.zeros((self._hist_len, n, self.n_lower))
        self._hist_upper = np.zeros((self._hist_len, n, self.n_upper))
        self._hist_pos = 0

        self.t = np.zeros(n)
        self.steps = np.zeros(n, dtype=int)
        self.command = np.zeros((n, 4))
        self.clip_index = np.zeros(n, dtype=int)
        self.clip_phase = np.zeros(n)

        self.hand_force = np.zeros((n, 2, 2))
        self.hand_until = np.full(n, np.inf)

        self.push_force = np.zeros((n, 2))
        self.push_until = np.zeros(n)
        self.push_next = np.full(n, np.inf)

        self.susp_on = np.zeros(n, dtype=bool)
        self.susp_anchor = np.zeros(n)
        self.susp_t0 = np.zeros(n)
        self.susp_end = np.zeros(n)
        self.susp_drop = np.full(n, np.inf)
        # the rig's resting setpoint is the attachment point's standing height
        self._rig_set_z = model.default_base_height + float(arr.pelvis_offset[1])
        self._rig_kd = 2.0 * float(np.sqrt(self.scenario.rig_kp * model.total_mass))

        self.prev_action_lower = np.zeros((n, self.n_lower))
        self.prev_action_upper = np.zeros((n, self.n_upper))
        self.prev_q_dot_upper = np.zeros((n, self.n_upper))
        self._gap_buf = np.zeros((self.feet_window, n))
        self._gap_pos = 0
        self._point_forces = np.zeros((n, len(POINT_ORDER), 2))
        self._gate_norm = np.zeros(n)
        self._theta_ref = np.zeros((n, self.n_upper))

        self.ep_return_lower = np.zeros(n)
        self.ep_return_upper = np.zeros(n)
        self.last_rewards = None

    # ------------------------------------------------------------------ admin

    def set_difficulty(self, alpha: float, force_scale: float) -> None:
        """Curriculum knobs: motion blend fraction and disturbance scale."""
        for name, v in (("alpha", alpha), ("force_scale", force_scale)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        self.alpha = float(alpha)
        self.force_scale = float(force_scale)

    def theta_ref(self) -> np.ndarray:
        """Blended upper reference for the current observation, (N, J_u)."""
        return self._theta_ref.copy()

    # ------------------------------------------------------------------ reset

    def reset(self) -> tuple[np.ndarray, np.ndarray]:
        self._reset_envs(np.arange(self.n_envs))
        obs, priv = self._observe()
        return obs, priv

    def _reset_envs(self, rows: np.ndarray) -> None:
        if len(rows) == 0:
            return
        arr = self.arrays
        sc = self.scenario
        default_q = arr.q_default
        for i in rows:
            rng = self.rngs[i]
            dr = sample_dr(self.dr_ranges, rng, arr.n_links)
            self.dyn.masses[i] = arr.masses
            self.dyn.masses[i, 0] += dr.base_mass_delta
            self.dyn.masses[i, 1:] *= dr.link_mass_scale
            self.dyn.coms[i] = arr.coms
            self.dyn.coms[i, 0] += dr.base_com_offset
            self.dyn.inertias[i] = arr.inertias
            self.dyn.friction[i] = dr.friction
            self._pd_scale[i] = dr.pd_scale
            self._delay_steps[i] = int(np.floor(
                dr.control_delay_ms / 1000.0 / self.dt_control))

            q = default_q + rng.uniform(-self.joint_noise, self.joint_noise,
                                        size=arr.n_dof)
            self.state.q[i] = np.clip(q, arr.q_lo, arr.q_hi)
            self.state.q_dot[i] = 0.0
            self.state.base[i] = (0.0, self.model.default_base_height, 0.0)
            self.state.base_vel[i] = 0.0

            self.command[i] = sample_commands(rng, sc)
            self.clip_index[i] = rng.integers(len(self.clips))
            self.clip_phase[i] = rng.uniform(0.0, self.clips[self.clip_index[i]].duration)

            if sc.hand_probability > 0.0:
                self._redraw_hand(i, 0.0)
            else:
                self.hand_force[i] = 0.0
                self.hand_until[i] = np.inf

            if sc.suspension is not None and rng.uniform() < sc.suspension_probability:
                self.susp_on[i] = True
                self.susp_anchor[i] = rng.uniform(-0.01, 0.01)
                if sc.suspension_start == "airborne":
                    t0 = -sc.suspension.lift_time
                    sag = self.dyn.masses[i].sum() * self.params.gravity / sc.rig_kp
                    self.state.base[i, 1] = (self.model.default_base_height
                                             + sc.suspension.lift_height - sag)
                else:
                    t0 = rng.uniform(0.0, sc.rig_start_jitter) \
                        if sc.rig_start_jitter > 0.0 else 0.0
                self.susp_t0[i] = t0
                self.susp_end[i] = t0 + sc.suspension.total_duration + sc.rig_margin
                self.susp_drop[i] = np.inf if sc.rig_dropout_after is None \
                    else t0 + sc.rig_dropout_after
            else:
                self.susp_on[i] = False
                self.susp_drop[i] = np.inf

            if sc.push_magnitude > 0.0:
                self.push_next[i] = rng.uniform(*sc.push_interval)
            else:
                self.push_next[i] = np.inf
            self.push_force[i] = 0.0
            self.push_until[i] = 0.0

            self.t[i] = 0.0
            self.steps[i] = 0
            self.prev_action_lower[i] = 0.0
            self.prev_action_upper[i] = self.state.q[i, self.upper_slice]
            self.prev_q_dot_upper[i] = 0.0
            self._point_forces[i] = 0.0
            self._gate_norm[i] = 0.0
            self.ep_return_lower[i] = 0.0
            self.ep_return_upper[i] = 0.0

        kin = compute_kinematics(
            arr, self.state.base[rows], self.state.base_vel[rows],
            self.state.q[rows], self.state.q_dot[rows])
        left, _, _, _ = point_kinematics(kin, int(arr.foot_link[0]), arr.foot_offset[0])
        right, _, _, _ = point_kinematics(kin, int(arr.foot_link[1]), arr.foot_offset[1])
        self._gap_buf[:, rows] = left[:, 1] - right[:, 1]

    def _redraw_hand(self, i: int, now: float) -> None:
        rng = self.rngs[i]
        sc = self.scenario
        active = rng.uniform() < sc.hand_probability
        if active:
            angles = rng.uniform(0.0, 2.0 * np.pi, size=2)
            mag = sc.hand_force_magnitude * self.force_scale
            self.hand_force[i] = mag * np.stack(
                [np.cos(angles), np.sin(angles)], axis=1)
        else:
            self.hand_force[i] = 0.0
        self.hand_until[i] = now + sc.hand_hold_period

    # ------------------------------------------------------------- randomness

    def _refresh_disturbances(self) -> None:
        """Per-control-step redraws: commands, hand holds, push scheduling."""
        sc = self.scenario
        if sc.command_resample_period > 0.0:
            period = max(1, round(sc.command_resample_period / self.dt_control))
            due = (self.steps > 0) & (self.steps % period == 0)
            for i in np.flatnonzero(due):
                self.command[i] = sample_commands(self.rngs[int(i)], sc)
        if sc.hand_probability > 0.0:
            for i in np.flatnonzero(self.t >= self.hand_until):
                self._redraw_hand(int(i), self.t[i])
        if sc.push_magnitude > 0.0:
            for i in np.flatnonzero(self.t >= self.push_next):
                rng = self.rngs[int(i)]
                mag = rng.uniform(0.0, sc.push_magnitude * self.force_scale)
                ang = rng.uniform(0.0, 2.0 * np.pi)
                dur = rng.uniform(*sc.push_duration)
                # same convention as PushSchedule: planar, sagittal component
                self.push_force[i] = mag * np.array([np.cos(ang), 0.0])
                self.push_until[i] = self.t[i] + dur
                self.push_next[i] = self.t[i] + dur + rng.uniform(*sc.push_interval)

    # ----------------------------------------------------------------- forces

    def _substep_loads(self, t_now: np.ndarray) -> list[ExternalLoad]:
        """World-frame loads for one physics substep at per-env times ``t_now``.

        Updates the privileged force snapshot and the gate norm (spring rig
        plus hand forces; pushes deliberately excluded from the gate)."""
        arr = self.arrays
        n = self.n_envs
        sc = self.scenario
        loads: list[ExternalLoad] = []
        self._point_forces[:] = 0.0

        rig = np.zeros((n, 2))
        if sc.suspension is not None and np.any(self.susp_on):
            active = (self.susp_on & (t_now >= self.susp_t0)
                      & (t_now < self.susp_end) & (t_now < self.susp_drop))
            if np.any(active) and self.force_scale > 0.0:
                kin = compute_kinematics(arr, self.state.base, self.state.base_vel,
                                         self.state.q, self.state.q_dot)
                pos, vel, _, _ = point_kinematics(kin, arr.pelvis_link,
                                                  arr.pelvis_offset)
                off, rate = sc.suspension.offsets_at(t_now - self.susp_t0)
                x_des = np.stack(
                    [self.susp_anchor, self._rig_set_z + off], axis=1)
                xd_des = np.stack([np.zeros(n), rate], axis=1)
                f = sc.rig_kp * (x_des - pos) + self._rig_kd * (xd_des - vel)
                f = gate_tension(f)
                if sc.rig_force_cap is not None:
                    f = cap_magnitude(f, sc.rig_force_cap)
                rig = np.where(active[:, None], f * self.force_scale, 0.0)

        push = np.zeros((n, 2))
        if sc.push_magnitude > 0.0:
            live = t_now < self.push_until
            push += np.where(live[:, None], self.push_force, 0.0)
        for schedule in sc.pushes:
            push += schedule.force_at(t_now)

        hand_norm = np.zeros(n)
        if np.any(self.hand_force != 0.0):
            for k in range(2):
                f = self.hand_force[:, k]
                loads.append(ExternalLoad(
                    link=int(arr.hand_link[k]), offset=arr.hand_offset[k], force=f))
                self._point_forces[:, 1 + k] = f
                hand_norm += np.linalg.norm(f, axis=1)

        pelvis = rig + push
        if np.any(pelvis != 0.0):
            loads.append(ExternalLoad(
                link=arr.pelvis_link, offset=arr.pelvis_offset, force=pelvis))
        self._point_forces[:, 0] = pelvis
        self._gate_norm = np.linalg.norm(rig, axis=1) + hand_norm
        return loads

    # ------------------------------------------------------------ observation

    def _compute_theta_ref(self) -> np.ndarray:
        target = np.zeros((self.n_envs, self.n_upper))
        times = self.clip_phase + self.t
        for ci in np.unique(self.clip_index):
            rows = self.clip_index == ci
            target[rows] = self.clips[ci].sample(times[rows])
        if self.blend_anchor == "measured":
            anchor = self.state.q[:, self.upper_slice]
        else:
            anchor = np.broadcast_to(
                self.arrays.q_default[self.upper_slice], target.shape)
        ref = blend_reference(anchor, target, self.alpha)
        return np.clip(ref, self.arrays.q_lo[self.upper_slice],
                       self.arrays.q_hi[self.upper_slice])

    def _observe(self) -> tuple[np.ndarray, np.ndarray]:
        lay, priv_lay = self.obs_layout, self.priv_layout
        n = self.n_envs
        state = self.state
        theta = state.base[:, 2]
        self._theta_ref = self._compute_theta_ref()

        obs = np.zeros((n, lay.size))
        obs[:, lay.base_ang_vel] = state.base_vel[:, 2:3]
        obs[:, lay.projected_gravity] = np.stack(
            [-np.sin(theta), -np.cos(theta)], axis=1)
        obs[:, lay.commands] = self.command
        obs[:, lay.upper_command] = self._theta_ref
        obs[:, lay.dof_pos] = state.q - self.arrays.q_default
        obs[:, lay.dof_vel] = state.q_dot
        obs[:, lay.last_action_lower] = self.prev_action_lower
        obs[:, lay.last_action_upper] = self.prev_action_upper

        priv = np.zeros((n, priv_lay.size))
        priv[:, :lay.size] = obs
        priv[:, priv_lay.base_lin_vel] = state.base_vel[:, :2]
        priv[:, priv_lay.point_forces] = self._point_forces.reshape(n, -1)
        return obs, priv

    # ------------------------------------------------------------------- step

    def _validate_action(self, name: str, a: np.ndarray, dim: int) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if a.shape != (self.n_envs, dim):
            raise ValueError(
                f"{name} must have shape {(self.n_envs, dim)}, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} contains non-finite entries")
        return a

    def step(self, action_lower: np.ndarray, theta_upper: np.ndarray):
        arr = self.arrays
        n = self.n_envs
        a_l = self._validate_action("action_lower", action_lower, self.n_lower)
        th_u = self._validate_action("theta_upper", theta_upper, self.n_upper)

        self._refresh_disturbances()

        self._hist_pos = (self._hist_pos + 1) % self._hist_len
        self._hist_lower[self._hist_pos] = a_l
        self._hist_upper[self._hist_pos] = th_u
        d_eff = np.minimum(self._delay_steps, self.steps)
        slot = (self._hist_pos - d_eff) % self._hist_len
        rows = np.arange(n)
        a_l_eff = self._hist_lower[slot, rows]
        th_u_eff = self._hist_upper[slot, rows]

        lo, hi = arr.q_lo, arr.q_hi
        q_target = np.empty((n, arr.n_dof))
        q_target[:, self.lower_slice] = np.clip(
            arr.q_default[self.lower_slice]
            + self.action_scale_lower * a_l_eff,
            lo[self.lower_slice], hi[self.lower_slice])
        q_target[:, self.upper_slice] = np.clip(
            th_u_eff, lo[self.upper_slice], hi[self.upper_slice])

        scale = self._pd_scale[:, None]
        info_sub = None
        for k in range(self.decimation):
            loads = self._substep_loads(self.t + k * self.params.dt)
            tau = pd_torques(arr, self.state, q_target,
                             kp_scale=scale, kd_scale=scale)
            self.state, info_sub = sim_step(arr, self.params, self.state, tau,
                                            loads, self.dyn)
        self.t = self.t + self.dt_control
        self.steps = self.steps + 1

        diverged = ~(
            np.all(np.isfinite(self.state.base), axis=1)
            & np.all(np.isfinite(self.state.base_vel), axis=1)
            & np.all(np.isfinite(self.state.q), axis=1)
            & np.all(np.isfinite(self.state.q_dot), axis=1)
            & (np.abs(self.state.base_vel).max(axis=1) < 1e3)
            & (np.abs(self.state.q_dot).max(axis=1) < 1e3)
        )
        torques_upper = info_sub.applied_torques[:, self.upper_slice].copy()
        foot_pos = info_sub.contacts.foot_pos
        self._gap_pos = (self._gap_pos + 1) % self.feet_window
        self._gap_buf[self._gap_pos] = foot_pos[:, 0, 1] - foot_pos[:, 1, 1]
        if np.any(diverged):
            # scrub every derived quantity so the blown-up rows cannot leak
            # non-finite values into rewards or observations
            clean = SimState.standing(self.model, int(diverged.sum()))
            self.state.base[diverged] = clean.base
            self.state.base_vel[diverged] = clean.base_vel
            self.state.q[diverged] = clean.q
            self.state.q_dot[diverged] = clean.q_dot
            torques_upper[diverged] = 0.0
            self._gap_buf[:, diverged] = 0.0
            self._point_forces[diverged] = 0.0
            self._gate_norm[diverged] = 0.0
            self.prev_q_dot_upper[diverged] = 0.0

        rig_live = np.zeros(n, dtype=bool)
        if self.scenario.suspension is not None:
            rig_live = (self.susp_on & (self.t >= self.susp_t0)
                        & (self.t < self.susp_end) & (self.t < self.susp_drop))
        pitch_fail = np.abs(self.state.base[:, 2]) > self.pitch_limit
        height_fail = (self.state.base[:, 1] < self.height_floor) & ~rig_live
        terminated = pitch_fail | height_fail | diverged
        timeouts = (self.steps >= self.max_steps) & ~terminated
        done = terminated | timeouts

        q_dot_upper = self.state.q_dot[:, self.upper_slice]
        inputs = RewardInputs(
            base_pitch=self.state.base[:, 2],
            base_ang_vel=self.state.base_vel[:, 2],
            base_height=self.state.base[:, 1],
            base_lin_vel=self.state.base_vel[:, :2],
            commands=self.command[:, :3],
            q_lower=self.state.q[:, self.lower_slice],
            q_lower_default=arr.q_default[self.lower_slice],
            q_upper=self.state.q[:, self.upper_slice],
            upper_ref=self._theta_ref,
            q_dot_upper=q_dot_upper,
            q_acc_upper=(q_dot_upper - self.prev_q_dot_upper) / self.dt_control,
            torques_upper=torques_upper,
            action_lower=a_l,
            prev_action_lower=self.prev_action_lower,
            action_upper=th_u,
            prev_action_upper=self.prev_action_upper,
            feet_height_var=np.var(self._gap_buf, axis=0),
            height_target=self.model.default_base_height,
            terminated=terminated,
            force_active=self._gate_norm > 1e-6,
        )
        breakdown = compute_rewards(self.reward_table, inputs)
        self.last_rewards = breakdown
        r_lower = breakdown.lower_total
        r_upper = breakdown.upper_total

        self.prev_action_lower = a_l.copy()
        self.prev_action_upper = th_u.copy()
        self.prev_q_dot_upper = q_dot_upper.copy()

        self.ep_return_lower += r_lower
        self.ep_return_upper += r_upper
        info = {
            "timeouts": timeouts,
            "terminated": terminated,
            "diverged": diverged,
            "episode_returns_lower": self.ep_return_lower[done].copy(),
            "episode_returns_upper": self.ep_return_upper[done].copy(),
            "episode_lengths": self.steps[done].copy(),
        }

        if np.any(done):
            _, priv_pre = self._observe()
            info["terminal_privileged"] = priv_pre
            self._reset_envs(np.flatnonzero(done))
        obs, priv = self._observe()
        if "terminal_privileged" not in info:
            info["terminal_privileged"] = priv
        return obs, priv, r_lower, r_upper, done, info
