"""Disturbance rigs: virtual spring-dampers, force tiers, timed pushes.

All forces here are world-frame planar vectors (x, z) produced from the
current position and velocity of a named body point. The simulator applies
them through ``ExternalLoad``; nothing in this module touches sim state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def spring_damper_force(
    kp: float | np.ndarray,
    kd: float | np.ndarray,
    x_des: np.ndarray,
    x: np.ndarray,
    xd_des: np.ndarray | float = 0.0,
    xd: np.ndarray | float = 0.0,
) -> np.ndarray:
    """Componentwise virtual spring-damper pulling ``x`` toward ``x_des``."""
    return np.asarray(kp) * (np.asarray(x_des) - np.asarray(x)) + np.asarray(kd) * (
        np.asarray(xd_des) - np.asarray(xd)
    )


def stiffness_only_force(
    kp: float | np.ndarray, x_des: np.ndarray, x: np.ndarray
) -> np.ndarray:
    """Spring with no damping path, the rig ablation used for comparison runs."""
    return np.asarray(kp) * (np.asarray(x_des) - np.asarray(x))


def gate_tension(force: np.ndarray) -> np.ndarray:
    """Zero the force wherever its vertical component is not pulling upward.

    A rope analog: the rig can lift but never push down.
    """
    force = np.asarray(force, dtype=float)
    keep = force[..., 1:2] > 0.0
    return np.where(keep, force, 0.0)


def cap_magnitude(force: np.ndarray, cap: float) -> np.ndarray:
    """Rescale any force vector whose norm exceeds ``cap``; direction is kept."""
    force = np.asarray(force, dtype=float)
    norm = np.linalg.norm(force, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(norm > cap, cap / norm, 1.0)
    return force * np.where(np.isfinite(scale), scale, 1.0)


@dataclass(frozen=True)
class LiftProfile:
    """Vertical winch trajectory: ramp up, hold, ramp back down."""

    lift_height: float  # m
    lift_rate: float    # m/s
    hold: float         # s
    lower_rate: float   # m/s

    def __post_init__(self) -> None:
        if self.lift_height <= 0.0 or self.lift_rate <= 0.0 \
                or self.lower_rate <= 0.0:
            raise ValueError("lift_height and both rates must be positive")
        if self.hold < 0.0:
            raise ValueError("hold must be nonnegative")

    @property
    def lift_time(self) -> float:
        return self.lift_height / self.lift_rate

    @property
    def lower_time(self) -> float:
        return self.lift_height / self.lower_rate

    @property
    def total_duration(self) -> float:
        return self.lift_time + self.hold + self.lower_time

    def offset_at(self, rel_t: float) -> tuple[float, float]:
        """(vertical offset, vertical rate) at ``rel_t`` seconds into
        the cycle; clamped flat outside it."""
        off, rate = self.offsets_at(np.asarray(rel_t, dtype=float))
        return float(off), float(rate)

    def offsets_at(self, rel_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`offset_at` over an array of cycle times."""
        rel_t = np.asarray(rel_t, dtype=float)
        t1 = self.lift_time
        t2 = t1 + self.hold
        t3 = self.total_duration
        phases = [rel_t <= 0.0, rel_t < t1, rel_t < t2, rel_t < t3]
        off = np.select(
            phases,
            [0.0, self.lift_rate * rel_t, self.lift_height,
             self.lift_height - self.lower_rate * (rel_t - t2)],
            default=0.0)
        rate = np.select(
            phases, [0.0, self.lift_rate, 0.0, -self.lower_rate], default=0.0)
        return off, rate


@dataclass
class SpringDamperAttachment:
    """A virtual rig clamped to one named body point.

    ``anchor`` is the desired world position of the point; per-env anchors are
    allowed as (N, 2). ``stiffness_only`` drops the damping path entirely.
    A ``profile`` offsets the anchor's vertical component over time (winch);
    ``active_window`` bounds when the rig acts at all, and ``dropout_time``
    kills the force permanently from that instant on.
    """

    point: str                       # "pelvis", "hand_l", "hand_r", "torso"
    kp: float
    kd: float
    anchor: np.ndarray
    anchor_vel: np.ndarray = field(default_factory=lambda: np.zeros(2))
    tension_only: bool = False
    force_cap: float | None = None
    stiffness_only: bool = False
    active_window: tuple[float, float] | None = None
    dropout_time: float | None = None
    profile: LiftProfile | None = None

    def _shaped(self, f: np.ndarray, scale: float | np.ndarray) -> np.ndarray:
        if self.tension_only:
            f = gate_tension(f)
        if self.force_cap is not None:
            f = cap_magnitude(f, self.force_cap)
        scale = np.asarray(scale, dtype=float)
        if scale.ndim == 1:
            scale = scale[:, None]
        return f * scale

    def force(self, pos: np.ndarray, vel: np.ndarray, scale: float | np.ndarray = 1.0
              ) -> np.ndarray:
        """World force on the attached point, after gating, capping and scaling.

        Time-independent path: the anchor is used as-is, windows and the
        profile are ignored. Use :meth:`force_at` inside an episode.
        """
        if self.stiffness_only:
            f = stiffness_only_force(self.kp, self.anchor, pos)
        else:
            f = spring_damper_force(self.kp, self.kd, self.anchor, pos,
                                    self.anchor_vel, vel)
        return self._shaped(f, scale)

    def active_at(self, t: float) -> bool:
        if self.dropout_time is not None and t >= self.dropout_time:
            return False
        if self.active_window is not None:
            lo, hi = self.active_window
            if not lo <= t < hi:
                return False
        return True

    def desired_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Anchor position and velocity at time ``t``."""
        x_des = np.array(self.anchor, dtype=float, copy=True)
        xd_des = np.broadcast_to(
            np.asarray(self.anchor_vel, dtype=float), x_des.shape).copy()
        if self.profile is not None:
            t0 = self.active_window[0] if self.active_window else 0.0
            offset, rate = self.profile.offset_at(t - t0)
            x_des[..., 1] += offset
            xd_des[..., 1] += rate
        return x_des, xd_des

    def force_at(self, t: float, pos: np.ndarray, vel: np.ndarray,
                 scale: float | np.ndarray = 1.0) -> np.ndarray:
        """World force at time ``t``: zero outside the active window or after
        dropout, otherwise the (possibly winched) spring-damper response."""
        pos = np.asarray(pos, dtype=float)
        if not self.active_at(t):
            return np.zeros(pos.shape)
        x_des, xd_des = self.desired_at(t)
        if self.stiffness_only:
            f = stiffness_only_force(self.kp, x_des, pos)
        else:
            f = spring_damper_force(self.kp, self.kd, x_des, pos, xd_des, vel)
        return self._shaped(f, scale)


def build_suspension_schedule(
    profile: LiftProfile,
    rng: np.random.Generator,
    *,
    standing_height: float,
    mass: float,
    kp: float = 2000.0,
    kd: float | None = None,
    start: float = 0.0,
    margin: float = 0.0,
    anchor_jitter: float = 0.01,
    start_jitter: float = 0.0,
    dropout_after: float | None = None,
) -> SpringDamperAttachment:
    """Pelvis rope rig for a lift, hold, lower cycle.

    The anchor's vertical setpoint ramps from ``standing_height`` up by the
    profile's lift height, holds, then returns. The anchor's horizontal
    position and the cycle start are jittered; ``dropout_after`` (seconds
    into the cycle) installs a permanent force cutoff. ``kd`` defaults to
    critical damping for the given suspended mass.
    """
    if standing_height <= 0.0 or mass <= 0.0 or kp <= 0.0:
        raise ValueError("standing_height, mass and kp must be positive")
    if kd is None:
        kd = 2.0 * float(np.sqrt(kp * mass))
    t0 = start + float(rng.uniform(0.0, start_jitter)) if start_jitter > 0.0 \
        else start
    anchor_x = float(rng.uniform(-anchor_jitter, anchor_jitter)) \
        if anchor_jitter > 0.0 else 0.0
    dropout_time = None if dropout_after is None else t0 + dropout_after
    return SpringDamperAttachment(
        point="pelvis",
        kp=kp,
        kd=kd,
        anchor=np.array([anchor_x, standing_height]),
        tension_only=True,
        active_window=(t0, t0 + profile.total_duration + margin),
        dropout_time=dropout_time,
        profile=profile,
    )


@dataclass(frozen=True)
class ForceTier:
    """A named constant-magnitude hand force level."""

    name: str
    magnitude: float  # N


FORCE_TIERS = (
    ForceTier("S", 10.0),
    ForceTier("N", 30.0),
    ForceTier("L", 50.0),
)


def tier_by_name(name: str) -> ForceTier:
    for tier in FORCE_TIERS:
        if tier.name == name:
            return tier
    raise KeyError(f"unknown force tier {name!r}; expected one of S, N, L")


def sample_hand_forces(tier: ForceTier, rng: np.random.Generator,
                       n: int = 1) -> np.ndarray:
    """Per-hand forces of exactly the tier magnitude at uniform angles.

    Returns (n, 2, 2): axis 1 is (left hand, right hand), axis 2 is (fx, fz).
    Directions are drawn independently per hand and per environment; the
    caller holds them for its resample period.
    """
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(n, 2))
    return tier.magnitude * np.stack(
        [np.cos(angles), np.sin(angles)], axis=-1)


@dataclass(frozen=True)
class PushSchedule:
    """A timed shove: constant force over a window, or held indefinitely.

    ``direction`` is the angle in the horizontal plane; only its sagittal
    component acts on a planar model, the lateral part is recorded as zero.
    Sustained mode keeps the force on from ``start`` onward.
    """

    start: float      # s
    duration: float   # s, ignored in sustained mode
    magnitude: float  # N
    direction: float  # rad, 0 points along +x
    mode: str = "transient"

    def __post_init__(self) -> None:
        if self.mode not in ("transient", "sustained"):
            raise ValueError(f"mode must be transient or sustained, "
                             f"got {self.mode!r}")
        if self.magnitude < 0.0:
            raise ValueError(f"magnitude must be nonnegative, "
                             f"got {self.magnitude}")
        if self.mode == "transient" and not self.duration > 0.0:
            raise ValueError("transient pushes need a positive duration")

    @property
    def end(self) -> float:
        return np.inf if self.mode == "sustained" else self.start + self.duration

    def force_at(self, t: float | np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        active = (t >= self.start) & (t < self.end)
        fx = self.magnitude * np.cos(self.direction)
        out = np.zeros(t.shape + (2,))
        out[..., 0] = np.where(active, fx, 0.0)
        return out

    @property
    def lateral_component(self) -> float:
        return self.magnitude * float(np.sin(self.direction))


def compass_directions(n: int = 8) -> np.ndarray:
    """``n`` evenly spaced angles starting at +x (rad)."""
    if n <= 0:
        raise ValueError(f"need at least one direction, got {n}")
    return np.arange(n) * (2.0 * np.pi / n)


def push_sweep_iterator(directions: np.ndarray, magnitudes: np.ndarray, *,
                        mode: str = "transient", duration: float = 1.0,
                        start: float = 0.0) -> list[PushSchedule]:
    """Deterministic enumeration: per direction, magnitudes in ascending
    order. 8 directions with k magnitudes yield exactly 8k schedules."""
    magnitudes = np.sort(np.asarray(magnitudes, dtype=float))
    if magnitudes.size == 0:
        raise ValueError("magnitude schedule must be nonempty")
    return [
        PushSchedule(start=start, duration=duration, magnitude=float(mag),
                     direction=float(direction), mode=mode)
        for direction in np.asarray(directions, dtype=float)
        for mag in magnitudes
    ]
