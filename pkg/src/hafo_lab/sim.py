"""Batched planar rigid-body dynamics with penalty ground contact.

The equation of motion is assembled in generalized coordinates
``xi = [x, z, theta, q]`` every physics step:

    M(q) xi_dd = Q_applied + Q_gravity + Q_external + Q_contact - bias

with ``M`` from per-link COM Jacobians plus rotational inertia and joint
armature, and ``bias`` the centripetal terms. Integration is semi-implicit in
velocity with a trapezoidal position update, which is exact for constant
acceleration (ballistic motion integrates without drift).

Everything is vectorized over a leading environment axis; env rows never
interact, so results are independent of how a population is batched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from hafo_lab.robot import (
    KinBatch,
    ModelArrays,
    RobotModel,
    _rot,
    compute_kinematics,
    point_kinematics,
)


@dataclass
class SimParams:
    """Global simulation constants (per-env physical variation goes in DynParams)."""

    dt: float = 1.0 / 240.0
    gravity: float = 9.81
    ground_height: float = 0.0
    contact_kp: float = 2.0e4     # N/m, normal penalty stiffness
    contact_kd: float = 200.0     # N s/m, normal penalty damping
    contact_kt: float = 600.0     # N s/m, tangential viscous gain
    friction: float = 0.8         # Coulomb cone bound, default when no DynParams
    armature: float = 0.01        # kg m^2 added to each joint diagonal
    limit_kp: float = 300.0       # N m/rad, joint range penalty spring
    limit_kd: float = 5.0


@dataclass
class SimState:
    """Batched mechanical state; arrays are (N, .) float64 and owned."""

    base: np.ndarray      # (N, 3) x, z, theta
    base_vel: np.ndarray  # (N, 3)
    q: np.ndarray         # (N, J)
    q_dot: np.ndarray     # (N, J)

    @property
    def n(self) -> int:
        return self.base.shape[0]

    def copy(self) -> "SimState":
        return SimState(self.base.copy(), self.base_vel.copy(),
                        self.q.copy(), self.q_dot.copy())

    @staticmethod
    def standing(model: RobotModel, n: int, height_margin: float = 0.0) -> "SimState":
        base = np.zeros((n, 3))
        base[:, 1] = model.default_base_height + height_margin
        return SimState(
            base=base,
            base_vel=np.zeros((n, 3)),
            q=np.tile(model.default_q, (n, 1)),
            q_dot=np.zeros((n, model.n_dof)),
        )


@dataclass
class DynParams:
    """Per-env physical parameters, the domain-randomization surface."""

    masses: np.ndarray     # (N, L)
    coms: np.ndarray       # (N, L, 2)
    inertias: np.ndarray   # (N, L)
    friction: np.ndarray   # (N,)

    @staticmethod
    def defaults(arrays: ModelArrays, n: int, friction: float = 0.8) -> "DynParams":
        return DynParams(
            masses=np.tile(arrays.masses, (n, 1)),
            coms=np.tile(arrays.coms, (n, 1, 1)),
            inertias=np.tile(arrays.inertias, (n, 1)),
            friction=np.full(n, friction),
        )

    @property
    def total_mass(self) -> np.ndarray:
        return self.masses.sum(axis=1)


@dataclass
class ExternalLoad:
    """A world-frame point force on a body point; zero rows are free."""

    link: int
    offset: np.ndarray   # (2,) or (N, 2), link frame
    force: np.ndarray    # (N, 2), world frame


@dataclass
class ContactReport:
    """Per-foot ground interaction for the step just taken."""

    normal: np.ndarray       # (N, 2) N, >= 0
    tangent: np.ndarray      # (N, 2) N
    penetration: np.ndarray  # (N, 2) m, >= 0
    in_contact: np.ndarray   # (N, 2) bool
    foot_pos: np.ndarray     # (N, 2, 2)
    foot_vel: np.ndarray     # (N, 2, 2)


@dataclass
class StepInfo:
    contacts: ContactReport
    applied_torques: np.ndarray  # (N, J), after actuator limit clamp
    acc: np.ndarray              # (N, n_q) generalized accelerations


def _com_terms(arrays: ModelArrays, kin: KinBatch, coms: np.ndarray):
    """COM position/velocity/Jacobian/centripetal for all links at once.

    coms is (N, L, 2); returns arrays shaped (N, L, 2[, n_q]).
    """
    R = _rot(kin.phi)                                  # (N, L, 2, 2)
    seg = np.einsum("nlij,nlj->nli", R, coms)
    seg_perp = seg[..., ::-1] * np.array([-1.0, 1.0])
    pos = kin.origin + seg
    vel = kin.vel + kin.omega[..., None] * seg_perp
    jac = kin.jac + seg_perp[..., None] * kin.jphi[None, :, None, :]
    cent = kin.cent - kin.omega[..., None] ** 2 * seg
    return pos, vel, jac, cent


def _contact_forces(
    arrays: ModelArrays, params: SimParams, kin: KinBatch, friction: np.ndarray
):
    """Penalty ground model on the two foot points.

    Normal: spring-damper on penetration, floored at zero (no sticking).
    Tangential: viscous drag clamped to the Coulomb cone of the normal force.

    The viscous parts are stiff at the working timestep, so each foot also
    reports damping coefficients per axis for implicit treatment in the
    velocity solve; tangential damping drops out once the cone clamps (the
    force is then velocity independent).
    """
    n = kin.phi.shape[0]
    normal = np.zeros((n, 2))
    tangent = np.zeros((n, 2))
    pen = np.zeros((n, 2))
    pos = np.zeros((n, 2, 2))
    vel = np.zeros((n, 2, 2))
    jacs = []
    dampings = []
    for k in range(2):
        p, v, jac, _ = point_kinematics(kin, int(arrays.foot_link[k]), arrays.foot_offset[k])
        depth = np.maximum(0.0, params.ground_height - p[:, 1])
        active = depth > 0.0
        raw_fz = params.contact_kp * depth - params.contact_kd * v[:, 1]
        fz = np.where(active, np.maximum(0.0, raw_fz), 0.0)
        bound = friction * fz
        raw_fx = -params.contact_kt * v[:, 0]
        fx = np.clip(raw_fx, -bound, bound)
        damping = np.zeros((n, 2))
        damping[:, 0] = np.where(active & (np.abs(raw_fx) < bound),
                                 params.contact_kt, 0.0)
        damping[:, 1] = np.where(active & (raw_fz > 0.0), params.contact_kd, 0.0)
        normal[:, k] = fz
        tangent[:, k] = fx
        pen[:, k] = depth
        pos[:, k] = p
        vel[:, k] = v
        jacs.append(jac)
        dampings.append(damping)
    report = ContactReport(
        normal=normal, tangent=tangent, penetration=pen,
        in_contact=pen > 0.0, foot_pos=pos, foot_vel=vel,
    )
    return report, jacs, dampings


def step(
    model: RobotModel | ModelArrays,
    params: SimParams,
    state: SimState,
    torques: np.ndarray,
    loads: Sequence[ExternalLoad] = (),
    dyn: DynParams | None = None,
) -> tuple[SimState, StepInfo]:
    """Advance one physics step of size ``params.dt``.

    ``torques`` are actuator commands per joint, clamped to the model's
    torque limits before application; joint-range penalty springs act on top
    and are not part of the reported applied torques.
    """
    arrays = model.arrays if isinstance(model, RobotModel) else model
    n, nq, J = state.n, arrays.n_q, arrays.n_dof
    if dyn is None:
        dyn = DynParams.defaults(arrays, n, friction=params.friction)

    kin = compute_kinematics(arrays, state.base, state.base_vel, state.q, state.q_dot)
    _, _, com_jac, com_cent = _com_terms(arrays, kin, dyn.coms)

    M = np.einsum("nl,nlai,nlaj->nij", dyn.masses, com_jac, com_jac)
    M += np.einsum("nl,li,lj->nij", dyn.inertias, kin.jphi, kin.jphi)
    joint_idx = np.arange(3, nq)
    M[:, joint_idx, joint_idx] += params.armature

    # gravity and centripetal bias share the COM Jacobian transpose
    accel_free = -com_cent
    accel_free[:, :, 1] -= params.gravity
    rhs = np.einsum("nl,nlai,nla->ni", dyn.masses, com_jac, accel_free)

    applied = np.clip(torques, -arrays.torque_limit, arrays.torque_limit)
    over = np.maximum(0.0, state.q - arrays.q_hi)
    under = np.maximum(0.0, arrays.q_lo - state.q)
    violating = (over > 0) | (under > 0)
    limit_tau = params.limit_kp * (under - over) - params.limit_kd * state.q_dot * violating
    rhs[:, 3:] += applied + limit_tau

    for load in loads:
        _, _, jac, _ = point_kinematics(kin, load.link, np.asarray(load.offset))
        rhs += np.einsum("nai,na->ni", jac, np.asarray(load.force, dtype=float))

    report, foot_jacs, foot_damp = _contact_forces(arrays, params, kin, dyn.friction)
    for k in range(2):
        f = np.stack([report.tangent[:, k], report.normal[:, k]], axis=1)
        rhs += np.einsum("nai,na->ni", foot_jacs[k], f)
        # implicit velocity damping at the contact: the viscous gains exceed
        # the explicit stability limit of the working timestep
        M += params.dt * np.einsum("nai,na,naj->nij", foot_jacs[k], foot_damp[k],
                                   foot_jacs[k])

    acc = np.linalg.solve(M, rhs[:, :, None])[:, :, 0]

    base_vel_new = state.base_vel + params.dt * acc[:, :3]
    q_dot_new = np.clip(
        state.q_dot + params.dt * acc[:, 3:], -arrays.vel_limit, arrays.vel_limit
    )
    base_new = state.base + params.dt * 0.5 * (state.base_vel + base_vel_new)
    q_new = state.q + params.dt * 0.5 * (state.q_dot + q_dot_new)

    new_state = SimState(base=base_new, base_vel=base_vel_new, q=q_new, q_dot=q_dot_new)
    return new_state, StepInfo(contacts=report, applied_torques=applied, acc=acc)


def pd_torques(
    arrays: ModelArrays,
    state: SimState,
    q_target: np.ndarray,
    kp_scale: np.ndarray | float = 1.0,
    kd_scale: np.ndarray | float = 1.0,
) -> np.ndarray:
    """Joint PD law toward a position target; gains from the model, scalable per env."""
    kp = arrays.kp * np.asarray(kp_scale)
    kd = arrays.kd * np.asarray(kd_scale)
    return kp * (q_target - state.q) - kd * state.q_dot


def mechanical_energy(
    model: RobotModel | ModelArrays,
    params: SimParams,
    state: SimState,
    dyn: DynParams | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(kinetic, potential) per env; potential is zero at ground height."""
    arrays = model.arrays if isinstance(model, RobotModel) else model
    if dyn is None:
        dyn = DynParams.defaults(arrays, state.n, friction=params.friction)
    kin = compute_kinematics(arrays, state.base, state.base_vel, state.q, state.q_dot)
    pos, vel, _, _ = _com_terms(arrays, kin, dyn.coms)
    kinetic = 0.5 * np.einsum("nl,nl->n", dyn.masses, np.sum(vel**2, axis=2))
    kinetic += 0.5 * np.einsum("nl,nl->n", dyn.inertias, kin.omega**2)
    kinetic += 0.5 * params.armature * np.sum(state.q_dot**2, axis=1)
    potential = params.gravity * np.einsum(
        "nl,nl->n", dyn.masses, pos[:, :, 1] - params.ground_height
    )
    return kinetic, potential


def center_of_mass(
    model: RobotModel | ModelArrays, state: SimState, dyn: DynParams | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Whole-body COM position and velocity, (N, 2) each."""
    arrays = model.arrays if isinstance(model, RobotModel) else model
    if dyn is None:
        dyn = DynParams.defaults(arrays, state.n)
    kin = compute_kinematics(arrays, state.base, state.base_vel, state.q, state.q_dot)
    pos, vel, _, _ = _com_terms(arrays, kin, dyn.coms)
    total = dyn.masses.sum(axis=1, keepdims=True)
    com = np.einsum("nl,nli->ni", dyn.masses, pos) / total
    com_vel = np.einsum("nl,nli->ni", dyn.masses, vel) / total
    return com, com_vel
