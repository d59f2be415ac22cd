"""Planar humanoid morphologies: links, joints, DOF partition, kinematics.

A model is a kinematic tree rooted at a floating base link (x, z, pitch) with
one revolute joint per non-base link. The actuated DOF vector is ordered
lower-body joints first, then upper-body joints; generalized coordinates are
``[x, z, theta, q_0 .. q_J-1]``.

Kinematics are implemented batched over a leading environment axis; the public
``forward_kinematics`` wraps a single sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from hafo_lab.configio import ConfigError, check_schema_version, load_bundled, load_yaml

BUNDLED_MODELS = {
    "g1-planar": "g1_planar.yaml",
    "h12-planar": "h12_planar.yaml",
}

# 90 degree rotation, used for planar revolute Jacobian columns
_S = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class Pose2:
    """Planar pose: positions in m, pitch in rad (stored unwrapped)."""

    x: float
    z: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.z, self.theta])


@dataclass(frozen=True)
class LinkSpec:
    name: str
    mass: float          # kg
    com: tuple[float, float]   # m, in link frame
    inertia: float       # kg m^2 about the COM
    length: float        # m, joint-to-joint extent


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent_link: str
    anchor: tuple[float, float]  # m, in parent frame
    axis_sign: float
    limits: tuple[float, float]  # rad
    vel_limit: float             # rad/s
    torque_limit: float          # N m
    default: float               # rad
    kp: float                    # N m / rad
    kd: float                    # N m s / rad
    group: str                   # "lower" | "upper"


@dataclass(frozen=True)
class PointSpec:
    link: str
    offset: tuple[float, float]


@dataclass(frozen=True)
class RobotModel:
    """Validated planar humanoid description. Immutable; share freely."""

    name: str
    links: tuple[LinkSpec, ...]          # links[0] is the base
    joints: tuple[JointSpec, ...]        # joints[i] drives links[i + 1]
    n_dof_lower: int
    n_dof_upper: int
    foot_points: tuple[PointSpec, PointSpec]
    hand_points: tuple[PointSpec, PointSpec]
    pelvis_point: PointSpec
    torso_point: PointSpec
    default_base_height: float

    base_dof: int = 3

    @property
    def n_dof(self) -> int:
        return len(self.joints)

    @property
    def n_q(self) -> int:
        return self.base_dof + self.n_dof

    @property
    def lower_slice(self) -> slice:
        return slice(0, self.n_dof_lower)

    @property
    def upper_slice(self) -> slice:
        return slice(self.n_dof_lower, self.n_dof)

    @cached_property
    def total_mass(self) -> float:
        return float(sum(l.mass for l in self.links))

    @property
    def weight(self) -> float:
        return self.total_mass * 9.81

    @cached_property
    def default_q(self) -> np.ndarray:
        return np.array([j.default for j in self.joints])

    @cached_property
    def arrays(self) -> "ModelArrays":
        return ModelArrays.from_model(self)

    def link_index(self, name: str) -> int:
        for i, l in enumerate(self.links):
            if l.name == name:
                return i
        raise KeyError(name)


@dataclass
class ModelArrays:
    """Structure-of-arrays view of a model, precomputed for batched kinematics."""

    n_links: int
    n_dof: int
    n_q: int
    parent: np.ndarray       # (L,) int, parent[0] = -1
    anchor: np.ndarray       # (L, 2), anchor[0] = 0
    sign: np.ndarray         # (L,), sign[0] = 0
    jphi: np.ndarray         # (L, n_q) constant angular Jacobian rows
    masses: np.ndarray       # (L,)
    coms: np.ndarray         # (L, 2)
    inertias: np.ndarray     # (L,)
    q_lo: np.ndarray         # (J,)
    q_hi: np.ndarray
    vel_limit: np.ndarray
    torque_limit: np.ndarray
    q_default: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    foot_link: np.ndarray    # (2,) int
    foot_offset: np.ndarray  # (2, 2)
    hand_link: np.ndarray
    hand_offset: np.ndarray
    pelvis_link: int
    pelvis_offset: np.ndarray
    torso_link: int
    torso_offset: np.ndarray

    @staticmethod
    def from_model(model: RobotModel) -> "ModelArrays":
        L = len(model.links)
        J = model.n_dof
        nq = model.n_q
        names = [l.name for l in model.links]
        parent = np.full(L, -1, dtype=int)
        anchor = np.zeros((L, 2))
        sign = np.zeros(L)
        for i, j in enumerate(model.joints):
            parent[i + 1] = names.index(j.parent_link)
            anchor[i + 1] = j.anchor
            sign[i + 1] = j.axis_sign
        jphi = np.zeros((L, nq))
        jphi[:, 2] = 1.0
        for i in range(1, L):
            jphi[i] = jphi[parent[i]].copy()
            jphi[i, 3 + (i - 1)] = sign[i]
        pt = lambda p: (names.index(p.link), np.asarray(p.offset, dtype=float))
        fl, fo = zip(*(pt(p) for p in model.foot_points))
        hl, ho = zip(*(pt(p) for p in model.hand_points))
        return ModelArrays(
            n_links=L,
            n_dof=J,
            n_q=nq,
            parent=parent,
            anchor=anchor,
            sign=sign,
            jphi=jphi,
            masses=np.array([l.mass for l in model.links]),
            coms=np.array([l.com for l in model.links]),
            inertias=np.array([l.inertia for l in model.links]),
            q_lo=np.array([j.limits[0] for j in model.joints]),
            q_hi=np.array([j.limits[1] for j in model.joints]),
            vel_limit=np.array([j.vel_limit for j in model.joints]),
            torque_limit=np.array([j.torque_limit for j in model.joints]),
            q_default=model.default_q.copy(),
            kp=np.array([j.kp for j in model.joints]),
            kd=np.array([j.kd for j in model.joints]),
            foot_link=np.array(fl),
            foot_offset=np.stack(fo),
            hand_link=np.array(hl),
            hand_offset=np.stack(ho),
            pelvis_link=names.index(model.pelvis_point.link),
            pelvis_offset=np.asarray(model.pelvis_point.offset, dtype=float),
            torso_link=names.index(model.torso_point.link),
            torso_offset=np.asarray(model.torso_point.offset, dtype=float),
        )


@dataclass
class KinBatch:
    """Per-link world kinematics for a batch of configurations.

    ``jac`` maps generalized velocities to link-origin world velocity; ``cent``
    is the origin acceleration at zero generalized acceleration (the J-dot
    q-dot term used by the dynamics).
    """

    phi: np.ndarray      # (N, L)
    omega: np.ndarray    # (N, L)
    origin: np.ndarray   # (N, L, 2)
    vel: np.ndarray      # (N, L, 2)
    jac: np.ndarray      # (N, L, 2, n_q)
    cent: np.ndarray     # (N, L, 2)
    jphi: np.ndarray     # (L, n_q)


def _rot(phi: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 2, 2) for angles (...)."""
    c, s = np.cos(phi), np.sin(phi)
    return np.stack(
        [np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2
    )


def compute_kinematics(
    arrays: ModelArrays,
    base: np.ndarray,       # (N, 3) x, z, theta
    base_vel: np.ndarray,   # (N, 3)
    q: np.ndarray,          # (N, J)
    q_dot: np.ndarray,      # (N, J)
) -> KinBatch:
    """Walk the tree once, producing world pose/velocity/Jacobian per link."""
    N = base.shape[0]
    L, nq = arrays.n_links, arrays.n_q
    phi = np.empty((N, L))
    omega = np.empty((N, L))
    origin = np.empty((N, L, 2))
    vel = np.empty((N, L, 2))
    jac = np.zeros((N, L, 2, nq))
    cent = np.zeros((N, L, 2))

    phi[:, 0] = base[:, 2]
    omega[:, 0] = base_vel[:, 2]
    origin[:, 0] = base[:, :2]
    vel[:, 0] = base_vel[:, :2]
    jac[:, 0, 0, 0] = 1.0
    jac[:, 0, 1, 1] = 1.0

    for i in range(1, L):
        p = arrays.parent[i]
        phi[:, i] = phi[:, p] + arrays.sign[i] * q[:, i - 1]
        omega[:, i] = omega[:, p] + arrays.sign[i] * q_dot[:, i - 1]
        Rp = _rot(phi[:, p])
        seg = Rp @ arrays.anchor[i]                       # (N, 2)
        seg_perp = seg[..., ::-1] * np.array([-1.0, 1.0])  # S @ seg
        origin[:, i] = origin[:, p] + seg
        vel[:, i] = vel[:, p] + omega[:, p, None] * seg_perp
        jac[:, i] = jac[:, p] + seg_perp[:, :, None] * arrays.jphi[p][None, None, :]
        cent[:, i] = cent[:, p] - omega[:, p, None] ** 2 * seg

    return KinBatch(phi=phi, omega=omega, origin=origin, vel=vel, jac=jac, cent=cent,
                    jphi=arrays.jphi)


def point_world(kin: KinBatch, link: int, offset: np.ndarray) -> np.ndarray:
    """World position of a point at ``offset`` in the frame of ``link``; (N, 2)."""
    R = _rot(kin.phi[:, link])
    off = np.broadcast_to(offset, (kin.phi.shape[0], 2))
    return kin.origin[:, link] + np.einsum("nij,nj->ni", R, off)


def point_kinematics(
    kin: KinBatch, link: int, offset: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Position, velocity, Jacobian and centripetal term of a body point.

    Shapes: (N, 2), (N, 2), (N, 2, n_q), (N, 2).
    """
    N = kin.phi.shape[0]
    R = _rot(kin.phi[:, link])
    off = np.broadcast_to(offset, (N, 2))
    seg = np.einsum("nij,nj->ni", R, off)
    seg_perp = seg[..., ::-1] * np.array([-1.0, 1.0])
    w = kin.omega[:, link]
    pos = kin.origin[:, link] + seg
    v = kin.vel[:, link] + w[:, None] * seg_perp
    jac = kin.jac[:, link] + seg_perp[:, :, None] * kin.jphi[link][None, None, :]
    cent = kin.cent[:, link] - w[:, None] ** 2 * seg
    return pos, v, jac, cent


@dataclass
class FkResult:
    """World-frame kinematics of one configuration."""

    link_poses: np.ndarray       # (L, 3): x, z, phi per link (frame origin)
    joint_positions: np.ndarray  # (J, 2): world position of each joint frame
    foot_points: np.ndarray      # (2, 2)
    hand_points: np.ndarray      # (2, 2)
    pelvis_point: np.ndarray     # (2,)
    torso_point: np.ndarray      # (2,)


def forward_kinematics(model: RobotModel, base: Pose2, q: np.ndarray) -> FkResult:
    """World positions of all links and named body points; pure and deterministic."""
    q = np.asarray(q, dtype=float)
    if q.shape != (model.n_dof,):
        raise ValueError(
            f"q has shape {q.shape}, expected ({model.n_dof},) for model {model.name!r}"
        )
    ar = model.arrays
    kin = compute_kinematics(
        ar, base.as_array()[None, :], np.zeros((1, 3)), q[None, :], np.zeros((1, model.n_dof))
    )
    link_poses = np.concatenate([kin.origin[0], kin.phi[0][:, None]], axis=1)
    feet = np.stack(
        [point_world(kin, ar.foot_link[k], ar.foot_offset[k])[0] for k in range(2)]
    )
    hands = np.stack(
        [point_world(kin, ar.hand_link[k], ar.hand_offset[k])[0] for k in range(2)]
    )
    return FkResult(
        link_poses=link_poses,
        joint_positions=kin.origin[0, 1:].copy(),
        foot_points=feet,
        hand_points=hands,
        pelvis_point=point_world(kin, ar.pelvis_link, ar.pelvis_offset)[0],
        torso_point=point_world(kin, ar.torso_link, ar.torso_offset)[0],
    )


def _positive(value: float, path: str) -> float:
    if not np.isfinite(value) or value <= 0:
        raise ConfigError(path, f"must be strictly positive, got {value}")
    return float(value)


def _parse_joint(entry: dict, link_name: str, parent: str, where: str) -> JointSpec:
    lim = entry.get("limits")
    if not (isinstance(lim, (list, tuple)) and len(lim) == 2 and lim[0] < lim[1]):
        raise ConfigError(f"{where}.limits", f"need [lo, hi] with lo < hi, got {lim}")
    default = float(entry.get("default", 0.0))
    if not (lim[0] <= default <= lim[1]):
        raise ConfigError(
            f"{where}.default",
            f"default angle {default} outside limits [{lim[0]}, {lim[1]}]",
        )
    group = entry.get("group")
    if group not in ("lower", "upper"):
        raise ConfigError(f"{where}.group", f"must be 'lower' or 'upper', got {group!r}")
    return JointSpec(
        name=entry.get("name", f"{link_name}_joint"),
        parent_link=parent,
        anchor=tuple(entry.get("anchor", (0.0, 0.0))),
        axis_sign=float(entry.get("axis_sign", 1.0)),
        limits=(float(lim[0]), float(lim[1])),
        vel_limit=_positive(entry.get("vel_limit", 0.0), f"{where}.vel_limit"),
        torque_limit=_positive(entry.get("torque_limit", 0.0), f"{where}.torque_limit"),
        default=default,
        kp=_positive(entry.get("kp", 0.0), f"{where}.kp"),
        kd=_positive(entry.get("kd", 0.0), f"{where}.kd"),
        group=group,
    )


def _parse_point(entry: dict, where: str) -> PointSpec:
    off = entry.get("offset")
    if not (isinstance(off, (list, tuple)) and len(off) == 2):
        raise ConfigError(f"{where}.offset", f"need [x, z], got {off}")
    return PointSpec(link=entry.get("link", "base"), offset=(float(off[0]), float(off[1])))


def build_model(config: str | dict) -> RobotModel:
    """Build and validate a model from a bundled name, a YAML path, or a dict.

    Bundled morphologies: ``g1-planar`` (8 actuated DOF, 4 lower + 4 upper)
    and ``h12-planar`` (same topology, scaled masses and lengths).
    """
    if isinstance(config, str):
        if config in BUNDLED_MODELS:
            data = load_bundled(BUNDLED_MODELS[config])
        else:
            data = load_yaml(config)
    else:
        data = config
    check_schema_version(data, "model")

    name = data.get("name", "custom")
    base = data.get("base", {})
    links: list[LinkSpec] = [
        LinkSpec(
            name="base",
            mass=_positive(base.get("mass", 0.0), "base.mass"),
            com=tuple(base.get("com", (0.0, 0.0))),
            inertia=_positive(base.get("inertia", 0.0), "base.inertia"),
            length=_positive(base.get("length", 0.0), "base.length"),
        )
    ]
    joints: list[JointSpec] = []
    link_names = {"base"}
    for k, entry in enumerate(data.get("links", [])):
        where = f"links[{k}]"
        lname = entry.get("name")
        if not lname or lname in link_names:
            raise ConfigError(f"{where}.name", f"missing or duplicate link name {lname!r}")
        parent = entry.get("parent")
        if parent not in link_names:
            raise ConfigError(f"{where}.parent", f"unknown parent link {parent!r}")
        spec = LinkSpec(
            name=lname,
            mass=_positive(entry.get("mass", 0.0), f"{where}.mass"),
            com=tuple(entry.get("com", (0.0, 0.0))),
            inertia=_positive(entry.get("inertia", 0.0), f"{where}.inertia"),
            length=_positive(entry.get("length", 0.0), f"{where}.length"),
        )
        joint_entry = dict(entry.get("joint", {}))
        joint_entry.setdefault("anchor", entry.get("anchor"))
        joint = _parse_joint(joint_entry, lname, parent, f"{where}.joint")
        # a joint frame sits at the far end of its parent link (base excepted)
        if parent != "base":
            plen = next(l.length for l in links if l.name == parent)
            if abs(float(np.hypot(*joint.anchor)) - plen) > 1e-9:
                raise ConfigError(
                    f"{where}.joint.anchor",
                    f"|anchor| {float(np.hypot(*joint.anchor)):.6f} != parent link length {plen}",
                )
        links.append(spec)
        joints.append(joint)
        link_names.add(lname)

    n_lower = int(data.get("n_dof_lower", 0))
    n_upper = int(data.get("n_dof_upper", 0))
    if n_lower + n_upper != len(joints):
        raise ConfigError(
            "n_dof_lower",
            f"n_dof_lower + n_dof_upper = {n_lower + n_upper} != joint count {len(joints)}",
        )
    for i, j in enumerate(joints):
        expect = "lower" if i < n_lower else "upper"
        if j.group != expect:
            raise ConfigError(
                f"links[{i}].joint.group",
                f"joint order must list lower DOFs first; {j.name!r} is {j.group!r}",
            )

    points = data.get("points", {})
    feet = tuple(_parse_point(p, f"points.feet[{i}]") for i, p in enumerate(points.get("feet", [])))
    hands = tuple(_parse_point(p, f"points.hands[{i}]") for i, p in enumerate(points.get("hands", [])))
    if len(feet) != 2:
        raise ConfigError("points.feet", f"exactly two foot points required, got {len(feet)}")
    if len(hands) != 2:
        raise ConfigError("points.hands", f"exactly two hand points required, got {len(hands)}")
    for p, where in [*zip(feet, ("points.feet[0]", "points.feet[1]")),
                     *zip(hands, ("points.hands[0]", "points.hands[1]"))]:
        if p.link not in link_names:
            raise ConfigError(f"{where}.link", f"unknown link {p.link!r}")

    model = RobotModel(
        name=name,
        links=tuple(links),
        joints=tuple(joints),
        n_dof_lower=n_lower,
        n_dof_upper=n_upper,
        foot_points=feet,  # type: ignore[arg-type]
        hand_points=hands,  # type: ignore[arg-type]
        pelvis_point=_parse_point(points.get("pelvis", {"offset": (0, 0)}), "points.pelvis"),
        torso_point=_parse_point(points.get("torso", {"offset": (0, 0)}), "points.torso"),
        default_base_height=_positive(
            data.get("default_base_height", 0.0), "default_base_height"
        ),
    )
    return model
