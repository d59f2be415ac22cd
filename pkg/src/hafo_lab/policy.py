"""Dual-agent policy: two Gaussian actors, two critics, residual upper action.

Both actors read the same proprioceptive observation; the critics read the
privileged observation (a superset that adds base linear velocity and the
external force on each attachment point).  The lower actor emits a scaled
joint-offset action; the upper actor emits a corrective residual on top of a
reference trajectory, hard-clamped to ``±delta`` before being clipped to the
joint limits.  The clamp is a projection applied after sampling, and the
log-probability is computed on the pre-projection Gaussian sample; the small
bias this introduces is accepted in exchange for an exact hard bound.

Networks are plain dense stacks stored as numpy arrays with hand-written
backprop, so rollouts and updates are dependency-free and bit-reproducible.
Output layers are zero-initialized: a fresh bundle emits zero action means and
zero values, so initial joint targets equal the reference pose.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .robot import RobotModel

SCHEMA_VERSION = 1

CHECKPOINT_MAGIC = b"HFLB"
CHECKPOINT_VERSION = 1

#: Hidden widths for the bundled full-scale network configuration.
FULL_SCALE_HIDDEN = (512, 256, 128)
#: Hidden widths used by default at desk scale.
DESK_HIDDEN = (128, 64, 32)

ACTIVATIONS = ("elu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Shape and nonlinearity of one dense stack."""

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "elu"

    def __post_init__(self) -> None:
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all layer widths must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


def _activation_fns(name: str):
    """Return (f, f') where f' is evaluated from the *output* of f."""
    if name == "elu":
        def f(z: np.ndarray) -> np.ndarray:
            return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))

        def fprime(out: np.ndarray) -> np.ndarray:
            # elu(z) > 0 exactly when z > 0, so the output determines the slope.
            return np.where(out > 0.0, 1.0, out + 1.0)

        return f, fprime
    if name == "tanh":
        def f(z: np.ndarray) -> np.ndarray:
            return np.tanh(z)

        def fprime(out: np.ndarray) -> np.ndarray:
            return 1.0 - out * out

        return f, fprime
    raise ValueError(f"unknown activation {name!r}")


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int,
                gain: float) -> np.ndarray:
    """Orthogonal (n_in, n_out) matrix scaled by ``gain``."""
    flat = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(flat)
    d = np.sign(np.diag(r))
    d[d == 0.0] = 1.0
    q = q * d[None, :]
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class Mlp:
    """Dense stack with linear output layer and explicit backprop.

    Weights are stored as (in, out) matrices so forward is ``x @ W + b``.
    """

    def __init__(self, spec: MlpSpec, weights: list[np.ndarray],
                 biases: list[np.ndarray]) -> None:
        dims = spec.layer_dims
        if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
            raise ValueError(
                f"expected {len(dims) - 1} layers, got {len(weights)} weight "
                f"and {len(biases)} bias arrays"
            )
        for i, (w, b) in enumerate(zip(weights, biases)):
            want = (dims[i], dims[i + 1])
            if w.shape != want or b.shape != (dims[i + 1],):
                raise ValueError(
                    f"layer {i} shape mismatch: weight {w.shape} bias {b.shape}"
                    f" vs expected {want}"
                )
        self.spec = spec
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self._act, self._act_prime = _activation_fns(spec.activation)

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator) -> "Mlp":
        """Orthogonal hidden layers, zero output layer."""
        gain = np.sqrt(2.0) if spec.activation == "elu" else 5.0 / 3.0
        dims = spec.layer_dims
        weights: list[np.ndarray] = []
        biases: list[np.ndarray] = []
        for i in range(len(dims) - 2):
            weights.append(_orthogonal(rng, dims[i], dims[i + 1], gain))
            biases.append(np.zeros(dims[i + 1]))
        weights.append(np.zeros((dims[-2], dims[-1])))
        biases.append(np.zeros(dims[-1]))
        return cls(spec, weights, biases)

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = self._act(h @ w + b)
        return h @ self.weights[-1] + self.biases[-1]

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping every layer input for :meth:`backward`."""
        h = np.asarray(x, dtype=float)
        inputs = [h]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = self._act(h @ w + b)
            inputs.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return out, inputs

    def backward(self, inputs: list[np.ndarray], grad_out: np.ndarray):
        """Gradients of ``sum(grad_out * output)`` w.r.t. parameters.

        Returns (grad_weights, grad_biases, grad_input), the parameter lists
        parallel to :attr:`weights` / :attr:`biases`.
        """
        n_layers = len(self.weights)
        grad_w: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        grad_b: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        g = np.asarray(grad_out, dtype=float)
        grad_w[-1] = inputs[-1].T @ g
        grad_b[-1] = g.sum(axis=0)
        g = g @ self.weights[-1].T
        for i in range(n_layers - 2, -1, -1):
            g = g * self._act_prime(inputs[i + 1])
            grad_w[i] = inputs[i].T @ g
            grad_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grad_w, grad_b, g


@dataclass
class GaussianActor:
    """Mean network plus a state-independent log standard deviation."""

    net: Mlp
    log_std: np.ndarray

    def __post_init__(self) -> None:
        self.log_std = np.asarray(self.log_std, dtype=float)
        if self.log_std.shape != (self.net.spec.output_dim,):
            raise ValueError(
                f"log_std shape {self.log_std.shape} does not match actor "
                f"output dim {self.net.spec.output_dim}"
            )

    def copy(self) -> "GaussianActor":
        return GaussianActor(self.net.copy(), self.log_std.copy())


@dataclass
class PolicyBundle:
    """Parameters of both agents plus action-space metadata."""

    actor_lower: GaussianActor
    actor_upper: GaussianActor
    critic_lower: Mlp
    critic_upper: Mlp
    delta: float
    action_scale_lower: float
    upper_limit_lo: np.ndarray
    upper_limit_hi: np.ndarray
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        if not self.delta > 0.0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not self.action_scale_lower > 0.0:
            raise ValueError(
                f"action_scale_lower must be positive, got {self.action_scale_lower}"
            )
        n_upper = self.actor_upper.net.spec.output_dim
        self.upper_limit_lo = np.asarray(self.upper_limit_lo, dtype=float)
        self.upper_limit_hi = np.asarray(self.upper_limit_hi, dtype=float)
        if self.upper_limit_lo.shape != (n_upper,) or \
                self.upper_limit_hi.shape != (n_upper,):
            raise ValueError("upper joint limit arrays must match the upper "
                             f"action dimension {n_upper}")
        if self.actor_lower.net.spec.input_dim != \
                self.actor_upper.net.spec.input_dim:
            raise ValueError("both actors must share one observation layout")
        if self.critic_lower.spec.input_dim != self.critic_upper.spec.input_dim:
            raise ValueError("both critics must share one privileged layout")

    @property
    def obs_dim(self) -> int:
        return self.actor_lower.net.spec.input_dim

    @property
    def privileged_dim(self) -> int:
        return self.critic_lower.spec.input_dim

    @property
    def n_lower(self) -> int:
        return self.actor_lower.net.spec.output_dim

    @property
    def n_upper(self) -> int:
        return self.actor_upper.net.spec.output_dim

    def copy(self) -> "PolicyBundle":
        return PolicyBundle(
            actor_lower=self.actor_lower.copy(),
            actor_upper=self.actor_upper.copy(),
            critic_lower=self.critic_lower.copy(),
            critic_upper=self.critic_upper.copy(),
            delta=self.delta,
            action_scale_lower=self.action_scale_lower,
            upper_limit_lo=self.upper_limit_lo.copy(),
            upper_limit_hi=self.upper_limit_hi.copy(),
            schema_version=self.schema_version,
        )


def make_bundle(model: RobotModel, obs_dim: int, privileged_dim: int, *,
                rng: np.random.Generator,
                hidden: Sequence[int] = DESK_HIDDEN,
                activation: str = "elu",
                delta: float = 0.25,
                action_scale_lower: float = 0.25,
                init_noise_std: float = 1.0) -> PolicyBundle:
    """Build a fresh bundle sized for ``model`` and the given layouts."""
    if privileged_dim <= obs_dim:
        raise ValueError(
            f"privileged layout ({privileged_dim}) must extend the "
            f"observation layout ({obs_dim})"
        )
    if not init_noise_std > 0.0:
        raise ValueError(f"init_noise_std must be positive, got {init_noise_std}")
    n_lower = model.lower_slice.stop - model.lower_slice.start
    n_upper = model.upper_slice.stop - model.upper_slice.start
    hidden = tuple(int(h) for h in hidden)
    log_std0 = float(np.log(init_noise_std))
    actor_lower = GaussianActor(
        Mlp.create(MlpSpec(obs_dim, hidden, n_lower, activation), rng),
        np.full(n_lower, log_std0))
    actor_upper = GaussianActor(
        Mlp.create(MlpSpec(obs_dim, hidden, n_upper, activation), rng),
        np.full(n_upper, log_std0))
    critic_lower = Mlp.create(MlpSpec(privileged_dim, hidden, 1, activation), rng)
    critic_upper = Mlp.create(MlpSpec(privileged_dim, hidden, 1, activation), rng)
    upper_joints = model.joints[model.upper_slice]
    return PolicyBundle(
        actor_lower=actor_lower,
        actor_upper=actor_upper,
        critic_lower=critic_lower,
        critic_upper=critic_upper,
        delta=delta,
        action_scale_lower=action_scale_lower,
        upper_limit_lo=np.array([j.limits[0] for j in upper_joints]),
        upper_limit_hi=np.array([j.limits[1] for j in upper_joints]),
    )


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray,
                      x: np.ndarray) -> np.ndarray:
    """Log density of a diagonal Gaussian, summed over the action axis."""
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * np.log(2.0 * np.pi), axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    """Entropy of a diagonal Gaussian with the given log standard deviations."""
    return float(np.sum(log_std + 0.5 * (1.0 + np.log(2.0 * np.pi))))


def _check_rows(name: str, x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(
            f"{name} must have shape (n_envs, {dim}), got {x.shape}"
        )
    return x


def _draw(actor: GaussianActor, obs: np.ndarray, mode: str,
          rng: np.random.Generator | None):
    mean = actor.net.forward(obs)
    if mode == "deterministic":
        sample = mean
    elif mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic mode needs an rng")
        sample = mean + np.exp(actor.log_std) * rng.standard_normal(mean.shape)
    else:
        raise ValueError(f"mode must be 'stochastic' or 'deterministic', "
                         f"got {mode!r}")
    return sample, gaussian_log_prob(mean, actor.log_std, sample)


def act_lower(bundle: PolicyBundle, obs: np.ndarray, mode: str = "stochastic",
              rng: np.random.Generator | None = None):
    """Sample (or take the mean of) the lower-body action.

    Returns ``(action, log_prob)``; downstream joint targets are
    ``default_pose + action_scale_lower * action``.
    """
    obs = _check_rows("obs", obs, bundle.obs_dim)
    return _draw(bundle.actor_lower, obs, mode, rng)


def act_upper(bundle: PolicyBundle, obs: np.ndarray, theta_ref: np.ndarray,
              mode: str = "stochastic",
              rng: np.random.Generator | None = None):
    """Corrective residual on top of the reference trajectory.

    Returns ``(raw, residual, theta_target, log_prob)`` where
    ``residual = clip(raw, ±delta)`` and ``theta_target`` is
    ``theta_ref + residual`` clipped to the upper joint limits.  The
    log-probability is computed on the pre-clamp sample ``raw``.
    """
    obs = _check_rows("obs", obs, bundle.obs_dim)
    theta_ref = _check_rows("theta_ref", theta_ref, bundle.n_upper)
    raw, log_prob = _draw(bundle.actor_upper, obs, mode, rng)
    residual = np.clip(raw, -bundle.delta, bundle.delta)
    theta_target = np.clip(theta_ref + residual,
                           bundle.upper_limit_lo, bundle.upper_limit_hi)
    # The bound is promised on the measured offset theta_target - theta_ref,
    # and the float addition above can overshoot it by an ulp.  Nudge the
    # target toward the reference until the recomputed offset complies.
    diff = theta_target - theta_ref
    over = diff > bundle.delta
    while np.any(over):
        theta_target = np.where(over, np.nextafter(theta_target, -np.inf),
                                theta_target)
        diff = theta_target - theta_ref
        over = diff > bundle.delta
    under = diff < -bundle.delta
    while np.any(under):
        theta_target = np.where(under, np.nextafter(theta_target, np.inf),
                                theta_target)
        diff = theta_target - theta_ref
        under = diff < -bundle.delta
    return raw, residual, theta_target, log_prob


def evaluate_values(bundle: PolicyBundle, privileged_obs: np.ndarray):
    """Both critics' value estimates, each shaped (n_envs,)."""
    priv = _check_rows("privileged_obs", privileged_obs, bundle.privileged_dim)
    v_lower = bundle.critic_lower.forward(priv)[:, 0]
    v_upper = bundle.critic_upper.forward(priv)[:, 0]
    return v_lower, v_upper


# --------------------------------------------------------------------------
# Checkpoint container
# --------------------------------------------------------------------------

def _named_arrays(bundle: PolicyBundle) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    nets = {
        "actor_lower": bundle.actor_lower.net,
        "actor_upper": bundle.actor_upper.net,
        "critic_lower": bundle.critic_lower,
        "critic_upper": bundle.critic_upper,
    }
    for prefix, net in nets.items():
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            out[f"{prefix}/w{i}"] = w
            out[f"{prefix}/b{i}"] = b
    out["actor_lower/log_std"] = bundle.actor_lower.log_std
    out["actor_upper/log_std"] = bundle.actor_upper.log_std
    out["limits/upper_lo"] = bundle.upper_limit_lo
    out["limits/upper_hi"] = bundle.upper_limit_hi
    return out


def _write_block(fh: BinaryIO, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def save_bundle(path: str, bundle: PolicyBundle,
                extra_config: dict | None = None) -> None:
    """Write the bundle with a full config snapshot; arrays stored as
    little-endian 32-bit floats."""
    config = {
        "schema_version": bundle.schema_version,
        "delta": bundle.delta,
        "action_scale_lower": bundle.action_scale_lower,
        "activation": bundle.actor_lower.net.spec.activation,
        "hidden": list(bundle.actor_lower.net.spec.hidden),
        "obs_dim": bundle.obs_dim,
        "privileged_dim": bundle.privileged_dim,
        "n_lower": bundle.n_lower,
        "n_upper": bundle.n_upper,
        "extra": extra_config or {},
    }
    arrays = _named_arrays(bundle)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_block(fh, json.dumps(config, sort_keys=True).encode("utf-8"))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            _write_block(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(
            f"checkpoint truncated at byte {fh.tell() - len(buf)}: "
            f"expected {n} bytes for {what}, got {len(buf)}"
        )
    return buf


def load_bundle(path: str) -> tuple[PolicyBundle, dict]:
    """Read a checkpoint, validating schema version and all dimensions.

    Returns ``(bundle, extra_config)`` where ``extra_config`` is the snapshot
    passed to :func:`save_bundle`.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = json.loads(_read_exact(fh, config_len, "config").decode("utf-8"))
        if config.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported bundle schema_version {config.get('schema_version')}"
            )
        (n_arrays,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "array name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "array rank"))
            shape = struct.unpack(f"<{ndim}I",
                                  _read_exact(fh, 4 * ndim, "array shape"))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = _read_exact(fh, 4 * count, f"array {name!r} data")
            arrays[name] = np.frombuffer(data, dtype="<f4").astype(float) \
                .reshape(shape)
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"trailing bytes after checkpoint at {fh.tell() - 1}")
    return _assemble(config, arrays), config.get("extra", {})


def _assemble(config: dict, arrays: dict[str, np.ndarray]) -> PolicyBundle:
    hidden = tuple(int(h) for h in config["hidden"])
    activation = config["activation"]
    specs = {
        "actor_lower": MlpSpec(config["obs_dim"], hidden,
                               config["n_lower"], activation),
        "actor_upper": MlpSpec(config["obs_dim"], hidden,
                               config["n_upper"], activation),
        "critic_lower": MlpSpec(config["privileged_dim"], hidden, 1, activation),
        "critic_upper": MlpSpec(config["privileged_dim"], hidden, 1, activation),
    }

    def take(name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in arrays:
            raise ValueError(f"checkpoint missing array {name!r}")
        arr = arrays.pop(name)
        if arr.shape != shape:
            raise ValueError(
                f"array {name!r} has shape {arr.shape}, expected {shape}"
            )
        return arr

    nets: dict[str, Mlp] = {}
    for prefix, spec in specs.items():
        dims = spec.layer_dims
        weights = [take(f"{prefix}/w{i}", (dims[i], dims[i + 1]))
                   for i in range(len(dims) - 1)]
        biases = [take(f"{prefix}/b{i}", (dims[i + 1],))
                  for i in range(len(dims) - 1)]
        nets[prefix] = Mlp(spec, weights, biases)
    bundle = PolicyBundle(
        actor_lower=GaussianActor(
            nets["actor_lower"],
            take("actor_lower/log_std", (config["n_lower"],))),
        actor_upper=GaussianActor(
            nets["actor_upper"],
            take("actor_upper/log_std", (config["n_upper"],))),
        critic_lower=nets["critic_lower"],
        critic_upper=nets["critic_upper"],
        delta=float(config["delta"]),
        action_scale_lower=float(config["action_scale_lower"]),
        upper_limit_lo=take("limits/upper_lo", (config["n_upper"],)),
        upper_limit_hi=take("limits/upper_hi", (config["n_upper"],)),
        schema_version=int(config["schema_version"]),
    )
    if arrays:
        raise ValueError(f"checkpoint has unexpected arrays {sorted(arrays)}")
    return bundle
