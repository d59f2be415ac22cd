"""Dual-agent proximal policy optimization on the vectorized environment.

Both agents share the rollout: each control step the lower policy emits an
unitless leg action and the upper policy a residual-corrected joint target,
the environment returns one reward per stream, and both actor-critic pairs
are updated from the same trajectories. Updates are clipped-surrogate PPO
with generalized advantage estimation, per-minibatch advantage
normalization, decoupled weight decay, global gradient-norm clipping and a
KL-adaptive learning rate per agent.

Everything is plain numpy; gradients come from the policy module's manual
backward passes.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from hafo_lab.env import VecEnv
from hafo_lab.motions import Curriculum
from hafo_lab.policy import (
    GaussianActor,
    Mlp,
    PolicyBundle,
    act_lower,
    act_upper,
    evaluate_values,
    gaussian_entropy,
    save_bundle,
)

LOG_2PI = float(np.log(2.0 * np.pi))

UPDATE_MODES = ("simultaneous", "alternating")
TRAIN_MODES = ("hafo", "wo-da", "wo-force")

# wall-clock entries stay out of the metrics file so same-seed runs produce
# byte-identical logs
VOLATILE_KEYS = ("time_s",)


@dataclass(frozen=True)
class PpoConfig:
    """Optimization constants; defaults match the bundled training setup."""

    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    value_loss_coef: float = 1.0
    entropy_coef: float = 0.01
    learning_rate: float = 1.0e-3
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    desired_kl: float = 0.01
    kl_lr_factor: float = 1.5
    lr_min: float = 1.0e-5
    lr_max: float = 1.0e-2
    steps_per_env: int = 24
    epochs: int = 5
    minibatches: int = 4
    update_mode: str = "simultaneous"

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError(f"clip_ratio must be in (0, 1), got {self.clip_ratio}")
        for name in ("gamma", "gae_lambda"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("value_loss_coef", "learning_rate", "max_grad_norm",
                     "kl_lr_factor", "lr_min", "lr_max"):
            v = getattr(self, name)
            if v <= 0.0:
                raise ValueError(f"{name} must be positive, got {v}")
        for name in ("entropy_coef", "weight_decay", "desired_kl"):
            v = getattr(self, name)
            if v < 0.0:
                raise ValueError(f"{name} must be nonnegative, got {v}")
        for name in ("steps_per_env", "epochs", "minibatches"):
            v = getattr(self, name)
            if v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(
                f"update_mode must be one of {UPDATE_MODES}, got {self.update_mode!r}")


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over a (T, N) rollout.

    ``values`` carries one extra row: the bootstrap value of the state after
    the final transition. ``dones`` marks transitions whose successor state
    must not be bootstrapped (failures, and timeouts whose bootstrap was
    already folded into the reward).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T, N = rewards.shape
    if values.shape != (T + 1, N):
        raise ValueError(
            f"values must have shape {(T + 1, N)}, got {values.shape}")
    if dones.shape != (T, N):
        raise ValueError(f"dones must have shape {(T, N)}, got {dones.shape}")
    adv = np.zeros((T, N))
    acc = np.zeros(N)
    for t in reversed(range(T)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        acc = delta + gamma * lam * live * acc
        adv[t] = acc
    return adv, adv + values[:-1]


class AdamW:
    """Adam with decoupled weight decay; decay is applied per parameter flag."""

    def __init__(self, params: list[np.ndarray], decay: list[bool], *,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if len(params) != len(decay):
            raise ValueError("params and decay flags must align")
        self.params = params
        self.decay = list(decay)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        if len(grads) != len(self.params):
            raise ValueError(
                f"expected {len(self.params)} gradients, got {len(grads)}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v, dec in zip(self.params, grads, self.m, self.v, self.decay):
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match param {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if dec:
                update = update + self.weight_decay * p
            p -= lr * update


def global_grad_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grads_(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale the gradient list in place to the norm bound; returns the
    pre-clip global norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def _gaussian_kl(mean_old: np.ndarray, log_std_old: np.ndarray,
                 mean_new: np.ndarray, log_std_new: np.ndarray) -> float:
    """Mean KL(old || new) between diagonal Gaussians over a batch."""
    var_new = np.exp(2.0 * log_std_new)
    per_dim = (log_std_new - log_std_old
               + (np.exp(2.0 * log_std_old) + (mean_old - mean_new) ** 2)
               / (2.0 * var_new) - 0.5)
    return float(np.sum(per_dim, axis=1).mean())


@dataclass
class RolloutBuffer:
    """Fixed-size storage for one collection phase, shaped (T, N, ...)."""

    obs: np.ndarray
    priv: np.ndarray
    actions_lower: np.ndarray
    actions_upper: np.ndarray
    logp_lower: np.ndarray
    logp_upper: np.ndarray
    mean_lower: np.ndarray
    mean_upper: np.ndarray
    rewards_lower: np.ndarray
    rewards_upper: np.ndarray
    dones: np.ndarray
    values_lower: np.ndarray   # (T + 1, N) after the bootstrap row is set
    values_upper: np.ndarray
    log_std_lower: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_std_upper: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @staticmethod
    def allocate(T: int, N: int, obs_dim: int, priv_dim: int,
                 n_lower: int, n_upper: int) -> "RolloutBuffer":
        return RolloutBuffer(
            obs=np.zeros((T, N, obs_dim)),
            priv=np.zeros((T, N, priv_dim)),
            actions_lower=np.zeros((T, N, n_lower)),
            actions_upper=np.zeros((T, N, n_upper)),
            logp_lower=np.zeros((T, N)),
            logp_upper=np.zeros((T, N)),
            mean_lower=np.zeros((T, N, n_lower)),
            mean_upper=np.zeros((T, N, n_upper)),
            rewards_lower=np.zeros((T, N)),
            rewards_upper=np.zeros((T, N)),
            dones=np.zeros((T, N)),
            values_lower=np.zeros((T + 1, N)),
            values_upper=np.zeros((T + 1, N)),
        )

    @property
    def horizon(self) -> int:
        return self.rewards_lower.shape[0]

    @property
    def n_envs(self) -> int:
        return self.rewards_lower.shape[1]


class _AgentGroup:
    """One actor-critic pair with its optimizer and adaptive learning rate."""

    def __init__(self, name: str, actor: GaussianActor, critic: Mlp,
                 config: PpoConfig):
        self.name = name
        self.actor = actor
        self.critic = critic
        self.lr = config.learning_rate
        params: list[np.ndarray] = []
        decay: list[bool] = []
        for net in (actor.net, critic):
            params.extend(net.weights)
            decay.extend([True] * len(net.weights))
            params.extend(net.biases)
            decay.extend([False] * len(net.biases))
        params.append(actor.log_std)
        decay.append(False)
        self.opt = AdamW(params, decay, weight_decay=config.weight_decay)

    def update_minibatch(self, cfg: PpoConfig, obs: np.ndarray, priv: np.ndarray,
                         actions: np.ndarray, logp_old: np.ndarray,
                         mean_old: np.ndarray, log_std_old: np.ndarray,
                         adv: np.ndarray, returns: np.ndarray) -> dict:
        B = obs.shape[0]
        adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)

        mean, inputs = self.actor.net.forward_cached(obs)
        log_std = self.actor.log_std
        inv_std = np.exp(-log_std)
        z = (actions - mean) * inv_std
        logp = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=1)
        ratio = np.exp(logp - logp_old)
        surr1 = ratio * adv_n
        surr2 = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * adv_n
        take1 = surr1 <= surr2
        entropy = gaussian_entropy(log_std)
        actor_loss = -float(np.where(take1, surr1, surr2).mean()) \
            - cfg.entropy_coef * entropy

        dlogp = np.where(take1, -adv_n * ratio, 0.0) / B
        grad_mean = dlogp[:, None] * (actions - mean) * (inv_std * inv_std)
        grad_log_std = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0) \
            - cfg.entropy_coef
        gw_a, gb_a, _ = self.actor.net.backward(inputs, grad_mean)

        v, v_inputs = self.critic.forward_cached(priv)
        v_err = v[:, 0] - returns
        value_loss = cfg.value_loss_coef * float(np.mean(v_err * v_err))
        gw_c, gb_c, _ = self.critic.backward(
            v_inputs, (2.0 * cfg.value_loss_coef / B) * v_err[:, None])

        kl = _gaussian_kl(mean_old, log_std_old, mean, log_std)
        if cfg.desired_kl > 0.0:
            if kl > 2.0 * cfg.desired_kl:
                self.lr = max(cfg.lr_min, self.lr / cfg.kl_lr_factor)
            elif 0.0 < kl < 0.5 * cfg.desired_kl:
                self.lr = min(cfg.lr_max, self.lr * cfg.kl_lr_factor)

        grads = gw_a + gb_a + gw_c + gb_c + [grad_log_std]
        grad_norm = clip_grads_(grads, cfg.max_grad_norm)
        if not (np.isfinite(actor_loss) and np.isfinite(value_loss)
                and np.isfinite(grad_norm) and np.isfinite(kl)):
            raise RuntimeError(
                f"non-finite update for agent {self.name}: "
                f"actor_loss={actor_loss}, value_loss={value_loss}, "
                f"grad_norm={grad_norm}, kl={kl}, lr={self.lr}")
        self.opt.step(grads, self.lr)
        return {
            "actor_loss": actor_loss,
            "value_loss": value_loss,
            "kl": kl,
            "entropy": entropy,
            "grad_norm": grad_norm,
            "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_ratio)),
            "lr": self.lr,
        }


class Trainer:
    """Collection / update loop binding one env, one bundle, one curriculum.

    ``mode`` selects the training variant: "hafo" trains both agents,
    "wo-da" replays the blended reference open loop and trains only the
    lower agent, "wo-force" trains both agents with the disturbance scale
    pinned to zero.
    """

    def __init__(
        self,
        env: VecEnv,
        bundle: PolicyBundle,
        config: PpoConfig | None = None,
        *,
        seed: int = 0,
        mode: str = "hafo",
        curriculum: Curriculum | None = None,
        log_path: str | None = None,
        checkpoint_dir: str | None = None,
        checkpoint_every: int = 0,
    ):
        if mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {mode!r}")
        if mode == "wo-da" and env.blend_anchor != "default":
            raise ValueError(
                "open-loop reference replay needs blend_anchor='default'; "
                "a measured-pose anchor would chase its own output")
        if env.n_lower != bundle.n_lower or env.n_upper != bundle.n_upper:
            raise ValueError("bundle action widths do not match the env")
        if env.obs_layout.size != bundle.obs_dim \
                or env.priv_layout.size != bundle.privileged_dim:
            raise ValueError("bundle observation widths do not match the env")
        self.env = env
        self.bundle = bundle
        self.config = config if config is not None else PpoConfig()
        self.mode = mode
        self.curriculum = curriculum
        self.rng = np.random.default_rng(seed)
        self.lower = _AgentGroup("lower", bundle.actor_lower,
                                 bundle.critic_lower, self.config)
        self.upper = _AgentGroup("upper", bundle.actor_upper,
                                 bundle.critic_upper, self.config)
        self.log_path = log_path
        self.checkpoint_dir = checkpoint_dir
        self.checkpoint_every = checkpoint_every
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
        self.iteration = 0
        self.total_env_steps = 0
        self._apply_difficulty()
        self.obs, self.priv = env.reset()

    # ------------------------------------------------------------ difficulty

    def _apply_difficulty(self) -> None:
        if self.curriculum is not None:
            alpha = self.curriculum.alpha
            force = self.curriculum.force_scale
        else:
            alpha = self.env.alpha
            force = self.env.force_scale
        if self.mode == "wo-force":
            force = 0.0
        self.env.set_difficulty(alpha, force)

    # ------------------------------------------------------------ collection

    def collect(self) -> tuple[RolloutBuffer, dict]:
        cfg = self.config
        env = self.env
        bundle = self.bundle
        T, N = cfg.steps_per_env, env.n_envs
        buf = RolloutBuffer.allocate(T, N, bundle.obs_dim, bundle.privileged_dim,
                                     bundle.n_lower, bundle.n_upper)
        buf.log_std_lower = bundle.actor_lower.log_std.copy()
        buf.log_std_upper = bundle.actor_upper.log_std.copy()

        finished_returns_lower: list[float] = []
        finished_returns_upper: list[float] = []
        finished_lengths: list[float] = []
        tracking_sum = 0.0
        n_terminated = 0
        n_diverged = 0

        for t in range(T):
            theta_ref = env.theta_ref()
            a_l, logp_l = act_lower(bundle, self.obs, mode="stochastic",
                                    rng=self.rng)
            buf.mean_lower[t] = bundle.actor_lower.net.forward(self.obs)
            if self.mode == "wo-da":
                theta_target = theta_ref
            else:
                raw_u, _, theta_target, logp_u = act_upper(
                    bundle, self.obs, theta_ref, mode="stochastic", rng=self.rng)
                buf.actions_upper[t] = raw_u
                buf.logp_upper[t] = logp_u
                buf.mean_upper[t] = bundle.actor_upper.net.forward(self.obs)
            v_l, v_u = evaluate_values(bundle, self.priv)

            obs_next, priv_next, r_l, r_u, done, info = env.step(a_l, theta_target)

            timeouts = info["timeouts"]
            if np.any(timeouts):
                vt_l, vt_u = evaluate_values(bundle, info["terminal_privileged"])
                r_l = r_l + cfg.gamma * vt_l * timeouts
                r_u = r_u + cfg.gamma * vt_u * timeouts

            buf.obs[t] = self.obs
            buf.priv[t] = self.priv
            buf.actions_lower[t] = a_l
            buf.logp_lower[t] = logp_l
            buf.rewards_lower[t] = r_l
            buf.rewards_upper[t] = r_u
            buf.dones[t] = done
            buf.values_lower[t] = v_l
            buf.values_upper[t] = v_u

            finished_returns_lower.extend(info["episode_returns_lower"].tolist())
            finished_returns_upper.extend(info["episode_returns_upper"].tolist())
            finished_lengths.extend(info["episode_lengths"].tolist())
            n_terminated += int(info["terminated"].sum())
            n_diverged += int(info["diverged"].sum())
            tracked = env.last_rewards.weighted.get("upper_dofs_position")
            if tracked is not None:
                tracking_sum += float(tracked.mean())

            self.obs, self.priv = obs_next, priv_next

        v_l, v_u = evaluate_values(bundle, self.priv)
        buf.values_lower[T] = v_l
        buf.values_upper[T] = v_u
        self.total_env_steps += T * N

        stats = {
            "tracking_per_step": tracking_sum / T,
            "termination_rate": n_terminated / N * (env.max_steps / T),
            "n_terminated": n_terminated,
            "n_diverged": n_diverged,
            "finished_episodes": len(finished_lengths),
            "episode_return_lower": float(np.mean(finished_returns_lower))
            if finished_returns_lower else float("nan"),
            "episode_return_upper": float(np.mean(finished_returns_upper))
            if finished_returns_upper else float("nan"),
            "episode_length": float(np.mean(finished_lengths))
            if finished_lengths else float("nan"),
            "reward_lower_per_step": float(buf.rewards_lower.mean()),
            "reward_upper_per_step": float(buf.rewards_upper.mean()),
        }
        return buf, stats

    # --------------------------------------------------------------- updates

    def update(self, buf: RolloutBuffer) -> dict:
        cfg = self.config
        T, N = buf.horizon, buf.n_envs
        adv_l, ret_l = compute_gae(buf.rewards_lower, buf.values_lower,
                                   buf.dones, cfg.gamma, cfg.gae_lambda)
        adv_u, ret_u = compute_gae(buf.rewards_upper, buf.values_upper,
                                   buf.dones, cfg.gamma, cfg.gae_lambda)

        def flat(a: np.ndarray) -> np.ndarray:
            return a.reshape(T * N, *a.shape[2:])

        obs = flat(buf.obs)
        priv = flat(buf.priv)
        data = {
            "lower": (flat(buf.actions_lower), flat(buf.logp_lower),
                      flat(buf.mean_lower), buf.log_std_lower,
                      flat(adv_l), flat(ret_l)),
            "upper": (flat(buf.actions_upper), flat(buf.logp_upper),
                      flat(buf.mean_upper), buf.log_std_upper,
                      flat(adv_u), flat(ret_u)),
        }

        update_lower = True
        update_upper = self.mode != "wo-da"
        if cfg.update_mode == "alternating":
            if self.iteration % 2 == 0:
                update_upper = False
            else:
                update_lower = False
            update_lower = update_lower or self.mode == "wo-da"

        agents = []
        if update_lower:
            agents.append(self.lower)
        if update_upper:
            agents.append(self.upper)

        metrics: dict[str, list[dict]] = {g.name: [] for g in agents}
        for _ in range(cfg.epochs):
            perm = self.rng.permutation(T * N)
            for chunk in np.array_split(perm, cfg.minibatches):
                for group in agents:
                    actions, logp, mean_old, log_std_old, adv, ret = data[group.name]
                    metrics[group.name].append(group.update_minibatch(
                        cfg, obs[chunk], priv[chunk], actions[chunk],
                        logp[chunk], mean_old[chunk], log_std_old,
                        adv[chunk], ret[chunk]))

        out = {}
        for name, rows in metrics.items():
            for key in rows[0]:
                out[f"{key}_{name}"] = float(np.mean([r[key] for r in rows]))
            out[f"lr_{name}"] = rows[-1]["lr"]
        return out

    # ------------------------------------------------------------------ loop

    def train(self, iterations: int) -> list[dict]:
        history = []
        log_fh = open(self.log_path, "a") if self.log_path else None
        try:
            for _ in range(iterations):
                t0 = time.perf_counter()
                self._apply_difficulty()
                buf, stats = self.collect()
                update_metrics = self.update(buf)
                self.iteration += 1

                promoted = False
                if self.curriculum is not None:
                    promoted = self.curriculum.update(
                        stats["tracking_per_step"], stats["termination_rate"])

                row = {
                    "iteration": self.iteration,
                    "total_env_steps": self.total_env_steps,
                    "mode": self.mode,
                    "alpha": self.env.alpha,
                    "force_scale": self.env.force_scale,
                    "promoted": promoted,
                    "time_s": time.perf_counter() - t0,
                }
                row.update(stats)
                row.update(update_metrics)
                history.append(row)
                if log_fh is not None:
                    logged = {k: v for k, v in row.items()
                              if k not in VOLATILE_KEYS}
                    json.dump(logged, log_fh, sort_keys=True)
                    log_fh.write("\n")
                    log_fh.flush()
                if (self.checkpoint_dir and self.checkpoint_every > 0
                        and self.iteration % self.checkpoint_every == 0):
                    self._save_checkpoint(f"iter_{self.iteration:05d}.ckpt")
            if self.checkpoint_dir:
                self._save_checkpoint("final.ckpt")
        finally:
            if log_fh is not None:
                log_fh.close()
        return history

    def _save_checkpoint(self, filename: str) -> None:
        extra = {
            "iteration": self.iteration,
            "total_env_steps": self.total_env_steps,
            "mode": self.mode,
            "alpha": self.env.alpha,
            "force_scale": self.env.force_scale,
        }
        save_bundle(os.path.join(self.checkpoint_dir, filename),
                    self.bundle, extra_config=extra)
