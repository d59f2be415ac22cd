"""Upper-body reference motions and the training curriculum.

Clips are fixed-rate joint-angle tracks for the upper DOFs, generated
procedurally (no capture data): smooth periodic reach/wave/pump patterns
centered on the default arm pose. They serialize to a small binary container
(f32 little-endian frames) so exported motions are bit-stable across runs.

The curriculum interpolates the commanded upper target between an anchor pose
and the clip pose, then ramps disturbance forces, each in fixed increments
gated on tracking quality and survival.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

CLIP_MAGIC = b"HFMC"
CLIP_VERSION = 1


@dataclass
class MotionClip:
    """A looping joint-space track at a fixed frame rate."""

    name: str
    frame_rate: float
    frames: np.ndarray  # (T, J) float64 in memory, f32 on disk

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 2 or self.frames.shape[0] < 2:
            raise ValueError(
                f"clip {self.name!r} needs at least two frames, got shape "
                f"{self.frames.shape}"
            )

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.frames.shape[0] / self.frame_rate

    def sample(self, t: np.ndarray | float) -> np.ndarray:
        """Linearly interpolated pose at time ``t``; loops past the end."""
        t = np.asarray(t, dtype=float)
        T = self.frames.shape[0]
        pos = np.mod(t * self.frame_rate, T)
        i0 = np.floor(pos).astype(int) % T
        i1 = (i0 + 1) % T
        w = (pos - np.floor(pos))[..., None]
        return (1.0 - w) * self.frames[i0] + w * self.frames[i1]

    def sample_velocity(self, t: np.ndarray | float) -> np.ndarray:
        """Track velocity from the active interpolation segment, rad/s."""
        t = np.asarray(t, dtype=float)
        T = self.frames.shape[0]
        pos = np.mod(t * self.frame_rate, T)
        i0 = np.floor(pos).astype(int) % T
        i1 = (i0 + 1) % T
        return (self.frames[i1] - self.frames[i0]) * self.frame_rate


def save_clip(clip: MotionClip, path: str) -> None:
    name_bytes = clip.name.encode("utf-8")
    frames32 = np.ascontiguousarray(clip.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<I", CLIP_VERSION))
        fh.write(struct.pack("<I", len(name_bytes)))
        fh.write(name_bytes)
        fh.write(struct.pack("<f", clip.frame_rate))
        fh.write(struct.pack("<II", frames32.shape[0], frames32.shape[1]))
        fh.write(frames32.tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(
            f"truncated clip file: needed {count} bytes for {what} at offset "
            f"{fh.tell() - len(data)}, got {len(data)}"
        )
    return data


def load_clip(path: str) -> MotionClip:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CLIP_MAGIC:
            raise ValueError(f"not a motion clip file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CLIP_VERSION:
            raise ValueError(f"unsupported clip version {version}")
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
        name = _read_exact(fh, name_len, "name").decode("utf-8")
        (frame_rate,) = struct.unpack("<f", _read_exact(fh, 4, "frame rate"))
        n_frames, n_joints = struct.unpack("<II", _read_exact(fh, 8, "shape"))
        payload = _read_exact(fh, 4 * n_frames * n_joints, "frame data")
        frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_joints)
    return MotionClip(name=name, frame_rate=float(frame_rate),
                      frames=frames.astype(float))


def _smooth_cycle(n: int) -> np.ndarray:
    """One period of a C1 bump, 0 -> 1 -> 0, zero slope at both ends."""
    u = np.linspace(0.0, 1.0, n, endpoint=False)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * u)


def builtin_clips(n_joints: int = 4, frame_rate: float = 50.0) -> dict[str, MotionClip]:
    """Procedural upper-body repertoire for a [shoulder_l, elbow_l, shoulder_r,
    elbow_r] layout; angles are offsets from the default arm pose."""
    if n_joints != 4:
        raise ValueError(f"builtin clips are authored for 4 upper DOFs, got {n_joints}")
    t2 = round(2.0 * frame_rate)
    t3 = round(3.0 * frame_rate)
    clips = {}

    hold = np.zeros((t2, 4))
    clips["steady_hold"] = MotionClip("steady_hold", frame_rate, hold)

    wave = np.zeros((t2, 4))
    cyc = _smooth_cycle(t2)
    wave[:, 0] = -0.9 * cyc                      # left shoulder raise
    wave[:, 1] = -0.5 * np.tile(_smooth_cycle(t2 // 2), 2)[:t2]  # elbow flaps twice
    clips["wave_left"] = MotionClip("wave_left", frame_rate, wave)

    reach = np.zeros((t3, 4))
    cyc3 = _smooth_cycle(t3)
    reach[:, 0] = -1.1 * cyc3
    reach[:, 2] = -1.1 * cyc3                    # both shoulders forward
    reach[:, 1] = -0.3 * cyc3
    reach[:, 3] = -0.3 * cyc3
    clips["reach_forward"] = MotionClip("reach_forward", frame_rate, reach)

    pump = np.zeros((t2, 4))
    ph = 2.0 * np.pi * np.arange(t2) / t2
    pump[:, 0] = 0.3 * np.sin(ph)                # shoulders swing in antiphase
    pump[:, 2] = -0.3 * np.sin(ph)
    pump[:, 1] = -0.5 * (1.0 - np.cos(ph))       # elbows curl together
    pump[:, 3] = -0.5 * (1.0 - np.cos(ph))
    clips["pump"] = MotionClip("pump", frame_rate, pump)
    return clips


@dataclass(frozen=True)
class DatasetConfig:
    """Synthetic reference-motion dataset: families and counts.

    ``jerk_bound`` caps the per-frame joint delta (rad); every emitted clip
    is validated against it and against the joint limits, with rejected
    draws regenerated up to ``max_retries`` times.
    """

    n_sinusoid: int = 16
    n_keyframe: int = 16
    frame_rate: float = 50.0
    duration: float = 3.0
    amplitude: tuple[float, float] = (0.1, 0.8)
    frequency: tuple[float, float] = (0.2, 0.8)   # Hz
    jerk_bound: float = 0.12
    max_retries: int = 50

    def __post_init__(self) -> None:
        if self.n_sinusoid < 0 or self.n_keyframe < 0:
            raise ValueError("clip counts must be nonnegative")
        if self.frame_rate <= 0.0 or self.duration <= 0.0:
            raise ValueError("frame_rate and duration must be positive")
        if not 0.0 <= self.amplitude[0] <= self.amplitude[1]:
            raise ValueError(f"bad amplitude range {self.amplitude}")
        if not 0.0 < self.frequency[0] <= self.frequency[1]:
            raise ValueError(f"bad frequency range {self.frequency}")
        if self.jerk_bound <= 0.0:
            raise ValueError("jerk_bound must be positive")


def check_clip(clip: MotionClip, limits_lo: np.ndarray, limits_hi: np.ndarray,
               jerk_bound: float) -> None:
    """Raise if any frame leaves the joint limits or moves too fast."""
    lo = np.asarray(limits_lo, dtype=float)
    hi = np.asarray(limits_hi, dtype=float)
    if np.any(clip.frames < lo) or np.any(clip.frames > hi):
        raise ValueError(f"clip {clip.name!r} leaves the joint limits")
    step = np.abs(np.diff(clip.frames, axis=0)).max(initial=0.0)
    if step > jerk_bound:
        raise ValueError(
            f"clip {clip.name!r} max per-frame delta {step:.4f} exceeds "
            f"the jerk bound {jerk_bound}"
        )


# Joint activity masks for the keyframe family, over
# [shoulder_l, elbow_l, shoulder_r, elbow_r].
_KEYFRAME_PATTERNS = (
    ("wave_l", np.array([1.0, 1.0, 0.0, 0.0])),
    ("wave_r", np.array([0.0, 0.0, 1.0, 1.0])),
    ("reach", np.array([1.0, 0.3, 1.0, 0.3])),
    ("punch", np.array([0.6, 1.0, 0.6, 1.0])),
)


def _sinusoid_frames(config: DatasetConfig, default: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    n = max(2, round(config.duration * config.frame_rate))
    n_joints = default.size
    t = np.arange(n) / config.frame_rate
    envelope = _smooth_cycle(n)
    amp = rng.uniform(*config.amplitude, size=n_joints)
    freq = rng.uniform(*config.frequency, size=n_joints)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_joints)
    waves = np.sin(2.0 * np.pi * freq[None, :] * t[:, None] + phase[None, :])
    return default[None, :] + amp[None, :] * waves * envelope[:, None]


def _keyframe_frames(config: DatasetConfig, default: np.ndarray,
                     rng: np.random.Generator) -> tuple[str, np.ndarray]:
    n = max(2, round(config.duration * config.frame_rate))
    n_joints = default.size
    pattern, mask = _KEYFRAME_PATTERNS[rng.integers(len(_KEYFRAME_PATTERNS))]
    if n_joints != mask.size:
        mask = np.ones(n_joints)
    n_keys = int(rng.integers(3, 6))
    amp = rng.uniform(*config.amplitude)
    keys = np.zeros((n_keys + 2, n_joints))
    keys[1:-1] = rng.uniform(-amp, amp, size=(n_keys, n_joints)) * mask
    keys += default[None, :]
    # Smoothstep between keyframes: zero end slopes, so chained segments
    # stay jerk-bounded at the joins.
    segments = np.array_split(np.arange(n), n_keys + 1)
    frames = np.zeros((n, n_joints))
    for k, seg in enumerate(segments):
        if seg.size == 0:
            continue
        u = np.linspace(0.0, 1.0, seg.size, endpoint=False)
        s = u * u * (3.0 - 2.0 * u)
        frames[seg] = keys[k][None, :] + s[:, None] * (keys[k + 1] - keys[k])
    return pattern, frames


def generate_dataset(config: DatasetConfig, default_pose: np.ndarray,
                     limits_lo: np.ndarray, limits_hi: np.ndarray,
                     rng: np.random.Generator) -> list[MotionClip]:
    """Deterministic synthetic clip set, validated and regenerated on failure."""
    default = np.asarray(default_pose, dtype=float)
    clips: list[MotionClip] = []

    def emit(name: str, maker) -> None:
        for attempt in range(config.max_retries):
            made = maker()
            if isinstance(made, tuple):
                tag, frames = made
                clip = MotionClip(f"{name}_{tag}", config.frame_rate, frames)
            else:
                clip = MotionClip(name, config.frame_rate, made)
            try:
                check_clip(clip, limits_lo, limits_hi, config.jerk_bound)
            except ValueError:
                continue
            clips.append(clip)
            return
        raise RuntimeError(
            f"could not generate a valid clip for {name!r} in "
            f"{config.max_retries} attempts"
        )

    for i in range(config.n_sinusoid):
        emit(f"sin_{i:03d}", lambda: _sinusoid_frames(config, default, rng))
    for i in range(config.n_keyframe):
        emit(f"key_{i:03d}", lambda: _keyframe_frames(config, default, rng))
    return clips


def blend_reference(anchor: np.ndarray, target: np.ndarray,
                    alpha: float | np.ndarray) -> np.ndarray:
    """Curriculum interpolation between an anchor pose and the clip pose."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    return anchor + alpha * (target - anchor)


@dataclass
class CurriculumConfig:
    step: float = 0.1
    tracking_max: float = 4.0        # per-step ceiling of the tracking term
    tracking_fraction: float = 0.8   # promote above this fraction of the ceiling
    max_termination_rate: float = 0.3  # fraction of envs resetting per episode span
    ema_decay: float = 0.9


@dataclass
class Curriculum:
    """Two-stage difficulty ladder: motion blend first, then force scale.

    Each promotion raises one knob by ``step``; 20 promotions reach full
    difficulty. Demotion never happens; the gate just holds.
    """

    config: CurriculumConfig = field(default_factory=CurriculumConfig)
    alpha: float = 0.0
    force_scale: float = 0.0
    promotions: int = 0
    tracking_ema: float = 0.0
    termination_ema: float = 1.0

    @property
    def full(self) -> bool:
        return self.alpha >= 1.0 and self.force_scale >= 1.0

    def promote(self) -> None:
        if self.alpha < 1.0:
            self.alpha = min(1.0, round(self.alpha + self.config.step, 10))
        elif self.force_scale < 1.0:
            self.force_scale = min(1.0, round(self.force_scale + self.config.step, 10))
        else:
            return
        self.promotions += 1

    def update(self, tracking_per_step: float, termination_rate: float) -> bool:
        """Fold one iteration's stats into the gate; returns True on promotion."""
        d = self.config.ema_decay
        self.tracking_ema = d * self.tracking_ema + (1.0 - d) * tracking_per_step
        self.termination_ema = d * self.termination_ema + (1.0 - d) * termination_rate
        gate = (
            self.tracking_ema
            >= self.config.tracking_fraction * self.config.tracking_max
        ) and self.termination_ema <= self.config.max_termination_rate
        if gate and not self.full:
            self.promote()
            # a fresh rung must re-earn the gate instead of chaining promotions
            self.tracking_ema = 0.0
            return True
        return False
