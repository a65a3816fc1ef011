"""Clip filtering, rollout gating, action perturbation and training windows."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

SHORT_FRAMES = 30
STATIC_THRESHOLD = 2e-3
PENETRATION_DROP = 0.05
PENETRATION_MIN = -0.03
FLOAT_HEIGHT = 0.30
FLOAT_VARIANCE = 0.08
GATE_MPJPE = 0.15
GATE_JERK = 600.0


class Reason(str, enum.Enum):
    SHORT = "short"
    STATIC = "static"
    PENETRATION = "penetration"
    FLOATING = "floating"
    OK = "ok"


@dataclass
class MotionClip:
    """World site positions ``frames`` of shape (T, J, 3) with z up; site 0 is the root."""

    frames: np.ndarray
    fps: float
    instruction_id: int = -1

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1 or self.frames.shape[2] != 3:
            raise ValueError(f"clip frames must be (T>=1, J, 3), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("clip frames contain non-finite positions")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @classmethod
    def from_planar(cls, sites: np.ndarray, fps: float, instruction_id: int = -1) -> "MotionClip":
        """Lift (T, J, 2) planar (x, z) sites to (x, 0, z)."""
        sites = np.asarray(sites, dtype=np.float64)
        zeros = np.zeros(sites.shape[:-1] + (1,))
        return cls(np.concatenate([sites[..., :1], zeros, sites[..., 1:2]], axis=-1), fps, instruction_id)


@dataclass
class TrackedTrajectory:
    """Frame t holds the state s_t and the action a_t that was commanded to reach it."""

    states: np.ndarray   # (T, d_s)
    actions: np.ndarray  # (T, d_a)
    sites: np.ndarray    # (T, K + 1, 2)
    instruction_id: int

    def __post_init__(self):
        n = len(self.states)
        if len(self.actions) != n or len(self.sites) != n:
            raise ValueError(f"trajectory lengths differ: states {n}, actions {len(self.actions)}, "
                             f"sites {len(self.sites)}")

    @property
    def T(self) -> int:
        return len(self.states)


@dataclass
class WindowSample:
    history: np.ndarray        # (L_max, d_s)
    target_states: np.ndarray  # (H, d_s)
    target_actions: np.ndarray  # (H, d_a)
    instruction_id: int
    trajectory_id: int = -1


# -- kinematic filters ----------------------------------------------------
def planar_joint_angles(frames: np.ndarray) -> np.ndarray:
    """Chain angles recovered from site positions: first link's absolute angle, then relative angles."""
    d = np.diff(frames, axis=1)
    phi = np.unwrap(np.arctan2(d[..., 2], d[..., 0]), axis=0)
    return np.concatenate([phi[:, :1], np.diff(phi, axis=1)], axis=1)


def _window_starts(T: int, width: int) -> range:
    return range(0, max(T - 1, 1), width)


def is_static(clip: MotionClip) -> bool:
    if clip.T < 2:
        return True
    diffs = np.abs(np.diff(planar_joint_angles(clip.frames), axis=0)).mean(axis=1)  # (T-1,)
    width = max(int(round(clip.fps)), 1)
    return all(diffs[s:s + width].mean() < STATIC_THRESHOLD for s in _window_starts(clip.T, width))


def is_penetrating(clip: MotionClip) -> bool:
    width = max(int(round(clip.fps)), 1)
    z = clip.frames[..., 2].min(axis=1)
    return bool(np.median(z[-width:]) < np.median(z[:width]) - PENETRATION_DROP and z.min() < PENETRATION_MIN)


def is_floating(clip: MotionClip) -> bool:
    foot = clip.frames[:, -1, 2]
    return bool(foot.min() > FLOAT_HEIGHT and foot.var() < FLOAT_VARIANCE)


def filter_kinematic(clip: MotionClip) -> tuple[bool, Reason]:
    """Apply the short, static, penetration and floating checks in that order."""
    if clip.T < SHORT_FRAMES:
        return False, Reason.SHORT
    if is_static(clip):
        return False, Reason.STATIC
    if is_penetrating(clip):
        return False, Reason.PENETRATION
    if is_floating(clip):
        return False, Reason.FLOATING
    return True, Reason.OK


# -- rollout gate ----------------------------------------------------------
def rollout_mpjpe(ref: MotionClip, roll: MotionClip) -> float:
    """Root-aligned position error summed over non-root joints, divided by T * J."""
    if ref.frames.shape != roll.frames.shape:
        raise ValueError(f"clip shapes differ: {ref.frames.shape} vs {roll.frames.shape}")
    a = roll.frames - roll.frames[:, :1]
    b = ref.frames - ref.frames[:, :1]
    err = np.linalg.norm(a[:, 1:] - b[:, 1:], axis=-1)
    T, J = err.shape
    return float(err.sum() / (T * J))


def third_difference(p: np.ndarray) -> np.ndarray:
    return p[3:] - 3.0 * p[2:-1] + 3.0 * p[1:-2] - p[:-3]


def rollout_jerk(roll: MotionClip) -> float:
    """Mean norm of the third finite difference over all sites, in m/s^3."""
    if roll.T < 4:
        raise ValueError(f"jerk needs at least 4 frames, got {roll.T}")
    dt = 1.0 / roll.fps
    return float(np.linalg.norm(third_difference(roll.frames), axis=-1).mean() / dt ** 3)


def _below(value: float, threshold: float) -> bool:
    # thresholds are inclusive; absorb summation round-off at the boundary
    return value < threshold * (1.0 - 1e-12)


def passes_gate(mpjpe: float, jerk: float) -> bool:
    return _below(mpjpe, GATE_MPJPE) and _below(jerk, GATE_JERK)


def gate_rollout(ref: MotionClip, roll: MotionClip) -> bool:
    return passes_gate(rollout_mpjpe(ref, roll), rollout_jerk(roll))


def perturb_action(a: np.ndarray, rng: np.random.Generator, sigma: float = 0.01) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if sigma == 0.0:
        return a.copy()
    return a + rng.normal(0.0, sigma, size=a.shape)


# -- windows ----------------------------------------------------------------
def window_count(T: int, L_max: int, H: int, stride: int) -> int:
    t_pad = T + L_max
    n = t_pad - L_max - H
    return n // stride + 1 if n >= 0 else 0


def build_windows(traj: TrackedTrajectory, L_max: int, H: int, stride: int,
                  trajectory_id: int = -1) -> list[WindowSample]:
    """Pad the front with L_max copies of frame 0, then cut windows of L_max + H frames."""
    if H < 1 or stride < 1 or L_max < 0:
        raise ValueError(f"need H >= 1, stride >= 1, L_max >= 0; got {H}, {stride}, {L_max}")
    states = np.concatenate([np.repeat(traj.states[:1], L_max, axis=0), traj.states])
    actions = np.concatenate([np.repeat(traj.actions[:1], L_max, axis=0), traj.actions])
    out = []
    for k in range(window_count(traj.T, L_max, H, stride)):
        i = k * stride
        out.append(WindowSample(states[i:i + L_max].copy(), states[i + L_max:i + L_max + H].copy(),
                                actions[i + L_max:i + L_max + H].copy(), traj.instruction_id, trajectory_id))
    return out


def window_arrays(traj: TrackedTrajectory, L_max: int, H: int, stride: int):
    """Stacked (history, target_states, target_actions) arrays for all windows of one trajectory."""
    ws = build_windows(traj, L_max, H, stride)
    if not ws:
        return (np.zeros((0, L_max, traj.states.shape[1])), np.zeros((0, H, traj.states.shape[1])),
                np.zeros((0, H, traj.actions.shape[1])))
    return (np.stack([w.history for w in ws]), np.stack([w.target_states for w in ws]),
            np.stack([w.target_actions for w in ws]))


def split_assignment(n: int, rng: np.random.Generator, ratios=(0.8, 0.1, 0.1)) -> np.ndarray:
    """Label each trajectory id as train/val/test with a seeded permutation."""
    if not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    order = rng.permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train:n_train + n_val]] = "val"
    labels[order[n_train + n_val:]] = "test"
    return labels
