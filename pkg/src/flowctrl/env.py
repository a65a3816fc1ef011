"""Planar articulated chain with a free root, PD joints and penalty ground contact.

Generalized coordinates are ``[x, z, theta, q_1..q_K]``. Site 0 is the root, a
point mass with rotational inertia; link j is a uniform rod from site j-1 to
site j with absolute angle ``phi_j = theta + sum_{i<=j} q_i``. Every array
function accepts a leading batch dimension, so many environments step together.

The default body is a two-link post standing on a two-link foot that lies on
the ground; the root sits on top of the post.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .instruction import HOLD, Instruction, Vocabulary

TORQUE_LIMIT = 200.0


@dataclass(frozen=True)
class EnvConfig:
    K: int = 4
    link_length: float = 0.25
    link_mass: float = 1.0
    gravity: float = 9.81
    dt: float = 1.0 / 30.0
    pd_kp: float = 60.0
    pd_kd: float = 5.0
    ground_stiffness: float = 2000.0
    ground_damping: float = 50.0
    fall_height: float = 0.15
    root_mass: float = 1.0
    root_inertia: float = 0.05
    friction_damping: float = 100.0
    friction_coef: float = 1.0
    substeps: int = 48
    contact: bool = True
    rest_pose: tuple = (-1.8708, 0.0, 1.8708, 0.0)

    def __post_init__(self):
        positive = ("K", "link_length", "link_mass", "dt", "pd_kp", "pd_kd", "ground_stiffness",
                    "ground_damping", "fall_height", "root_mass", "root_inertia", "substeps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"EnvConfig.{name} must be positive, got {getattr(self, name)}")
        if self.gravity < 0:
            raise ValueError("EnvConfig.gravity must be non-negative")
        if self.dt > 1.0 / 30.0 + 1e-12:
            raise ValueError(f"EnvConfig.dt must be <= 1/30, got {self.dt}")
        if len(self.rest_pose) != self.K:
            raise ValueError(f"rest_pose needs {self.K} angles, got {len(self.rest_pose)}")

    @property
    def n_dof(self) -> int:
        return 3 + self.K

    @property
    def d_s(self) -> int:
        return 5 + 2 * self.K + 2 * (self.K + 1)

    @property
    def d_a(self) -> int:
        return self.K

    @property
    def fps(self) -> float:
        return 1.0 / self.dt


@dataclass
class EnvState:
    """Generalized positions ``q`` and velocities ``qd``, each shaped (..., 3 + K)."""

    q: np.ndarray
    qd: np.ndarray

    @classmethod
    def from_fields(cls, root_pos, theta, root_vel, root_omega, joint_q, joint_qd) -> "EnvState":
        root_pos = np.asarray(root_pos, dtype=np.float64)
        lead = root_pos.shape[:-1]
        theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), lead)[..., None]
        omega = np.broadcast_to(np.asarray(root_omega, dtype=np.float64), lead)[..., None]
        q = np.concatenate([root_pos, theta, np.asarray(joint_q, dtype=np.float64)], axis=-1)
        qd = np.concatenate([np.asarray(root_vel, dtype=np.float64), omega,
                             np.asarray(joint_qd, dtype=np.float64)], axis=-1)
        return cls(q, qd)

    @classmethod
    def zeros(cls, cfg: EnvConfig, batch: tuple = ()) -> "EnvState":
        return cls(np.zeros(batch + (cfg.n_dof,)), np.zeros(batch + (cfg.n_dof,)))

    @property
    def root_pos(self) -> np.ndarray:
        return self.q[..., 0:2]

    @property
    def theta(self) -> np.ndarray:
        return self.q[..., 2]

    @property
    def root_vel(self) -> np.ndarray:
        return self.qd[..., 0:2]

    @property
    def root_omega(self) -> np.ndarray:
        return self.qd[..., 2]

    @property
    def joint_q(self) -> np.ndarray:
        return self.q[..., 3:]

    @property
    def joint_qd(self) -> np.ndarray:
        return self.qd[..., 3:]

    def copy(self) -> "EnvState":
        return EnvState(self.q.copy(), self.qd.copy())

    def __getitem__(self, idx) -> "EnvState":
        return EnvState(self.q[idx], self.qd[idx])


# -- kinematics ------------------------------------------------------------
def _phi(q: np.ndarray) -> np.ndarray:
    return q[..., 2:3] + np.cumsum(q[..., 3:], axis=-1)


def forward_kinematics(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    """World site positions, shape (..., K + 1, 2)."""
    phi = _phi(state.q)
    steps = cfg.link_length * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    offsets = np.concatenate([np.zeros(steps.shape[:-2] + (1, 2)), np.cumsum(steps, axis=-2)], axis=-2)
    return state.root_pos[..., None, :] + offsets


@lru_cache(maxsize=16)
def _structure(K: int, L: float):
    # P maps [theta, q_1..q_K] to link angles; W* weight each link's unit vector
    P = np.ones((K, K + 1))
    P[:, 1:] = np.tril(np.ones((K, K)))
    W_com = np.tril(np.full((K, K), L), k=-1) + np.diag(np.full(K, L / 2))
    W_site = np.vstack([np.zeros((1, K)), np.tril(np.full((K, K), L))])
    return P, W_com, W_site


def _jacobians(q: np.ndarray, cfg: EnvConfig):
    K, L = cfg.K, cfg.link_length
    P, W_com, W_site = _structure(K, L)
    phi = _phi(q)
    c, s = np.cos(phi), np.sin(phi)
    u = np.stack([c, s], axis=-1)            # (B, K, 2)
    uperp = np.stack([-s, c], axis=-1)
    B = q.shape[0]
    eye2 = np.broadcast_to(np.eye(2), (B, 2, 2))

    def lin_jac(W):
        ang = np.einsum("bi,Bid,ij->Bbdj", W, uperp, P)
        trans = np.broadcast_to(eye2[:, None], (B, W.shape[0], 2, 2))
        return np.concatenate([trans, ang], axis=-1)  # (B, nb, 2, n)

    return u, lin_jac(W_com), lin_jac(W_site), P, W_com


def site_velocities(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    q = state.q.reshape(-1, cfg.n_dof)
    qd = state.qd.reshape(-1, cfg.n_dof)
    _, _, J_site, _, _ = _jacobians(q, cfg)
    v = np.einsum("Bsdn,Bn->Bsd", J_site, qd)
    return v.reshape(state.q.shape[:-1] + (cfg.K + 1, 2))


def link_angles(state: EnvState) -> np.ndarray:
    """Absolute link angles phi_1..phi_K."""
    return _phi(state.q)


def link_rates(state: EnvState) -> np.ndarray:
    return _phi(state.qd)


def pd_torque(action: np.ndarray, joint_q: np.ndarray, joint_qd: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    target = np.clip(action, -math.pi, math.pi)
    tau = cfg.pd_kp * (target - joint_q) - cfg.pd_kd * joint_qd
    return np.clip(tau, -TORQUE_LIMIT, TORQUE_LIMIT)


def _contact_forces(sites, site_vel, cfg: EnvConfig) -> np.ndarray:
    z, vz, vx = sites[..., 1], site_vel[..., 1], site_vel[..., 0]
    pen = np.minimum(z, 0.0)
    fz = np.where(z < 0.0, -cfg.ground_stiffness * pen - cfg.ground_damping * vz, 0.0)
    fz = np.maximum(fz, 0.0)
    cap = cfg.friction_coef * fz
    fx = np.clip(-cfg.friction_damping * vx, -cap, cap)
    return np.stack([fx, fz], axis=-1)


def _accelerations(q, qd, action, cfg: EnvConfig):
    K = cfg.K
    m, L = cfg.link_mass, cfg.link_length
    I_link = m * L * L / 12.0
    u, J_com, J_site, P, W_com = _jacobians(q, cfg)
    B, n = q.shape
    M = m * np.einsum("Bbdi,Bbdj->Bij", J_com, J_com)
    M[:, 2:, 2:] += I_link * (P.T @ P)
    M[:, 0, 0] += cfg.root_mass
    M[:, 1, 1] += cfg.root_mass
    M[:, 2, 2] += cfg.root_inertia

    phid = qd[:, 2:3] + np.cumsum(qd[:, 3:], axis=-1)
    # velocity-product part of each link COM acceleration
    a_bias = -np.einsum("bi,Bid->Bbd", W_com, u * (phid ** 2)[..., None])
    rhs = -m * np.einsum("Bbdn,Bbd->Bn", J_com, a_bias)
    rhs -= m * cfg.gravity * J_com[:, :, 1, :].sum(axis=1)
    rhs[:, 1] -= cfg.root_mass * cfg.gravity

    rhs[:, 3:] += pd_torque(action, q[:, 3:], qd[:, 3:], cfg)

    if cfg.contact:
        sites = forward_kinematics(EnvState(q, qd), cfg)
        v_site = np.einsum("Bsdn,Bn->Bsd", J_site, qd)
        F = _contact_forces(sites, v_site, cfg)
        rhs += np.einsum("Bsdn,Bsd->Bn", J_site, F)
    return np.linalg.solve(M, rhs[..., None])[..., 0]


def step(state: EnvState, action, cfg: EnvConfig) -> EnvState:
    """Advance one control period of ``cfg.dt`` with ``cfg.substeps`` semi-implicit Euler substeps."""
    action = np.asarray(action, dtype=np.float64)
    if not (np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qd)) and np.all(np.isfinite(action))):
        raise ValueError("step: non-finite values in state or action")
    lead = state.q.shape[:-1]
    q = state.q.reshape(-1, cfg.n_dof).copy()
    qd = state.qd.reshape(-1, cfg.n_dof).copy()
    a = np.broadcast_to(action, lead + (cfg.K,)).reshape(-1, cfg.K)
    h = cfg.dt / cfg.substeps
    for _ in range(cfg.substeps):
        qdd = _accelerations(q, qd, a, cfg)
        qd = qd + h * qdd
        q = q + h * qd
    return EnvState(q.reshape(lead + (cfg.n_dof,)), qd.reshape(lead + (cfg.n_dof,)))


def mechanical_energy(state: EnvState, cfg: EnvConfig, action=None) -> np.ndarray:
    """Kinetic + gravitational energy plus the energy held in PD and contact springs."""
    q = state.q.reshape(-1, cfg.n_dof)
    qd = state.qd.reshape(-1, cfg.n_dof)
    m, L = cfg.link_mass, cfg.link_length
    u, J_com, _, P, _ = _jacobians(q, cfg)
    v_com = np.einsum("Bbdn,Bn->Bbd", J_com, qd)
    phid = qd[:, 2:3] + np.cumsum(qd[:, 3:], axis=-1)
    ke = 0.5 * m * (v_com ** 2).sum((-1, -2)) + 0.5 * (m * L * L / 12.0) * (phid ** 2).sum(-1)
    ke += 0.5 * cfg.root_mass * (qd[:, :2] ** 2).sum(-1) + 0.5 * cfg.root_inertia * qd[:, 2] ** 2
    W_com = _structure(cfg.K, L)[1]
    z_com = q[:, 1:2] + np.einsum("bi,Bi->Bb", W_com, u[..., 1])
    pe = cfg.gravity * (cfg.root_mass * q[:, 1] + m * z_com.sum(-1))
    target = np.zeros((q.shape[0], cfg.K)) if action is None else np.clip(
        np.broadcast_to(action, (q.shape[0], cfg.K)), -math.pi, math.pi)
    pe += 0.5 * cfg.pd_kp * ((target - q[:, 3:]) ** 2).sum(-1)
    if cfg.contact:
        z = forward_kinematics(EnvState(q, qd), cfg)[..., 1]
        pe += 0.5 * cfg.ground_stiffness * (np.minimum(z, 0.0) ** 2).sum(-1)
    return (ke + pe).reshape(state.q.shape[:-1])


def to_state_vector(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    """[root z, theta, root vel (2), root omega, joint q (K), joint qd (K), sites in root frame (2(K+1))]."""
    sites = forward_kinematics(state, cfg)
    rel = sites - state.root_pos[..., None, :]
    c, s = np.cos(state.theta)[..., None], np.sin(state.theta)[..., None]
    local = np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], axis=-1)
    lead = state.q.shape[:-1]
    return np.concatenate([
        state.q[..., 1:3], state.qd[..., 0:3], state.joint_q, state.joint_qd,
        local.reshape(lead + (2 * (cfg.K + 1),)),
    ], axis=-1)


def is_fallen(state: EnvState, cfg: EnvConfig):
    return state.root_pos[..., 1] < cfg.fall_height


# -- rest pose and rule-based experts ---------------------------------------
def rest_action(cfg: EnvConfig) -> np.ndarray:
    return np.asarray(cfg.rest_pose, dtype=np.float64)


def _placed_rest_state(cfg: EnvConfig) -> EnvState:
    # put the lowest site of the rest pose exactly on the ground
    q = np.zeros(cfg.n_dof)
    q[3:] = rest_action(cfg)
    probe = forward_kinematics(EnvState(q, np.zeros_like(q)), cfg)
    q[1] = -probe[:, 1].min()
    return EnvState(q, np.zeros_like(q))


@lru_cache(maxsize=8)
def _settled(cfg: EnvConfig, seconds: float) -> tuple:
    state = _placed_rest_state(cfg)
    a = rest_action(cfg)
    for _ in range(int(round(seconds / cfg.dt))):
        state = step(state, a, cfg)
    state.q[0] = 0.0
    return state.q.tobytes(), state.qd.tobytes()


def initial_state(cfg: EnvConfig, settle_seconds: float = 3.0) -> EnvState:
    """Deterministic starting state: the rest pose after settling on the ground, root at x = 0."""
    qb, qdb = _settled(cfg, settle_seconds)
    return EnvState(np.frombuffer(qb).copy(), np.frombuffer(qdb).copy())


# schedule table: pattern per verb, joints per body part, frequency per speed
SPEED_HZ = {"slow": 0.5, "fast": 1.0}
BODY_JOINTS = {"arm": (0, 1), "leg": (2, 3)}
BODY_AMPLITUDE = {"arm": 0.35, "leg": 0.2}
RAMP_SECONDS = 0.5


def _square(x):
    return np.tanh(3.0 * np.sin(x)) / np.tanh(3.0)


VERB_PATTERNS = {
    # each entry maps phase (rad) to offsets for the two joints of the body part
    "swing": lambda x: (np.sin(x), np.sin(x)),
    "wave": lambda x: (np.sin(x), np.sin(x - 0.5 * math.pi) + 1.0),
    "tap": lambda x: (_square(x), -_square(x)),
    "bend": lambda x: (0.5 * (1.0 - np.cos(x)), 0.5 * (1.0 - np.cos(x))),
}


@dataclass(frozen=True)
class ScheduleParams:
    pattern: str
    joints: tuple
    amplitude: float
    freq_hz: float


def schedule_params(instr: Instruction) -> ScheduleParams:
    if instr.verb not in VERB_PATTERNS or instr.body_part not in BODY_JOINTS or instr.speed not in SPEED_HZ:
        raise ValueError(
            f"no expert schedule for {instr.text!r}; verbs {sorted(VERB_PATTERNS)}, "
            f"body parts {sorted(BODY_JOINTS)}, speeds {sorted(SPEED_HZ)}")
    return ScheduleParams(instr.verb, BODY_JOINTS[instr.body_part], BODY_AMPLITUDE[instr.body_part],
                          SPEED_HZ[instr.speed])


def pattern_offsets(params: ScheduleParams, seconds) -> np.ndarray:
    """Un-ramped joint offsets at times ``seconds``, shape (..., 2)."""
    x = 2.0 * math.pi * params.freq_hz * np.asarray(seconds, dtype=np.float64)
    a, b = VERB_PATTERNS[params.pattern](x)
    return params.amplitude * np.stack([a, b], axis=-1)


def expert_targets(instr: Instruction | str, t, cfg: EnvConfig, vocab: Vocabulary | None = None) -> np.ndarray:
    """Target joint angles at frame(s) ``t``: the rest pose plus a ramped per-instruction pattern."""
    t = np.asarray(t, dtype=np.float64)
    rest = rest_action(cfg)
    if isinstance(instr, str):
        if instr.strip() == HOLD:
            return np.broadcast_to(rest, t.shape + (cfg.K,)).copy()
        instr = (vocab or Vocabulary()).parse(instr)
    params = schedule_params(instr)
    if max(params.joints) >= cfg.K:
        raise ValueError(f"{instr.text!r} drives joints {params.joints} but the chain has K={cfg.K}")
    sec = t * cfg.dt
    ramp = 0.5 * (1.0 - np.cos(math.pi * np.clip(sec / RAMP_SECONDS, 0.0, 1.0)))
    out = np.broadcast_to(rest, t.shape + (cfg.K,)).copy()
    out[..., list(params.joints)] += ramp[..., None] * pattern_offsets(params, sec)
    return out


def expert_schedule(instr: Instruction | str, T: int, cfg: EnvConfig) -> np.ndarray:
    return expert_targets(instr, np.arange(T), cfg)


def with_overrides(cfg: EnvConfig, **kw) -> EnvConfig:
    return replace(cfg, **kw)
