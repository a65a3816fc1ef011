"""Conditional flow matching on trajectory chunks, guided Euler sampling and closed-loop rollout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env as E
from . import nn
from . import tensor as T
from .instruction import InstructionCondition, InstructionEncoder, cfg_dropout
from .jast import HistorySample, JASTDiT, ModelConfig, make_history
from .optim import AdamW, clip_grad_norm, warmup_constant
from .tensor import Tensor

STD_FLOOR = 0.05


@dataclass
class Normalizer:
    """Per-dimension affine standardization of states and actions."""

    s_mean: np.ndarray
    s_std: np.ndarray
    a_mean: np.ndarray
    a_std: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray, actions: np.ndarray, floor: float = STD_FLOOR) -> "Normalizer":
        states = states.reshape(-1, states.shape[-1])
        actions = actions.reshape(-1, actions.shape[-1])
        return cls(states.mean(0), np.maximum(states.std(0), floor),
                   actions.mean(0), np.maximum(actions.std(0), floor))

    @classmethod
    def identity(cls, d_s: int, d_a: int) -> "Normalizer":
        return cls(np.zeros(d_s), np.ones(d_s), np.zeros(d_a), np.ones(d_a))

    def norm_s(self, s):
        return (s - self.s_mean) / self.s_std

    def denorm_s(self, s):
        return s * self.s_std + self.s_mean

    def norm_a(self, a):
        return (a - self.a_mean) / self.a_std

    def denorm_a(self, a):
        return a * self.a_std + self.a_mean

    def arrays(self) -> dict[str, np.ndarray]:
        return {"s_mean": self.s_mean, "s_std": self.s_std, "a_mean": self.a_mean, "a_std": self.a_std}


class FlowPolicy(nn.Module):
    """Instruction encoder plus velocity model, operating on normalized chunks."""

    def __init__(self, model_cfg: ModelConfig, encoder: InstructionEncoder, rng: np.random.Generator,
                 normalizer: Normalizer | None = None):
        self.encoder = encoder
        self.model = JASTDiT(model_cfg, rng)
        self.normalizer = normalizer or Normalizer.identity(model_cfg.d_s, model_cfg.d_a)

    @property
    def cfg(self) -> ModelConfig:
        return self.model.cfg

    def velocity(self, x_a, x_s, tau, cond: InstructionCondition, hist: HistorySample):
        return self.model(x_a, x_s, tau, cond, hist)

    def history(self, raw_buffer: np.ndarray, rng: np.random.Generator) -> HistorySample:
        return make_history(self.normalizer.norm_s(raw_buffer), self.cfg, rng)


# -- flow-matching pairs and loss -------------------------------------------
@dataclass
class FlowSample:
    x0_a: np.ndarray
    x0_s: np.ndarray
    x1_a: np.ndarray
    x1_s: np.ndarray
    tau: np.ndarray
    xt_a: np.ndarray
    xt_s: np.ndarray
    u_a: np.ndarray
    u_s: np.ndarray


def make_fm_pair(x1_a: np.ndarray, x1_s: np.ndarray, rng: np.random.Generator, tau=None,
                 x0_a=None, x0_s=None) -> FlowSample:
    """Linear path x_tau = (1 - tau) x0 + tau x1 with target velocity x1 - x0."""
    B = x1_a.shape[0]
    tau = rng.random(B) if tau is None else np.broadcast_to(np.asarray(tau, dtype=np.float64), (B,)).copy()
    x0_a = rng.standard_normal(x1_a.shape) if x0_a is None else x0_a
    x0_s = rng.standard_normal(x1_s.shape) if x0_s is None else x0_s
    tb = tau.reshape((B,) + (1,) * (x1_a.ndim - 1))
    return FlowSample(x0_a, x0_s, x1_a, x1_s, tau,
                      (1.0 - tb) * x0_a + tb * x1_a, (1.0 - tb) * x0_s + tb * x1_s,
                      x1_a - x0_a, x1_s - x0_s)


def chunk_mse(v_a: Tensor, v_s: Tensor, u_a, u_s) -> Tensor:
    """Mean squared error over every action and state entry of the chunk."""
    n = v_a.size + v_s.size
    da = v_a - u_a
    ds = v_s - u_s
    return (T.tsum(da * da) + T.tsum(ds * ds)) * (1.0 / n)


def fm_loss(policy: FlowPolicy, pair: FlowSample, cond: InstructionCondition, hist: HistorySample) -> Tensor:
    dtype = T.get_default_dtype()
    v_a, v_s = policy.velocity(Tensor(pair.xt_a, dtype=dtype), Tensor(pair.xt_s, dtype=dtype), pair.tau,
                               cond, hist)
    return chunk_mse(v_a, v_s, pair.u_a.astype(dtype), pair.u_s.astype(dtype))


# -- sampling ----------------------------------------------------------------
def guided_velocity(policy: FlowPolicy, x_a, x_s, tau, cond: InstructionCondition,
                    null: InstructionCondition | None, hist: HistorySample, w: float):
    """v(null) + w (v(cond) - v(null)); w = 1 uses the conditional pass only."""
    v_a, v_s = policy.velocity(x_a, x_s, tau, cond, hist)
    if w == 1.0:
        return v_a, v_s
    u_a, u_s = policy.velocity(x_a, x_s, tau, null, hist)
    return u_a + (v_a - u_a) * w, u_s + (v_s - u_s) * w


def euler_sample(policy: FlowPolicy, cond: InstructionCondition, hist: HistorySample, K_steps: int,
                 guidance_w: float, rng: np.random.Generator, x0=None):
    """Deterministic Euler integration of the guided field from Gaussian noise; returns normalized chunks."""
    if K_steps < 1:
        raise ValueError(f"K_steps must be >= 1, got {K_steps}")
    cfg = policy.cfg
    B = len(cond)
    dtype = T.get_default_dtype()
    if x0 is None:
        x_a = rng.standard_normal((B, cfg.H, cfg.d_a)).astype(dtype)
        x_s = rng.standard_normal((B, cfg.H, cfg.d_s)).astype(dtype)
    else:
        x_a, x_s = (np.asarray(x, dtype=dtype).copy() for x in x0)
    null = policy.encoder.null_condition(B) if guidance_w != 1.0 else None
    dt = 1.0 / K_steps
    with T.no_grad():
        for k in range(K_steps):
            tau = np.full(B, k * dt)
            v_a, v_s = guided_velocity(policy, Tensor(x_a), Tensor(x_s), tau, cond, null, hist, guidance_w)
            x_a = x_a + dt * v_a.data
            x_s = x_s + dt * v_s.data
    return x_a, x_s


# -- EMA -----------------------------------------------------------------------
class EmaState:
    """Shadow copy of parameters; a plain copy until ``warmup`` updates have happened."""

    def __init__(self, params, decay: float = 0.9999, warmup: int = 1000):
        self.decay = decay
        self.warmup = warmup
        self.steps = 0
        self.shadow = [p.data.copy() for p in params]

    def update(self, params) -> None:
        self.steps += 1
        for s, p in zip(self.shadow, params):
            if self.steps <= self.warmup:
                s[...] = p.data
            else:
                s *= self.decay
                s += (1.0 - self.decay) * p.data

    def copy_to(self, params) -> None:
        for s, p in zip(self.shadow, params):
            p.data = s.astype(p.dtype, copy=True)


def ema_update(ema: EmaState, params) -> EmaState:
    ema.update(params)
    return ema


# -- closed-loop rollout -----------------------------------------------------
@dataclass
class RolloutResult:
    states: np.ndarray    # (B, T_max + 1, d_s), frame 0 is the initial state
    actions: np.ndarray   # (B, T_max + 1, d_a), frame 0 holds the rest action
    sites: np.ndarray     # (B, T_max + 1, K + 1, 2)
    fallen: np.ndarray    # (B,)
    t_valid: np.ndarray   # (B,) frames survived before the first fall
    T_max: int
    q: np.ndarray = None  # (B, T_max + 1, n_dof) generalized coordinates
    qd: np.ndarray = None


def rollout_closed_loop(policy: FlowPolicy, env_cfg: E.EnvConfig, texts: list[str], T_max: int,
                        K_steps: int, guidance_w: float, rng: np.random.Generator,
                        stop_on_fall: bool = True) -> RolloutResult:
    """Receding-horizon control: sample a chunk, execute its first action, extend the history."""
    cfg = policy.cfg
    B = len(texts)
    s0 = E.initial_state(env_cfg)
    state = E.EnvState(np.tile(s0.q, (B, 1)), np.tile(s0.qd, (B, 1)))
    vec0 = E.to_state_vector(state, env_cfg)
    buffer = np.repeat(vec0[:, None], cfg.L_max, axis=1)
    states = np.zeros((B, T_max + 1, env_cfg.d_s))
    actions = np.zeros((B, T_max + 1, env_cfg.d_a))
    sites = np.zeros((B, T_max + 1, env_cfg.K + 1, 2))
    states[:, 0] = vec0
    actions[:, 0] = E.rest_action(env_cfg)
    sites[:, 0] = E.forward_kinematics(state, env_cfg)
    qs = np.zeros((B, T_max + 1, env_cfg.n_dof))
    qds = np.zeros_like(qs)
    qs[:, 0], qds[:, 0] = state.q, state.qd
    alive = np.ones(B, dtype=bool)
    t_valid = np.zeros(B, dtype=np.int64)
    with T.no_grad():
        cond = policy.encoder(texts)
    for t in range(1, T_max + 1):
        hist = policy.history(buffer, rng)
        x_a, _ = euler_sample(policy, cond, hist, K_steps, guidance_w, rng)
        a = policy.normalizer.denorm_a(x_a[:, 0].astype(np.float64))
        if stop_on_fall:
            a = np.where(alive[:, None], a, actions[:, t - 1])
        state = E.step(state, a, env_cfg)
        vec = E.to_state_vector(state, env_cfg)
        states[:, t], actions[:, t] = vec, a
        sites[:, t] = E.forward_kinematics(state, env_cfg)
        qs[:, t], qds[:, t] = state.q, state.qd
        fell = E.is_fallen(state, env_cfg)
        alive &= ~fell
        t_valid += alive
        buffer = np.concatenate([buffer[:, 1:], vec[:, None]], axis=1)
        if stop_on_fall and not alive.any():
            states[:, t + 1:] = vec[:, None]
            sites[:, t + 1:] = sites[:, t][:, None]
            qs[:, t + 1:], qds[:, t + 1:] = state.q[:, None], state.qd[:, None]
            break
    return RolloutResult(states, actions, sites, ~alive, t_valid, T_max, qs, qds)


def drop_instructions(texts: list[str], rng: np.random.Generator, p: float = 0.10) -> list[str]:
    return cfg_dropout(texts, rng, p)


# -- Stage-I training -------------------------------------------------------------
@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 20000
    batch_size: int = 64
    lr: float = 1e-4
    warmup: int = 1000
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    cfg_dropout: float = 0.10
    ema_decay: float = 0.999
    ema_warmup: int = 1000
    val_every: int = 1000
    val_size: int = 256


@dataclass
class WindowData:
    """Normalized-ready window arrays; ``texts`` are instruction strings per window."""

    history: np.ndarray
    target_states: np.ndarray
    target_actions: np.ndarray
    texts: list

    def __len__(self) -> int:
        return len(self.texts)

    def take(self, idx) -> "WindowData":
        return WindowData(self.history[idx], self.target_states[idx], self.target_actions[idx],
                          [self.texts[i] for i in idx])


class FixedBatch:
    """A frozen draw of noise, flow time and history indices, so validation losses are comparable."""

    def __init__(self, policy: FlowPolicy, data: WindowData, rng: np.random.Generator):
        nz = policy.normalizer
        self.texts = data.texts
        self.hist = policy.history(data.history, rng)
        self.pair = make_fm_pair(nz.norm_a(data.target_actions), nz.norm_s(data.target_states), rng)

    def loss(self, policy: FlowPolicy, chunk: int = 128) -> float:
        total, n = 0.0, len(self.texts)
        with T.no_grad():
            for lo in range(0, n, chunk):
                idx = np.arange(lo, min(lo + chunk, n))
                pair = FlowSample(*(getattr(self.pair, f)[idx] for f in FlowSample.__dataclass_fields__))
                cond = policy.encoder([self.texts[i] for i in idx])
                total += fm_loss(policy, pair, cond, self.hist.take(idx)).item() * len(idx)
        return total / n


def train_step(policy: FlowPolicy, batch: WindowData, opt, rng: np.random.Generator, tcfg: PretrainConfig):
    nz = policy.normalizer
    texts = drop_instructions(batch.texts, rng, tcfg.cfg_dropout)
    hist = policy.history(batch.history, rng)
    pair = make_fm_pair(nz.norm_a(batch.target_actions), nz.norm_s(batch.target_states), rng)
    opt.zero_grad()
    loss = fm_loss(policy, pair, policy.encoder(texts), hist)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite flow-matching loss {loss.item()}")
    loss.backward()
    clip_grad_norm(opt.params, tcfg.grad_clip)
    opt.step()
    return loss.item()


def pretrain(policy: FlowPolicy, train: WindowData, val: WindowData, tcfg: PretrainConfig,
             rng: np.random.Generator, val_rng: np.random.Generator | None = None, log=None,
             start_step: int = 0, opt: AdamW | None = None, ema: EmaState | None = None, checkpoint=None):
    """Flow-matching behavior cloning from ``start_step`` to ``tcfg.steps``.

    ``log`` receives rows {step, fm_loss, val_loss, lr}; ``checkpoint(step, opt, ema)`` is called
    after every validation. The validation batch is drawn from ``val_rng`` so a resumed run
    scores the same windows. Returns (optimizer, ema, initial val loss or None on resume, final val loss).
    """
    params = policy.parameters()
    opt = opt or AdamW(params, lr=tcfg.lr, betas=tcfg.betas, weight_decay=tcfg.weight_decay)
    ema = ema or EmaState(params, tcfg.ema_decay, tcfg.ema_warmup)
    val_rng = val_rng or np.random.default_rng(rng.integers(2 ** 63))
    vidx = val_rng.permutation(len(val))[:tcfg.val_size] if len(val) else np.zeros(0, np.int64)
    fixed = FixedBatch(policy, val.take(vidx), val_rng) if len(vidx) else None
    val0 = val_last = None
    if start_step == 0:
        val0 = val_last = fixed.loss(policy) if fixed else float("nan")
        if log:
            log({"step": 0, "fm_loss": float("nan"), "val_loss": val0, "lr": 0.0})
    running = []
    for step in range(start_step + 1, tcfg.steps + 1):
        opt.lr = warmup_constant(step, tcfg.lr, tcfg.warmup)
        idx = rng.integers(0, len(train), size=tcfg.batch_size)
        running.append(train_step(policy, train.take(idx), opt, rng, tcfg))
        ema.update(params)
        if step % tcfg.val_every == 0 or step == tcfg.steps:
            val_last = fixed.loss(policy) if fixed else float("nan")
            if log:
                log({"step": step, "fm_loss": float(np.mean(running)), "val_loss": val_last, "lr": opt.lr})
            running = []
            if checkpoint:
                checkpoint(step, opt, ema)
    return opt, ema, val0, val_last
