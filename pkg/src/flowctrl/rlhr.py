"""Online RL post-training of the flow policy with a stochastic denoising chain.

Each policy query integrates the flow with K Euler steps. Gaussian noise with a
learned, bounded scale is injected into the action entries of the chunk only, so
the whole chain is a Markov process with a tractable log-likelihood. Rewards mix a
dense physical tracking term with a sparse episodic text-match term from the
frozen aligner; updates use clipped PPO with GAE, a closed-form entropy bonus and
a flow-matching anchor towards the frozen pretrained field.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import env as E
from . import nn
from . import tensor as T
from .aligner import Aligner, similarity_matrix, tail_window
from .corpus import expert_reference
from .flow import FlowPolicy, guided_velocity
from .jast import HistorySample
from .optim import AdamW, clip_grad_norm, cosine_restarts
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)
LOG_2PIE = math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class RLConfig:
    n_envs: int = 16
    frames_per_iter: int = 64
    iterations: int = 50
    epochs: int = 5
    minibatch: int = 256
    K_steps: int = 5
    T_max: int = 240
    sigma_min: float = 0.03
    sigma_max: float = 0.08
    clip_eps: float = 0.10
    logratio_clamp: float = 20.0
    gamma: float = 0.99
    lam: float = 0.95
    alpha_v: float = 0.5
    alpha_e: float = 0.001
    alpha_bc: float = 1.0
    w_phys: float = 1.0
    w_text: float = 20.0
    phys_weights: tuple = (0.5, 0.3, 0.1, 0.1)
    phys_scales: tuple = (100.0, 10.0, 0.1, 0.1)
    actor_lr: float = 1e-5
    critic_lr: float = 1e-3
    lr_cycle: int = 200
    max_grad_norm: float = 1.0
    text_window: int = 128
    noise_hidden: int = 64
    critic_hidden: int = 64

    def __post_init__(self):
        if not 0.0 < self.sigma_min <= self.sigma_max:
            raise ValueError(f"need 0 < sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"GAE lambda must be in [0, 1], got {self.lam}")
        if min(self.n_envs, self.frames_per_iter, self.epochs, self.minibatch, self.K_steps, self.T_max) < 1:
            raise ValueError("RL sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# -- exploration noise ---------------------------------------------------------
def noise_scale(z, sigma_min: float, sigma_max: float):
    """log s^2 = log s_min^2 + (log s_max^2 - log s_min^2)(1 + tanh z)/2; returns s."""
    lo, hi = 2.0 * math.log(sigma_min), 2.0 * math.log(sigma_max)
    log_var = (T.tanh(T.as_tensor(z)) + 1.0) * (0.5 * (hi - lo)) + lo
    return T.exp(log_var * 0.5)


class NoiseNet(nn.Module):
    """Per-action-dimension noise scale from flow time and the latest history state."""

    def __init__(self, d_s: int, d_a: int, rng: np.random.Generator, hidden: int = 64,
                 sigma_min: float = 0.03, sigma_max: float = 0.08):
        self.sigma_min, self.sigma_max = sigma_min, sigma_max
        self.hidden = hidden
        self.hist_proj = nn.Linear(d_s, hidden, rng)
        self.fc1 = nn.Linear(2 * hidden, hidden, rng)
        self.fc2 = nn.Linear(hidden, d_a, rng, zero=True)

    def logits(self, tau, hist: HistorySample) -> Tensor:
        B = hist.rec_states.shape[0]
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (B,))
        dtype = T.get_default_dtype()
        t_emb = Tensor(nn.sinusoidal_embedding(1000.0 * tau, self.hidden), dtype=dtype)
        h = self.hist_proj(Tensor(hist.rec_states[:, -1], dtype=dtype))
        return self.fc2(T.silu(self.fc1(T.concat([t_emb, h], axis=-1))))

    def __call__(self, tau, hist: HistorySample) -> Tensor:
        return noise_scale(self.logits(tau, hist), self.sigma_min, self.sigma_max)


# -- stochastic chain ---------------------------------------------------------------
def stochastic_euler_step(policy: FlowPolicy, net: NoiseNet, x_a, x_s, tau: float, dt: float, cond, hist,
                          rng: np.random.Generator, guidance_w: float = 1.0, null=None):
    """x' = x + v dt + M_a * sigma * eps: noise enters the action entries only.

    Returns (x_next_a, x_next_s, mu_a, sigma) as numpy arrays.
    """
    B = x_a.shape[0]
    taus = np.full(B, tau)
    with T.no_grad():
        v_a, v_s = guided_velocity(policy, Tensor(x_a), Tensor(x_s), taus, cond, null, hist, guidance_w)
        sigma = net(taus, hist).data                                     # (B, d_a)
    mu_a = x_a + dt * v_a.data
    x_next_s = x_s + dt * v_s.data
    eps = rng.standard_normal(x_a.shape)
    return mu_a + sigma[:, None, :] * eps, x_next_s, mu_a, sigma


def gaussian_logpdf(x, mu, sigma):
    """Elementwise log N(x; mu, sigma^2), differentiable in mu and sigma."""
    z = (T.as_tensor(x) - mu) / sigma
    return z * z * -0.5 - T.log(T.as_tensor(sigma)) - 0.5 * LOG_2PI


def chain_logprob(x_next_a, mu_a, sigma):
    """Sum over chain steps of diagonal-Gaussian log densities of the action entries.

    Shapes: x_next_a and mu_a (B, K, H, d_a); sigma (B, K, d_a), shared over the H chunk
    rows. The initial-noise density is left out because it cancels in likelihood ratios.
    """
    sig = sigma.data if isinstance(sigma, Tensor) else np.asarray(sigma)
    if np.any(sig <= 0):
        raise ValueError("noise scales must be positive")
    sigma = T.as_tensor(sigma)
    B, K, d_a = sigma.shape
    lp = gaussian_logpdf(x_next_a, mu_a, T.reshape(sigma, (B, K, 1, d_a)))
    return T.tsum(T.reshape(lp, (B, -1)), axis=1)


def ppo_ratio(logp_new, logp_old, clamp: float = 20.0):
    """exp of the clamped log-likelihood difference of whole chains."""
    delta = T.as_tensor(logp_new) - logp_old
    return T.exp(T.clip(delta, -clamp, clamp))


def ppo_loss(ratio, adv, clip_eps: float = 0.10):
    ratio = T.as_tensor(ratio)
    adv = np.asarray(adv, dtype=ratio.dtype)
    unclipped = ratio * adv
    clipped = T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return -T.mean(T.minimum(unclipped, clipped))


def gae(rewards, values, dones, last_value, gamma: float = 0.99, lam: float = 0.95):
    """Generalized advantage estimates over time-major (T, ...) arrays.

    ``dones[t]`` marks that the episode ended at transition t, so values after it are not
    bootstrapped. ``last_value`` is V at the state following the final transition.
    """
    rewards, values, dones = (np.asarray(x, dtype=np.float64) for x in (rewards, values, dones))
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError(f"length mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    adv = np.zeros_like(rewards)
    next_adv = np.zeros_like(rewards[0]) if len(rewards) else 0.0
    next_value = np.asarray(last_value, dtype=np.float64)
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def entropy_bonus(sigma):
    """Closed-form Gaussian entropy per chain, averaged over steps: (1/K) sum_k 1/2 sum_i [log 2 pi e + 2 log s].

    ``sigma`` is (..., K, n) with n the noised entries of one step; returns the mean over leading dims.
    """
    sigma = T.as_tensor(sigma)
    K = sigma.shape[-2]
    per = T.tsum(T.log(sigma) + 0.5 * LOG_2PIE, axis=-1)                 # (..., K)
    return T.mean(T.tsum(per, axis=-1) * (1.0 / K))


# -- rewards ---------------------------------------------------------------------
def tracking_errors(sim: E.EnvState, ref: E.EnvState, cfg: E.EnvConfig) -> np.ndarray:
    """Mean squared discrepancy per channel: site positions, link orientations, site velocities, link rates.

    Positions are measured relative to each body's own root x so horizontal drift is not penalized.
    Returns (..., 4).
    """
    def local_sites(s):
        p = E.forward_kinematics(s, cfg)
        return p - np.stack([s.root_pos[..., 0], np.zeros_like(s.root_pos[..., 0])], -1)[..., None, :]

    dp = ((local_sites(sim) - local_sites(ref)) ** 2).sum(-1).mean(-1)
    dang = np.angle(np.exp(1j * (E.link_angles(sim) - E.link_angles(ref))))
    dq = (dang ** 2).mean(-1)
    dv = ((E.site_velocities(sim, cfg) - E.site_velocities(ref, cfg)) ** 2).sum(-1).mean(-1)
    dw = ((E.link_rates(sim) - E.link_rates(ref)) ** 2).mean(-1)
    return np.stack([dp, dq, dv, dw], axis=-1)


def phys_reward_from_errors(sq_err, weights=(0.5, 0.3, 0.1, 0.1), scales=(100.0, 10.0, 0.1, 0.1)):
    """sum_m w_m exp(-k_m |d_m|^2) given squared discrepancies (..., 4)."""
    sq_err = np.asarray(sq_err, dtype=np.float64)
    return (np.asarray(weights) * np.exp(-np.asarray(scales) * sq_err)).sum(-1)


def phys_reward(sim: E.EnvState, ref: E.EnvState, cfg: E.EnvConfig, weights=(0.5, 0.3, 0.1, 0.1),
                scales=(100.0, 10.0, 0.1, 0.1)) -> np.ndarray:
    return phys_reward_from_errors(tracking_errors(sim, ref, cfg), weights, scales)


def text_reward_from_similarity(S: np.ndarray, rows=None) -> np.ndarray:
    """log softmax_j S[i, j] evaluated at each row's paired column ``rows[i]`` (default i)."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if S.shape[0] == 0 or S.shape[1] == 0:
        raise ValueError("text reward needs a non-empty batch")
    rows = np.arange(S.shape[0]) if rows is None else np.asarray(rows)
    m = S.max(axis=1, keepdims=True)
    logp = S - m - np.log(np.exp(S - m).sum(axis=1, keepdims=True))
    return logp[np.arange(S.shape[0]), rows]


def text_reward(aligner: Aligner, windows: np.ndarray, lengths: np.ndarray, text_pool: np.ndarray,
                rows: np.ndarray) -> np.ndarray:
    """Episode-level reward: log-probability that each state window retrieves its own prompt among the batch's."""
    if len(windows) == 0:
        raise ValueError("text reward needs a non-empty batch")
    with T.no_grad():
        z_s = aligner.encode_states(windows, lengths)
        z_t = aligner.encode_text(text_pool)
        S = similarity_matrix(z_s, z_t, aligner.gamma).data
    return text_reward_from_similarity(S, rows)


# -- losses on stored chains ------------------------------------------------------
def bc_anchor(policy: FlowPolicy, frozen: FlowPolicy, x1_a, x1_s, cond, cond0, hist, rng: np.random.Generator):
    """Mean squared gap between current and frozen velocity fields on fresh flow-matching points."""
    B = x1_a.shape[0]
    tau = rng.random(B)
    eps_a = rng.standard_normal(x1_a.shape)
    eps_s = rng.standard_normal(x1_s.shape)
    tb = tau[:, None, None]
    xt_a = (1.0 - tb) * eps_a + tb * x1_a
    xt_s = (1.0 - tb) * eps_s + tb * x1_s
    with T.no_grad():
        f_a, f_s = frozen.velocity(Tensor(xt_a), Tensor(xt_s), tau, cond0, hist)
    v_a, v_s = policy.velocity(Tensor(xt_a), Tensor(xt_s), tau, cond, hist)
    da, ds = v_a - f_a.data, v_s - f_s.data
    return (T.tsum(da * da) + T.tsum(ds * ds)) * (1.0 / (da.size + ds.size))


def rl_objective(ppo, value_loss, entropy, bc, alpha_v: float = 0.5, alpha_e: float = 0.001,
                 alpha_bc: float = 1.0):
    total = T.as_tensor(ppo) + T.as_tensor(value_loss) * alpha_v - T.as_tensor(entropy) * alpha_e
    if alpha_bc != 0.0 and bc is not None:
        total = total + T.as_tensor(bc) * alpha_bc
    return total


class Critic(nn.Module):
    """Value of the current state given the pooled instruction feature."""

    def __init__(self, d_s: int, d_pool: int, rng: np.random.Generator, hidden: int = 64):
        self.fc1 = nn.Linear(d_s + d_pool, hidden, rng)
        self.fc2 = nn.Linear(hidden, hidden, rng)
        self.out = nn.Linear(hidden, 1, rng, zero=True)

    def __call__(self, s, c_pool) -> Tensor:
        x = T.concat([T.as_tensor(s), T.as_tensor(c_pool)], axis=-1)
        h = T.tanh(self.fc2(T.tanh(self.fc1(x))))
        return T.reshape(self.out(h), (-1,))


class RunningRewardScaler:
    """Divides rewards by the running root-mean-square of per-env discounted returns.

    With a constant return c the scale converges to |c|.
    """

    def __init__(self, n_envs: int, gamma: float = 0.99, eps: float = 1e-8):
        self.gamma = gamma
        self.eps = eps
        self.ret = np.zeros(n_envs)
        self.sq_mean = 0.0
        self.count = 0

    @property
    def scale(self) -> float:
        return math.sqrt(self.sq_mean) if self.count else 1.0

    def observe_returns(self, returns) -> None:
        r = np.asarray(returns, dtype=np.float64).reshape(-1)
        n = self.count + len(r)
        self.sq_mean += (float((r ** 2).sum()) - len(r) * self.sq_mean) / n
        self.count = n

    def __call__(self, rewards, dones) -> np.ndarray:
        rewards = np.asarray(rewards, dtype=np.float64)
        self.ret = self.ret * self.gamma + rewards
        self.observe_returns(self.ret)
        self.ret = np.where(np.asarray(dones, dtype=bool), 0.0, self.ret)
        return rewards / max(self.scale, self.eps)


# -- rollout collection ---------------------------------------------------------------
@dataclass
class ChainBatch:
    """Flattened (time-major) records of one collection phase."""

    xs_a: np.ndarray        # (N, K+1, H, d_a)
    xs_s: np.ndarray        # (N, K+1, H, d_s)
    mu_a: np.ndarray        # (N, K, H, d_a)
    sigma: np.ndarray       # (N, K, d_a)
    logp: np.ndarray        # (N,)
    hist: HistorySample
    env_index: np.ndarray   # (N,) which env (and hence prompt) produced the record
    obs: np.ndarray         # (N, d_s) normalized state the action was taken from
    value: np.ndarray
    reward: np.ndarray      # scaled composite reward
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.logp)


class VecEnv:
    """Parallel episodes with a fixed prompt per environment and expert reference motions."""

    def __init__(self, cfg: E.EnvConfig, texts: list[str], T_max: int, L_max: int):
        self.cfg, self.texts, self.T_max, self.L_max = cfg, list(texts), T_max, L_max
        n = len(texts)
        _, _, _, ref = expert_reference(self.texts, T_max + 1, cfg, return_q=True)
        self.ref = ref                                   # EnvState with (n, T_max + 1, n_dof)
        s0 = E.initial_state(cfg)
        self.s0 = s0
        self.state = E.EnvState(np.tile(s0.q, (n, 1)), np.tile(s0.qd, (n, 1)))
        vec0 = E.to_state_vector(self.state, cfg)
        self.t = np.zeros(n, dtype=np.int64)
        self.episode = np.repeat(vec0[:, None], T_max + 1, axis=1)
        self.buffer = np.repeat(vec0[:, None], L_max, axis=1)

    def ref_state(self) -> E.EnvState:
        idx = np.arange(len(self.texts))
        return E.EnvState(self.ref.q[idx, self.t], self.ref.qd[idx, self.t])

    def step(self, actions: np.ndarray):
        """Advance all envs; returns (fallen, timeout) flags before any reset."""
        self.state = E.step(self.state, actions, self.cfg)
        vec = E.to_state_vector(self.state, self.cfg)
        self.t += 1
        self.episode[np.arange(len(vec)), self.t] = vec
        self.buffer = np.concatenate([self.buffer[:, 1:], vec[:, None]], axis=1)
        return E.is_fallen(self.state, self.cfg), self.t >= self.T_max

    def reset(self, mask: np.ndarray) -> None:
        if not mask.any():
            return
        vec0 = E.to_state_vector(self.s0, self.cfg)
        self.state.q[mask] = self.s0.q
        self.state.qd[mask] = self.s0.qd
        self.t[mask] = 0
        self.episode[mask] = vec0
        self.buffer[mask] = vec0


def sample_chain(policy: FlowPolicy, net: NoiseNet, cond, hist: HistorySample, K: int, rng: np.random.Generator):
    """Run the stochastic chain from Gaussian noise; returns stacked states, means, scales and logprob."""
    cfg = policy.cfg
    B = len(cond)
    x_a = rng.standard_normal((B, cfg.H, cfg.d_a))
    x_s = rng.standard_normal((B, cfg.H, cfg.d_s))
    xs_a, xs_s, mus, sigmas = [x_a], [x_s], [], []
    dt = 1.0 / K
    for k in range(K):
        x_a, x_s, mu, sig = stochastic_euler_step(policy, net, x_a, x_s, k * dt, dt, cond, hist, rng)
        xs_a.append(x_a), xs_s.append(x_s), mus.append(mu), sigmas.append(sig)
    xs_a, xs_s = np.stack(xs_a, 1), np.stack(xs_s, 1)
    mu, sigma = np.stack(mus, 1), np.stack(sigmas, 1)
    with T.no_grad():
        logp = chain_logprob(xs_a[:, 1:], mu, sigma).data
    return xs_a, xs_s, mu, sigma, logp


def recompute_logprob(policy: FlowPolicy, net: NoiseNet, xs_a, xs_s, cond, hist: HistorySample):
    """Chain log-likelihood of stored samples under the current parameters, with gradients.

    Returns (logp (B,), sigma Tensor (B, K, d_a)).
    """
    B, K1 = xs_a.shape[:2]
    K = K1 - 1
    dt = 1.0 / K
    lps, sigmas = [], []
    for k in range(K):
        taus = np.full(B, k * dt)
        v_a, _ = policy.velocity(Tensor(xs_a[:, k]), Tensor(xs_s[:, k]), taus, cond, hist)
        mu = v_a * dt + xs_a[:, k]
        sig = net(taus, hist)
        sigmas.append(T.reshape(sig, (B, 1, -1)))
        lp = gaussian_logpdf(xs_a[:, k + 1], mu, T.reshape(sig, (B, 1, -1)))
        lps.append(T.tsum(T.reshape(lp, (B, -1)), axis=1))
    total = lps[0]
    for lp in lps[1:]:
        total = total + lp
    return total, T.concat(sigmas, axis=1)


@dataclass
class IterationStats:
    iter: int
    mean_reward: float
    r_phys: float
    r_text: float
    ppo_loss: float
    value_loss: float
    entropy: float
    bc_loss: float
    mean_sigma: float
    duration: float


class RLHRTrainer:
    """Holds the policy, frozen anchor, noise net, critic, optimizers and the persistent envs."""

    def __init__(self, policy: FlowPolicy, aligner: Aligner, env_cfg: E.EnvConfig, texts: list[str],
                 rcfg: RLConfig, rng: np.random.Generator):
        if len(texts) != rcfg.n_envs:
            raise ValueError(f"need one prompt per env: {rcfg.n_envs} envs, {len(texts)} prompts")
        self.policy, self.aligner, self.env_cfg, self.rcfg, self.rng = policy, aligner, env_cfg, rcfg, rng
        self.texts = list(texts)
        policy.encoder.requires_grad_(False)
        self.frozen = copy.deepcopy(policy)
        self.frozen.requires_grad_(False)
        mcfg = policy.cfg
        self.noise = NoiseNet(mcfg.d_s, mcfg.d_a, rng, rcfg.noise_hidden, rcfg.sigma_min, rcfg.sigma_max)
        self.critic = Critic(mcfg.d_s, mcfg.d_pool, rng, rcfg.critic_hidden)
        self.actor_params = policy.model.parameters() + self.noise.parameters()
        self.actor_opt = AdamW(self.actor_params, lr=rcfg.actor_lr, weight_decay=0.0)
        self.critic_opt = AdamW(self.critic.parameters(), lr=rcfg.critic_lr, weight_decay=0.0)
        self.envs = VecEnv(env_cfg, texts, rcfg.T_max, mcfg.L_max)
        self.scaler = RunningRewardScaler(rcfg.n_envs, rcfg.gamma)
        with T.no_grad():
            self.cond = policy.encoder(self.texts).detach()
        self.text_pool = self.cond.c_pool.data.astype(np.float64)
        self.updates = 0
        self.iteration = 0

    def _value(self, obs: np.ndarray, idx: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.critic(obs, self.text_pool[idx]).data.astype(np.float64)

    def collect(self):
        rc, pol, envs = self.rcfg, self.policy, self.envs
        n = rc.n_envs
        env_idx = np.arange(n)
        recs = {k: [] for k in ("xs_a", "xs_s", "mu", "sigma", "logp", "obs", "value", "reward", "done", "raw_r")}
        hists, r_phys_all, r_text_all, durations = [], [], [], []
        for _ in range(rc.frames_per_iter):
            obs = pol.normalizer.norm_s(envs.buffer[:, -1])
            hist = pol.history(envs.buffer, self.rng)
            xs_a, xs_s, mu, sigma, logp = sample_chain(pol, self.noise, self.cond, hist, rc.K_steps, self.rng)
            action = pol.normalizer.denorm_a(xs_a[:, -1, 0])
            value = self._value(obs, env_idx)
            fallen, timeout = envs.step(action)
            r_phys = phys_reward(envs.state, envs.ref_state(), self.env_cfg, rc.phys_weights, rc.phys_scales)
            done = fallen | timeout
            r_text = np.zeros(n)
            if done.any():
                ends = np.flatnonzero(done)
                wins = [tail_window(envs.episode[i], int(envs.t[i]), rc.text_window) for i in ends]
                r_text[ends] = text_reward(self.aligner, np.stack([w for w, _ in wins]),
                                           np.array([l for _, l in wins]), self.text_pool, ends)
                r_text_all.extend(r_text[ends])
                durations.extend(np.where(fallen[ends], envs.t[ends] - 1, envs.t[ends]) / rc.T_max)
            raw = rc.w_phys * r_phys + rc.w_text * r_text
            r_phys_all.append(r_phys.mean())
            for key, val in (("xs_a", xs_a), ("xs_s", xs_s), ("mu", mu), ("sigma", sigma), ("logp", logp),
                             ("obs", obs), ("value", value), ("raw_r", raw), ("done", done.astype(np.float64))):
                recs[key].append(val)
            recs["reward"].append(self.scaler(raw, done))
            hists.append(hist)
            envs.reset(done)
        last_value = self._value(pol.normalizer.norm_s(envs.buffer[:, -1]), env_idx)
        Tn = rc.frames_per_iter
        adv, ret = gae(np.stack(recs["reward"]), np.stack(recs["value"]), np.stack(recs["done"]), last_value,
                       rc.gamma, rc.lam)
        flat = lambda key: np.concatenate(recs[key], axis=0)
        hist = HistorySample(*(np.concatenate([getattr(h, f) for h in hists]) for f in
                               ("dist_states", "dist_offsets", "rec_states", "rec_offsets")))
        batch = ChainBatch(flat("xs_a"), flat("xs_s"), flat("mu"), flat("sigma"), flat("logp"), hist,
                           np.tile(env_idx, Tn), flat("obs"), flat("value"), flat("reward"), flat("done"))
        info = {"mean_reward": float(np.mean(recs["raw_r"])), "r_phys": float(np.mean(r_phys_all)),
                "r_text": float(np.mean(r_text_all)) if r_text_all else float("nan"),
                "duration": float(np.mean(durations)) if durations else float("nan")}
        return batch, adv.reshape(-1), ret.reshape(-1), info

    def update(self, batch: ChainBatch, adv: np.ndarray, ret: np.ndarray, check_first: bool = True):
        rc = self.rcfg
        N = len(batch)
        stats = {k: [] for k in ("ppo_loss", "value_loss", "entropy", "bc_loss", "mean_sigma")}
        self.max_first_ratio_err = 0.0
        for epoch in range(rc.epochs):
            order = self.rng.permutation(N)
            for lo in range(0, N, rc.minibatch):
                idx = order[lo:lo + rc.minibatch]
                cond = self.cond.take(batch.env_index[idx])
                hist = batch.hist.take(idx)
                logp, sigma = recompute_logprob(self.policy, self.noise, batch.xs_a[idx], batch.xs_s[idx], cond, hist)
                if check_first and epoch == 0 and lo == 0:
                    err = float(np.abs(np.exp(logp.data - batch.logp[idx]) - 1.0).max())
                    self.max_first_ratio_err = err
                a = adv[idx]
                a = (a - a.mean()) / (a.std() + 1e-8)
                ratio = ppo_ratio(logp, batch.logp[idx], rc.logratio_clamp)
                l_ppo = ppo_loss(ratio, a, rc.clip_eps)
                v = self.critic(batch.obs[idx], self.text_pool[batch.env_index[idx]])
                dv = v - ret[idx]
                l_v = T.mean(dv * dv)
                n_rows = batch.xs_a.shape[2]
                ent = entropy_bonus(T.reshape(sigma, (len(idx), rc.K_steps, 1, -1)) * np.ones((1, 1, n_rows, 1)))
                l_bc = None
                if rc.alpha_bc != 0.0:
                    l_bc = bc_anchor(self.policy, self.frozen, batch.xs_a[idx, -1], batch.xs_s[idx, -1], cond,
                                     cond, hist, self.rng)
                loss = rl_objective(l_ppo, l_v, ent, l_bc, rc.alpha_v, rc.alpha_e, rc.alpha_bc)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(
                        f"non-finite RL loss at iteration {self.iteration}: ppo {l_ppo.item()}, value {l_v.item()}, "
                        f"entropy {ent.item()}, bc {None if l_bc is None else l_bc.item()}")
                self.updates += 1
                self.actor_opt.lr = cosine_restarts(self.updates, rc.actor_lr, rc.lr_cycle)
                self.critic_opt.lr = cosine_restarts(self.updates, rc.critic_lr, rc.lr_cycle)
                self.actor_opt.zero_grad()
                self.critic_opt.zero_grad()
                loss.backward()
                clip_grad_norm(self.actor_params, rc.max_grad_norm)
                clip_grad_norm(self.critic.parameters(), rc.max_grad_norm)
                self.actor_opt.step()
                self.critic_opt.step()
                stats["ppo_loss"].append(l_ppo.item())
                stats["value_loss"].append(l_v.item())
                stats["entropy"].append(ent.item())
                stats["bc_loss"].append(0.0 if l_bc is None else l_bc.item())
                stats["mean_sigma"].append(float(sigma.data.mean()))
        return {k: float(np.mean(v)) for k, v in stats.items()}

    def train_iteration(self) -> IterationStats:
        self.iteration += 1
        batch, adv, ret, info = self.collect()
        upd = self.update(batch, adv, ret)
        return IterationStats(self.iteration, info["mean_reward"], info["r_phys"], info["r_text"], upd["ppo_loss"],
                              upd["value_loss"], upd["entropy"], upd["bc_loss"], upd["mean_sigma"], info["duration"])


# -- evaluation -------------------------------------------------------------------
def episode_rewards(policy: FlowPolicy, aligner: Aligner, env_cfg: E.EnvConfig, texts: list[str],
                    rcfg: RLConfig, seed: int, guidance_w: float = 1.0):
    """Deterministic closed-loop episodes scored with the composite reward (unscaled).

    Returns (composite, phys_sum, text, t_valid) per prompt.
    """
    from .flow import rollout_closed_loop
    rng = np.random.default_rng(seed)
    res = rollout_closed_loop(policy, env_cfg, texts, rcfg.T_max, rcfg.K_steps, guidance_w, rng)
    _, _, _, ref = expert_reference(texts, rcfg.T_max + 1, env_cfg, return_q=True)
    B = len(texts)
    t_end = np.where(res.fallen, np.minimum(res.t_valid + 1, rcfg.T_max), rcfg.T_max)
    sim = E.EnvState(res.q[:, 1:], res.qd[:, 1:])
    ref_s = E.EnvState(ref.q[:, 1:], ref.qd[:, 1:])
    r = phys_reward(sim, ref_s, env_cfg, rcfg.phys_weights, rcfg.phys_scales)     # (B, T_max)
    live = np.arange(1, rcfg.T_max + 1)[None, :] <= t_end[:, None]
    phys = (r * live).sum(1)
    wins = [tail_window(res.states[i], int(t_end[i]), rcfg.text_window) for i in range(B)]
    with T.no_grad():
        cond = policy.encoder(texts)
    pool = cond.c_pool.data.astype(np.float64)
    txt = text_reward(aligner, np.stack([w for w, _ in wins]), np.array([l for _, l in wins]), pool, np.arange(B))
    return rcfg.w_phys * phys + rcfg.w_text * txt, phys, txt, res.t_valid
