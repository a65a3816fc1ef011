"""Three-stream diffusion transformer over action, state and text tokens.

Each block runs AdaLN-modulated joint self-attention over the concatenated
streams, then lets the action and state streams cross-attend first to sparsely
sampled distant history and then to dense recent history, and finishes with a
per-stream gated SwiGLU MLP. All gates start at zero, so a fresh block is the
identity and a fresh model predicts zero velocity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .instruction import InstructionCondition
from .nn import Linear, Module, RMSNorm
from .tensor import Tensor

STREAMS = ("a", "s", "c")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    H: int = 4
    L_max: int = 48
    N_s: int = 8
    N_l: int = 8
    alpha: float = 3.0
    d_s: int = 23
    d_a: int = 4
    d_pool: int = 64
    d_txt: int = 64
    n_txt: int = 3
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(f"d_model ({self.d_model}) must equal n_heads * d_head "
                             f"({self.n_heads} * {self.d_head})")
        if self.H < 1:
            raise ValueError(f"H must be >= 1, got {self.H}")
        if self.N_s < 0 or self.N_l < 0 or self.N_s + self.N_l > self.L_max:
            raise ValueError(f"need 0 <= N_s, N_l and N_s + N_l <= L_max; got {self.N_s}, {self.N_l}, {self.L_max}")
        if self.N_l > 0 and self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.d_model))

    @property
    def L_distant(self) -> int:
        return self.L_max - self.N_s

    def to_dict(self) -> dict:
        return asdict(self)


# full-size variants (parameter counts only, never trained)
VARIANTS = {
    "base": dict(n_layers=8, d_model=512, n_heads=4, d_head=128),
    "large": dict(n_layers=10, d_model=768, n_heads=6, d_head=128),
    "huge": dict(n_layers=12, d_model=1024, n_heads=8, d_head=128),
}


def variant_config(name: str, **kw) -> ModelConfig:
    base = dict(d_s=358, d_a=69, d_pool=1280, d_txt=1280, n_txt=77, L_max=154)
    base.update(VARIANTS[name])
    base.update(kw)
    return ModelConfig(**base)


# -- history sampling ------------------------------------------------------
def history_index_law(u, L_distant: int, alpha: float) -> np.ndarray:
    """Inverse-CDF map from uniforms to distant indices, before clamping."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    u = np.asarray(u, dtype=np.float64)
    return np.floor(L_distant * (1.0 + np.log(1.0 - u * (1.0 - math.exp(-alpha))) / alpha)).astype(np.int64)


def history_index_pmf(L_distant: int, alpha: float) -> np.ndarray:
    """Probability of each clamped index 0..L_distant-1 implied by the inverse CDF."""
    i = np.arange(L_distant + 1, dtype=np.float64)
    cdf_edge = (np.exp(-alpha * (1.0 - i / L_distant)) - math.exp(-alpha)) / (1.0 - math.exp(-alpha))
    # index i collects u with L(1 + ln(.)/alpha) in [i, i+1); u is decreasing in the index
    pmf = np.diff(cdf_edge)
    return pmf / pmf.sum()


def sample_history_indices(L_max: int, N_s: int, N_l: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted, distinct distant-history indices in [0, L_max - N_s)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    L = L_max - N_s
    if L <= 0:
        raise ValueError(f"no distant history: L_max={L_max}, N_s={N_s}")
    if N_l > L:
        raise ValueError(f"cannot draw {N_l} distinct indices from {L} frames")
    idx = np.clip(history_index_law(rng.random(N_l), L, alpha), 0, L - 1)
    chosen = np.unique(idx)
    while chosen.size < N_l:
        extra = np.clip(history_index_law(rng.random(N_l - chosen.size), L, alpha), 0, L - 1)
        chosen = np.unique(np.concatenate([chosen, extra]))
    return np.sort(chosen)


@dataclass
class HistorySample:
    """Raw history states and their temporal offsets (1 = most recent frame)."""

    dist_states: np.ndarray   # (B, N_l, d_s)
    dist_offsets: np.ndarray  # (B, N_l)
    rec_states: np.ndarray    # (B, N_s, d_s)
    rec_offsets: np.ndarray   # (B, N_s)

    def take(self, idx) -> "HistorySample":
        return HistorySample(self.dist_states[idx], self.dist_offsets[idx], self.rec_states[idx],
                             self.rec_offsets[idx])


def make_history(buffer: np.ndarray, cfg: ModelConfig, rng: np.random.Generator) -> HistorySample:
    """Split a (B, L_max, d_s) buffer (oldest first) into recent and sampled distant history."""
    B, L, _ = buffer.shape
    if L != cfg.L_max:
        raise ValueError(f"history buffer length {L} does not match L_max={cfg.L_max}")
    rec = buffer[:, L - cfg.N_s:]
    rec_off = np.broadcast_to(np.arange(cfg.N_s, 0, -1), (B, cfg.N_s)).astype(np.float64)
    if cfg.N_l == 0:
        dist = buffer[:, :0]
        dist_off = np.zeros((B, 0))
    else:
        idx = np.stack([sample_history_indices(cfg.L_max, cfg.N_s, cfg.N_l, cfg.alpha, rng) for _ in range(B)])
        dist = np.take_along_axis(buffer, idx[..., None], axis=1)
        dist_off = (L - idx).astype(np.float64)
    return HistorySample(dist, dist_off, rec, rec_off.copy())


# -- building blocks ---------------------------------------------------------
def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return T.layer_norm(x) * (scale + 1.0) + shift


def _chunks(x: Tensor, n: int) -> list[Tensor]:
    d = x.shape[-1] // n
    return [t for t in T.split(x, [d] * n, axis=-1)]


def _heads(x: Tensor, n_heads: int) -> Tensor:
    return nn.split_heads(x, n_heads)


class SwiGLU(Module):
    def __init__(self, d: int, hidden: int, rng):
        self.w1 = Linear(d, hidden, rng)
        self.w3 = Linear(d, hidden, rng)
        self.w2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(T.silu(self.w1(x)) * self.w3(x))


class StreamLayer(Module):
    """Per-stream modulation, projections, QK norms and MLP of one block."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.mod = Linear(d, 6 * d, rng, zero=True)
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)
        self.q_norm = RMSNorm(cfg.d_head)
        self.k_norm = RMSNorm(cfg.d_head)
        self.mlp = SwiGLU(d, cfg.mlp_hidden, rng)


class CrossLayer(Module):
    """One history cross-attention sublayer for one query stream."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.mod = Linear(d, 3 * d, rng, zero=True)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.q_norm = RMSNorm(cfg.d_head)
        self.k_norm = RMSNorm(cfg.d_head)


def cross_attention(layer: CrossLayer, x: Tensor, hist: Tensor, e: Tensor, n_heads: int) -> Tensor:
    """Gated residual cross-attention of stream ``x`` onto history tokens ``hist``."""
    shift, scale, gate = _chunks(layer.mod(T.silu(e)), 3)
    h = modulate(x, T.reshape(shift, (shift.shape[0], 1, -1)), T.reshape(scale, (scale.shape[0], 1, -1)))
    q = layer.q_norm(_heads(layer.q(h), n_heads))
    k = layer.k_norm(_heads(layer.k(hist), n_heads))
    v = _heads(layer.v(hist), n_heads)
    att = nn.merge_heads(nn.attention(q, k, v))
    return x + T.reshape(gate, (gate.shape[0], 1, -1)) * layer.out(att)


class JointBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.a = StreamLayer(cfg, rng)
        self.s = StreamLayer(cfg, rng)
        self.c = StreamLayer(cfg, rng)
        self.dist_a = CrossLayer(cfg, rng)
        self.dist_s = CrossLayer(cfg, rng)
        self.rec_a = CrossLayer(cfg, rng)
        self.rec_s = CrossLayer(cfg, rng)

    def joint_attention(self, xs: dict, mods: dict, text_mask: np.ndarray) -> dict:
        cfg = self.cfg
        qs, ks, vs, sizes = [], [], [], []
        for name in STREAMS:
            layer = getattr(self, name)
            shift, scale = mods[name][0], mods[name][1]
            h = modulate(xs[name], shift, scale)
            q, k, v = _chunks(layer.qkv(h), 3)
            qs.append(layer.q_norm(_heads(q, cfg.n_heads)))
            ks.append(layer.k_norm(_heads(k, cfg.n_heads)))
            vs.append(_heads(v, cfg.n_heads))
            sizes.append(xs[name].shape[1])
        B = text_mask.shape[0]
        key_mask = np.concatenate([np.ones((B, sizes[0] + sizes[1]), dtype=bool), text_mask], axis=1)
        att = nn.attention(T.concat(qs, axis=2), T.concat(ks, axis=2), T.concat(vs, axis=2), key_mask)
        parts = T.split(nn.merge_heads(att), sizes, axis=1)
        out = {}
        for name, part in zip(STREAMS, parts):
            gate = mods[name][2]
            out[name] = xs[name] + gate * getattr(self, name).out(part)
        return out

    def __call__(self, xs: dict, e: Tensor, text_mask: np.ndarray, h_dist: Tensor | None,
                 h_rec: Tensor | None) -> dict:
        cfg = self.cfg
        B = e.shape[0]
        mods = {}
        for name in STREAMS:
            chunks = _chunks(getattr(self, name).mod(T.silu(e)), 6)
            mods[name] = [T.reshape(c, (B, 1, cfg.d_model)) for c in chunks]
        xs = self.joint_attention(xs, mods, text_mask)
        if h_dist is not None:
            xs["a"] = cross_attention(self.dist_a, xs["a"], h_dist, e, cfg.n_heads)
            xs["s"] = cross_attention(self.dist_s, xs["s"], h_dist, e, cfg.n_heads)
        if h_rec is not None:
            xs["a"] = cross_attention(self.rec_a, xs["a"], h_rec, e, cfg.n_heads)
            xs["s"] = cross_attention(self.rec_s, xs["s"], h_rec, e, cfg.n_heads)
        for name in STREAMS:
            shift, scale, gate = mods[name][3:]
            layer = getattr(self, name)
            xs[name] = xs[name] + gate * layer.mlp(modulate(xs[name], shift, scale))
        return xs


class JASTDiT(Module):
    """Velocity field v(x_tau, tau | instruction, history) over (H, d_a) actions and (H, d_s) states."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.action_in = Linear(cfg.d_a, d, rng)
        self.state_in = Linear(cfg.d_s, d, rng)
        self.text_in = Linear(cfg.d_txt, d, rng)
        self.hist_in = Linear(cfg.d_s, d, rng)
        self.time_mlp1 = Linear(d, d, rng)
        self.time_mlp2 = Linear(d, d, rng)
        self.pool_in = Linear(cfg.d_pool, d, rng)
        self.blocks = [JointBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_a = Linear(d, 2 * d, rng, zero=True)
        self.final_s = Linear(d, 2 * d, rng, zero=True)
        self.head_a = Linear(d, cfg.d_a, rng, zero=True)
        self.head_s = Linear(d, cfg.d_s, rng, zero=True)
        self.assign_names("jast.")

    def condition(self, tau, c_pool: Tensor) -> Tensor:
        """Global condition e from flow time and the pooled instruction feature."""
        d = self.cfg.d_model
        tau = np.asarray(tau, dtype=np.float64).reshape(-1)
        freq = Tensor(nn.sinusoidal_embedding(1000.0 * tau, d), dtype=c_pool.dtype)
        return self.time_mlp2(T.silu(self.time_mlp1(freq))) + self.pool_in(c_pool)

    def embed(self, x_a: Tensor, x_s: Tensor, cond: InstructionCondition) -> dict:
        cfg, d = self.cfg, self.cfg.d_model
        dtype = x_a.dtype
        pos_chunk = nn.sinusoidal_embedding(np.arange(cfg.H), d).astype(dtype)
        pos_txt = nn.sinusoidal_embedding(np.arange(cond.c_txt.shape[1]), d).astype(dtype)
        return {
            "a": self.action_in(x_a) + pos_chunk,
            "s": self.state_in(x_s) + pos_chunk,
            "c": self.text_in(cond.c_txt) + pos_txt,
        }

    def embed_history(self, states: np.ndarray, offsets: np.ndarray, dtype) -> Tensor | None:
        if states.shape[1] == 0:
            return None
        pos = nn.sinusoidal_embedding(offsets, self.cfg.d_model).astype(dtype)
        return self.hist_in(Tensor(states, dtype=dtype)) + pos

    def __call__(self, x_a, x_s, tau, cond: InstructionCondition, hist: HistorySample):
        cfg = self.cfg
        x_a = T.as_tensor(x_a)
        x_s = T.as_tensor(x_s)
        B = x_a.shape[0]
        if x_a.shape[1:] != (cfg.H, cfg.d_a) or x_s.shape != (B, cfg.H, cfg.d_s):
            raise ValueError(f"chunk shapes {x_a.shape} and {x_s.shape} do not match "
                             f"(B, {cfg.H}, {cfg.d_a}) and (B, {cfg.H}, {cfg.d_s})")
        if len(cond) != B or hist.rec_states.shape[0] != B:
            raise ValueError(f"batch sizes differ: chunk {B}, condition {len(cond)}, "
                             f"history {hist.rec_states.shape[0]}")
        e = self.condition(np.broadcast_to(np.asarray(tau, dtype=np.float64), (B,)), cond.c_pool)
        xs = self.embed(x_a, x_s, cond)
        h_dist = self.embed_history(hist.dist_states, hist.dist_offsets, x_a.dtype)
        h_rec = self.embed_history(hist.rec_states, hist.rec_offsets, x_a.dtype)
        for block in self.blocks:
            xs = block(xs, e, cond.padding_mask, h_dist, h_rec)
        return self.project(xs, e)

    def project(self, xs: dict, e: Tensor):
        B, d = e.shape
        out = []
        for final, head, name in ((self.final_a, self.head_a, "a"), (self.final_s, self.head_s, "s")):
            shift, scale = _chunks(final(T.silu(e)), 2)
            h = modulate(xs[name], T.reshape(shift, (B, 1, d)), T.reshape(scale, (B, 1, d)))
            out.append(head(h))
        return out[0], out[1]


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Named parameter shapes of ``JASTDiT(cfg)`` computed without allocating weights."""
    d, dh, hid = cfg.d_model, cfg.d_head, cfg.mlp_hidden
    shapes: dict[str, tuple] = {}

    def lin(name, i, o, bias=True):
        shapes[f"{name}.weight"] = (i, o)
        if bias:
            shapes[f"{name}.bias"] = (o,)

    p = ""
    lin(p + "action_in", cfg.d_a, d)
    lin(p + "state_in", cfg.d_s, d)
    lin(p + "text_in", cfg.d_txt, d)
    lin(p + "hist_in", cfg.d_s, d)
    lin(p + "time_mlp1", d, d)
    lin(p + "time_mlp2", d, d)
    lin(p + "pool_in", cfg.d_pool, d)
    for b in range(cfg.n_layers):
        q = f"{p}blocks.{b}."
        for s in STREAMS:
            lin(q + f"{s}.mod", d, 6 * d)
            lin(q + f"{s}.qkv", d, 3 * d)
            lin(q + f"{s}.out", d, d)
            shapes[q + f"{s}.q_norm.weight"] = (dh,)
            shapes[q + f"{s}.k_norm.weight"] = (dh,)
            lin(q + f"{s}.mlp.w1", d, hid)
            lin(q + f"{s}.mlp.w3", d, hid)
            lin(q + f"{s}.mlp.w2", hid, d)
        for x in ("dist_a", "dist_s", "rec_a", "rec_s"):
            lin(q + f"{x}.mod", d, 3 * d)
            for n in ("q", "k", "v", "out"):
                lin(q + f"{x}.{n}", d, d)
            shapes[q + f"{x}.q_norm.weight"] = (dh,)
            shapes[q + f"{x}.k_norm.weight"] = (dh,)
    lin(p + "final_a", d, 2 * d)
    lin(p + "final_s", d, 2 * d)
    lin(p + "head_a", d, cfg.d_a)
    lin(p + "head_s", d, cfg.d_s)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))
