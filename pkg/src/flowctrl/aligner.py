"""Two-tower contrastive model that scores how well a state sequence matches an instruction."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .optim import AdamW, warmup_cosine
from .tensor import Parameter, Tensor

INIT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class AlignerConfig:
    d_z: int = 32
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    dropout: float = 0.1
    max_len: int = 128
    min_len: int = 32
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_floor: float = 1e-7

    def __post_init__(self):
        if self.d_z <= 0 or self.hidden <= 0 or self.n_layers < 0:
            raise ValueError("aligner sizes must be positive")
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden {self.hidden} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")

    def to_dict(self) -> dict:
        return asdict(self)


class MinMaxNormalizer:
    """Per-dimension affine map of the observed [min, max] onto [-1, 1]; constant dims map to 0."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)

    @classmethod
    def fit(cls, states: np.ndarray) -> "MinMaxNormalizer":
        flat = states.reshape(-1, states.shape[-1])
        return cls(flat.min(0), flat.max(0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        span = self.hi - self.lo
        safe = np.where(span > 1e-12, span, 1.0)
        return np.where(span > 1e-12, 2.0 * (x - self.lo) / safe - 1.0, 0.0)


class EncoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, p: float, rng: np.random.Generator):
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d, rng)
        self.out = nn.Linear(d, d, rng)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, 4 * d, rng)
        self.fc2 = nn.Linear(4 * d, d, rng)
        self.drop = nn.Dropout(p, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        q, k, v = T.split(self.qkv(self.ln1(x)), [x.shape[-1]] * 3, axis=-1)
        h = nn.attention(*(nn.split_heads(t, self.n_heads) for t in (q, k, v)), key_mask=mask)
        x = x + self.drop(self.out(nn.merge_heads(h)))
        return x + self.drop(self.fc2(T.gelu(self.fc1(self.ln2(x)))))


def _unit(x: Tensor) -> Tensor:
    return x / T.sqrt(T.tsum(x * x, axis=-1, keepdims=True) + 1e-12)


class Aligner(nn.Module):
    """State tower: lift, query token, sinusoidal positions, encoder, projection. Text tower: linear."""

    def __init__(self, cfg: AlignerConfig, d_s: int, d_pool: int, rng: np.random.Generator,
                 normalizer: MinMaxNormalizer | None = None):
        self.cfg = cfg
        self.lift = nn.Linear(d_s, cfg.hidden, rng)
        self.query = Parameter(rng.normal(0.0, 0.02, size=(cfg.hidden,)), dtype=T.get_default_dtype())
        self.layers = [EncoderLayer(cfg.hidden, cfg.n_heads, cfg.dropout, rng) for _ in range(cfg.n_layers)]
        self.ln_f = nn.LayerNorm(cfg.hidden)
        self.state_proj = nn.Linear(cfg.hidden, cfg.d_z, rng)
        self.text_proj = nn.Linear(d_pool, cfg.d_z, rng)
        self.log_gamma = Parameter(np.array(math.log(1.0 / INIT_TEMPERATURE)), dtype=T.get_default_dtype())
        self.normalizer = normalizer or MinMaxNormalizer(np.zeros(d_s), np.ones(d_s))
        self.d_s = d_s

    @property
    def gamma(self) -> Tensor:
        return T.exp(self.log_gamma)

    def encode_states(self, seqs: np.ndarray, lengths: np.ndarray | None = None) -> Tensor:
        """Unit embeddings for (B, T, d_s) raw state sequences; ``lengths`` marks right-padding."""
        seqs = np.asarray(seqs)
        if seqs.ndim == 2:
            seqs = seqs[None]
        B, L, _ = seqs.shape
        if L == 0:
            raise ValueError("cannot encode an empty state sequence")
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        lengths = np.full(B, L) if lengths is None else np.asarray(lengths)
        if np.any(lengths < 1):
            raise ValueError("cannot encode an empty state sequence")
        dtype = T.get_default_dtype()
        x = self.lift(Tensor(self.normalizer(seqs).astype(dtype)))
        q = T.reshape(self.query, (1, 1, self.cfg.hidden)) * np.ones((B, 1, 1), dtype=dtype)
        x = T.concat([q, x], axis=1) + nn.sinusoidal_embedding(np.arange(L + 1), self.cfg.hidden)
        mask = np.arange(L + 1)[None, :] <= lengths[:, None]
        for layer in self.layers:
            x = layer(x, mask)
        return _unit(self.state_proj(self.ln_f(x[:, 0])))

    def encode_text(self, c_pool) -> Tensor:
        return _unit(self.text_proj(T.as_tensor(c_pool)))


def similarity_matrix(z_s, z_t, gamma) -> Tensor:
    return T.matmul(T.as_tensor(z_s), T.as_tensor(z_t).T) * gamma


def infonce_loss(S) -> Tensor:
    S = T.as_tensor(S)
    B = S.shape[0]
    eye = np.eye(B, dtype=S.dtype)
    rows = -T.tsum(T.log_softmax(S, axis=1) * eye) * (1.0 / B)
    cols = -T.tsum(T.log_softmax(S, axis=0) * eye) * (1.0 / B)
    return (rows + cols) * 0.5


def random_crops(states: np.ndarray, rng: np.random.Generator, min_len: int, max_len: int):
    """One crop per trajectory, right-padded to max_len. Returns (crops, lengths)."""
    N, T_traj, d = states.shape
    out = np.zeros((N, max_len, d))
    lengths = rng.integers(min(min_len, T_traj), min(max_len, T_traj) + 1, size=N)
    for n in range(N):
        start = rng.integers(0, T_traj - lengths[n] + 1)
        out[n, :lengths[n]] = states[n, start:start + lengths[n]]
        out[n, lengths[n]:] = out[n, lengths[n] - 1]
    return out, lengths


def tail_window(states: np.ndarray, t_end: int | None, max_len: int) -> tuple[np.ndarray, int]:
    """The last ``max_len`` frames ending at ``t_end`` (inclusive), right-padded."""
    t_end = len(states) - 1 if t_end is None else t_end
    seg = states[max(0, t_end + 1 - max_len):t_end + 1]
    out = np.zeros((max_len,) + states.shape[1:])
    out[:len(seg)] = seg
    out[len(seg):] = seg[-1]
    return out, len(seg)


def train_aligner(aligner: Aligner, states: np.ndarray, labels: np.ndarray, text_pool: np.ndarray,
                  rng: np.random.Generator, log=None) -> list[float]:
    """Symmetric InfoNCE on random crops. Batches never repeat an instruction, so the identity pairing holds.

    ``states`` (N, T, d_s) are raw training trajectories with instruction ids ``labels``;
    ``text_pool`` (M, d_pool) are the fixed pooled instruction features.
    """
    cfg = aligner.cfg
    aligner.normalizer = MinMaxNormalizer.fit(states)
    params = aligner.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    aligner.train()
    # an epoch is one pass over every trajectory; batches can be smaller than batch_size when
    # there are fewer distinct instructions, so the step count comes from the actual packing
    epochs = [distinct_batches(labels, cfg.batch_size, rng) for _ in range(cfg.epochs)]
    total = sum(len(b) for b in epochs)
    losses, step = [], 0
    for epoch, batches in enumerate(epochs):
        epoch_loss = []
        for batch in batches:
            step += 1
            opt.lr = warmup_cosine(step, cfg.lr, 0, total, cfg.lr_floor)
            crops, lengths = random_crops(states[batch], rng, cfg.min_len, cfg.max_len)
            opt.zero_grad()
            z_s = aligner.encode_states(crops, lengths)
            z_t = aligner.encode_text(text_pool[labels[batch]])
            loss = infonce_loss(similarity_matrix(z_s, z_t, aligner.gamma))
            loss.backward()
            opt.step()
            epoch_loss.append(loss.item())
        losses.append(float(np.mean(epoch_loss)))
        if log:
            log({"epoch": epoch + 1, "loss": losses[-1], "lr": opt.lr, "gamma": float(aligner.gamma.item())})
    aligner.eval()
    aligner.requires_grad_(False)
    return losses


def distinct_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator, min_size: int = 2):
    """Shuffle and greedily pack indices into batches where no label repeats."""
    batches: list[list[int]] = []
    seen: list[set] = []
    for i in rng.permutation(len(labels)):
        for b, s in zip(batches, seen):
            if len(b) < batch_size and labels[i] not in s:
                b.append(int(i))
                s.add(labels[i])
                break
        else:
            batches.append([int(i)])
            seen.append({labels[i]})
    return [np.array(b) for b in batches if len(b) >= min_size]
