"""Templated instructions and their trainable embedding.

An instruction is ``"<verb> <body_part> <speed>"``. Each word owns a row in a
per-slot embedding table; the token features are those rows and the pooled
feature is an affine map of their mean. The empty string maps to a separate
learned null vector used for classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Parameter, Tensor

DEFAULT_VERBS = ("swing", "wave", "tap", "bend")
DEFAULT_BODY_PARTS = ("arm", "leg")
DEFAULT_SPEEDS = ("slow", "fast")

HOLD = "hold still"


@dataclass(frozen=True)
class Instruction:
    verb: str
    body_part: str
    speed: str

    @property
    def text(self) -> str:
        return f"{self.verb} {self.body_part} {self.speed}"


@dataclass
class Vocabulary:
    verbs: tuple = DEFAULT_VERBS
    body_parts: tuple = DEFAULT_BODY_PARTS
    speeds: tuple = DEFAULT_SPEEDS

    def __post_init__(self):
        self.verbs = tuple(self.verbs)
        self.body_parts = tuple(self.body_parts)
        self.speeds = tuple(self.speeds)
        for name, words in (("verbs", self.verbs), ("body_parts", self.body_parts), ("speeds", self.speeds)):
            if not words:
                raise ValueError(f"vocabulary slot {name} is empty")
            if len(set(words)) != len(words):
                raise ValueError(f"vocabulary slot {name} has duplicate words")

    @property
    def M(self) -> int:
        return len(self.verbs) * len(self.body_parts) * len(self.speeds)

    def instructions(self) -> list[Instruction]:
        """All realized instructions in a fixed order (verb-major)."""
        return [Instruction(v, b, s) for v, b, s in product(self.verbs, self.body_parts, self.speeds)]

    def parse(self, text: str) -> Instruction:
        words = text.split()
        if len(words) != 3 or words[0] not in self.verbs or words[1] not in self.body_parts \
                or words[2] not in self.speeds:
            raise ValueError(
                f"cannot parse {text!r}; expected '<verb> <body_part> <speed>' with verb in "
                f"{list(self.verbs)}, body_part in {list(self.body_parts)}, speed in {list(self.speeds)}"
            )
        return Instruction(*words)

    def index(self, instr: Instruction | str) -> int:
        if isinstance(instr, str):
            instr = self.parse(instr)
        return self.instructions().index(instr)

    def token_ids(self, instr: Instruction) -> np.ndarray:
        """Row ids into the concatenated [verbs | body_parts | speeds] table."""
        nv, nb = len(self.verbs), len(self.body_parts)
        return np.array([self.verbs.index(instr.verb),
                         nv + self.body_parts.index(instr.body_part),
                         nv + nb + self.speeds.index(instr.speed)], dtype=np.int64)


@dataclass
class InstructionCondition:
    c_pool: Tensor          # (B, d_pool)
    c_txt: Tensor           # (B, L_txt, d_txt)
    padding_mask: np.ndarray  # (B, L_txt) True where the token is real
    null: np.ndarray = field(default=None)  # (B,) True for the empty instruction

    def __len__(self) -> int:
        return self.c_pool.shape[0]

    def detach(self) -> "InstructionCondition":
        return InstructionCondition(self.c_pool.detach(), self.c_txt.detach(),
                                    self.padding_mask.copy(), self.null.copy())

    def take(self, idx) -> "InstructionCondition":
        idx = np.asarray(idx)
        return InstructionCondition(T.getitem(self.c_pool, idx), T.getitem(self.c_txt, idx),
                                    self.padding_mask[idx], self.null[idx])


class InstructionEncoder(nn.Module):
    """Embedding table plus pooled affine map; ``d_pool`` and ``d_txt`` are configurable."""

    n_tokens = 3

    def __init__(self, vocab: Vocabulary, rng: np.random.Generator, d_txt: int = 64, d_pool: int = 64,
                 init_std: float = 1.0):
        self.vocab = vocab
        self.d_txt = d_txt
        self.d_pool = d_pool
        n_words = len(vocab.verbs) + len(vocab.body_parts) + len(vocab.speeds)
        self.table = Parameter(rng.normal(0.0, init_std, size=(n_words, d_txt)))
        self.pool = nn.Linear(d_txt, d_pool, rng)
        self.null_pool = Parameter(rng.normal(0.0, init_std, size=(d_pool,)))

    def _ids(self, texts: list[str]) -> tuple[np.ndarray, np.ndarray]:
        ids = np.zeros((len(texts), self.n_tokens), dtype=np.int64)
        null = np.zeros(len(texts), dtype=bool)
        for i, text in enumerate(texts):
            if text == "":
                null[i] = True
            else:
                ids[i] = self.vocab.token_ids(self.vocab.parse(text))
        return ids, null

    def __call__(self, texts: list[str] | str) -> InstructionCondition:
        if isinstance(texts, str):
            texts = [texts]
        ids, null = self._ids(texts)
        tok = T.gather(self.table, ids)                      # (B, 3, d_txt)
        mask = np.repeat(~null[:, None], self.n_tokens, axis=1)
        tok = T.masked_fill(tok, ~mask[..., None], 0.0)
        pooled = self.pool(T.mean(tok, axis=1))
        if null.any():
            null_b = T.reshape(self.null_pool, (1, self.d_pool)) * np.ones((len(texts), 1))
            pooled = T.where(null[:, None], null_b, pooled)
        return InstructionCondition(pooled, tok, mask, null)

    def null_condition(self, batch: int) -> InstructionCondition:
        return self([""] * batch)


def encode(text: str, encoder: InstructionEncoder) -> InstructionCondition:
    """Encode one instruction (or the empty string) into a batch-of-one condition."""
    return encoder([text])


def cfg_dropout(texts: list[str], rng: np.random.Generator, p: float = 0.10) -> list[str]:
    """Replace each instruction with the empty string with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    drop = rng.random(len(texts)) < p
    return ["" if d else t for t, d in zip(texts, drop)]
