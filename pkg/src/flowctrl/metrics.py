"""Retrieval, distribution and physical-plausibility metrics for generated motion."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .curation import third_difference

FLOAT_TOL = 0.005
FID_JITTER = 1e-6
NEG_EIG_TOL = 1e-8


def _top_k_hits(sim: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -sim keeps the lower index first among ties
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return (order == np.arange(len(sim))[:, None]).any(axis=1)


def r_precision(z_s: np.ndarray, z_t: np.ndarray, k: int) -> float:
    """Fraction of rows whose paired text ranks in the top k by dot product."""
    B = len(z_s)
    if B < k:
        raise ValueError(f"R@{k} needs a batch of at least {k}, got {B}")
    return float(_top_k_hits(z_s @ z_t.T, k).mean())


def r_precision_batched(z_s: np.ndarray, z_t: np.ndarray, ks=(1, 2, 3), batch: int = 32) -> dict[int, float]:
    """R@k averaged over consecutive full batches; a trailing partial batch is dropped unless it is the only one."""
    n = len(z_s)
    starts = list(range(0, n - batch + 1, batch)) or [0]
    out = {}
    for k in ks:
        vals = [r_precision(z_s[s:s + batch], z_t[s:s + batch], k) for s in starts]
        out[k] = float(np.mean(vals))
    return out


def mm_dist(z_s: np.ndarray, z_t: np.ndarray) -> float:
    return float(np.linalg.norm(z_s - z_t, axis=-1).mean())


def _gaussian(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        raise ValueError(f"FID needs at least 2 samples, got {len(x)}")
    return x.mean(0), np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])


def trace_sqrt_product(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
    """Tr((A B)^{1/2}) for PSD A, B via the symmetric form A^{1/2} B A^{1/2}."""
    w, V = np.linalg.eigh(sig_a)
    if w.min() < -NEG_EIG_TOL:
        raise ValueError(f"covariance is not PSD: eigenvalue {w.min():.3e}")
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    inner = root @ sig_b @ root
    ev = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if ev.min() < -NEG_EIG_TOL:
        raise ValueError(f"covariance product is not PSD: eigenvalue {ev.min():.3e}")
    return float(np.sqrt(np.clip(ev, 0.0, None)).sum())


def fid(gen: np.ndarray, ref: np.ndarray, jitter: float = FID_JITTER) -> float:
    mu_g, sg = _gaussian(gen)
    mu_r, sr = _gaussian(ref)
    eye = jitter * np.eye(len(mu_g))
    sg, sr = sg + eye, sr + eye
    return float(((mu_g - mu_r) ** 2).sum() + np.trace(sg) + np.trace(sr) - 2.0 * trace_sqrt_product(sg, sr))


def floating(heights: np.ndarray, tol: float = FLOAT_TOL) -> float:
    """Mean clearance of the lowest site above ``tol``, in mm.

    ``heights`` is (T, J) vertical site coordinates or (T, J, D) positions with z last.
    """
    z = np.asarray(heights, dtype=np.float64)
    if z.ndim == 3:
        z = z[..., -1]
    return float(1e3 * np.maximum(z.min(axis=1) - tol, 0.0).mean())


def jerk_eval(sites: np.ndarray) -> float:
    """Frame-based jerk: mean third-difference norm in mm/frame^3."""
    p = np.asarray(sites, dtype=np.float64)
    if len(p) < 4:
        raise ValueError(f"jerk needs at least 4 frames, got {len(p)}")
    return float(1e3 * np.linalg.norm(third_difference(p), axis=-1).mean())


def duration(rollouts) -> float:
    """Total valid frames over total reference frames for (T_valid, T_ref) pairs."""
    pairs = np.asarray(list(rollouts), dtype=np.float64).reshape(-1, 2)
    total = pairs[:, 1].sum()
    if total <= 0:
        raise ValueError("duration needs a positive total reference length")
    if np.any(pairs[:, 0] > pairs[:, 1]):
        raise ValueError("T_valid exceeds T_ref")
    return float(pairs[:, 0].sum() / total)


@dataclass
class EvalReport:
    r1: float
    r2: float
    r3: float
    mm_dist: float
    fid: float
    floating: float
    jerk: float
    duration: float

    def __post_init__(self):
        # R@k is NaN when no batch holds k distinct instructions; the defined prefix must be ordered
        rk = [r for r in (self.r1, self.r2, self.r3) if not math.isnan(r)]
        if rk != sorted(rk) or any(r > 1.0 for r in rk):
            raise ValueError(f"R@k must be non-decreasing and <= 1: {self.r1}, {self.r2}, {self.r3}")
        if self.duration > 1.0:
            raise ValueError(f"duration {self.duration} exceeds 1")

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(**{f.name: float(kv[f.name]) for f in fields(cls)})

    def write(self, txt_path, csv_path=None) -> None:
        Path(txt_path).write_text(self.to_text())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=[f.name for f in fields(self)])
                w.writeheader()
                w.writerow({k: repr(v) for k, v in asdict(self).items()})
