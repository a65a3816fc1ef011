"""Rule-based expert demonstration corpus: reference clips, perturbed tracking rollouts, curation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import curation as C
from . import env as E
from .instruction import Vocabulary

ARTIFACTS = ("floating", "penetration", "static", "short")
SHORT_ARTIFACT_FRAMES = 20


def simulate_schedules(schedules: np.ndarray, cfg: E.EnvConfig, rng: np.random.Generator | None = None,
                       sigma: float = 0.0, return_q: bool = False):
    """Roll out commanded joint targets ``schedules`` (B, T, K) from the settled initial state.

    Frame 0 is the initial state; frame t is reached by executing schedules[:, t]
    (plus optional Gaussian perturbation) from frame t - 1. Returns states, sites
    and, with ``return_q``, the generalized coordinates and velocities as an EnvState.
    """
    B, T, _ = schedules.shape
    s0 = E.initial_state(cfg)
    state = E.EnvState(np.tile(s0.q, (B, 1)), np.tile(s0.qd, (B, 1)))
    states = np.zeros((B, T, cfg.d_s))
    sites = np.zeros((B, T, cfg.K + 1, 2))
    qs, qds = np.zeros((B, T, cfg.n_dof)), np.zeros((B, T, cfg.n_dof))
    for t in range(T):
        if t > 0:
            a = schedules[:, t] if rng is None or sigma == 0.0 else C.perturb_action(schedules[:, t], rng, sigma)
            state = E.step(state, a, cfg)
        states[:, t] = E.to_state_vector(state, cfg)
        sites[:, t] = E.forward_kinematics(state, cfg)
        qs[:, t], qds[:, t] = state.q, state.qd
    if return_q:
        return states, sites, E.EnvState(qs, qds)
    return states, sites


def expert_reference(texts: list[str], T: int, cfg: E.EnvConfig, return_q: bool = False):
    """Unperturbed expert rollouts: (schedules, states, sites[, EnvState]) per instruction text."""
    sched = np.stack([E.expert_schedule(t, T, cfg) for t in texts])
    return (sched,) + simulate_schedules(sched, cfg, return_q=return_q)


def apply_artifact(sites: np.ndarray, kind: str) -> np.ndarray:
    """Corrupt a (T, J, 2) reference clip the way bad capture data tends to be corrupted."""
    out = sites.copy()
    T = len(out)
    if kind == "floating":
        out[..., 1] += 0.5 - out[..., 1].min()
    elif kind == "penetration":
        out[..., 1] -= np.linspace(0.0, 0.3, T)[:, None]
    elif kind == "static":
        out[:] = out[:1]
    elif kind == "short":
        out = out[:SHORT_ARTIFACT_FRAMES]
    else:
        raise ValueError(f"unknown artifact {kind!r}; expected one of {ARTIFACTS}")
    return out


@dataclass
class Corpus:
    states: np.ndarray          # (N, T, d_s) perturbed tracking rollouts
    actions: np.ndarray         # (N, T, d_a) clean commanded targets
    sites: np.ndarray           # (N, T, K+1, 2)
    ref_sites: np.ndarray       # (N, T, K+1, 2) reference clips, possibly corrupted
    ref_length: np.ndarray      # (N,) valid frames of each reference clip
    instruction: np.ndarray     # (N,)
    artifact: np.ndarray        # (N,) index into ARTIFACTS, -1 for clean

    def __len__(self) -> int:
        return len(self.instruction)

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(vars(self))


def generate_corpus(vocab: Vocabulary, cfg: E.EnvConfig, repeats: int, T: int, rng: np.random.Generator,
                    sigma: float = 0.01, corrupt_fraction: float = 0.0) -> Corpus:
    """M instructions times ``repeats`` perturbed rollouts, ordered instruction-major."""
    texts = [i.text for i in vocab.instructions()]
    M = len(texts)
    N = M * repeats
    K1 = cfg.K + 1
    if N == 0:
        z = np.zeros
        return Corpus(z((0, T, cfg.d_s)), z((0, T, cfg.d_a)), z((0, T, K1, 2)), z((0, T, K1, 2)),
                      z(0, np.int64), z(0, np.int64), z(0, np.int64))
    sched, _, ref_sites = expert_reference(texts, T, cfg)
    inst = np.repeat(np.arange(M), repeats)
    actions = sched[inst]
    states, sites = simulate_schedules(actions, cfg, rng, sigma)
    artifact = np.full(N, -1, dtype=np.int64)
    n_bad = int(round(corrupt_fraction * N))
    bad = np.sort(rng.choice(N, size=n_bad, replace=False)) if n_bad else np.zeros(0, dtype=np.int64)
    artifact[bad] = np.arange(n_bad) % len(ARTIFACTS)
    refs = ref_sites[inst].copy()
    lengths = np.full(N, T, dtype=np.int64)
    for n in bad:
        clip = apply_artifact(refs[n], ARTIFACTS[artifact[n]])
        lengths[n] = len(clip)
        refs[n, :len(clip)] = clip
        refs[n, len(clip):] = clip[-1]
    return Corpus(states, actions, sites, refs, lengths, inst, artifact)


@dataclass
class CurationResult:
    kept: np.ndarray       # (N,) bool
    reason: list           # per trajectory: a filter Reason value, "gate" or "ok"
    mpjpe: np.ndarray
    jerk: np.ndarray
    split: np.ndarray      # (N,) "train" / "val" / "test" / "" for rejected


def curate_corpus(corpus: Corpus, fps: float, rng: np.random.Generator, ratios=(0.8, 0.1, 0.1)) -> CurationResult:
    """Kinematic filter on reference clips, then the tracking gate, then a seeded split of survivors."""
    N = len(corpus)
    kept = np.zeros(N, dtype=bool)
    reasons, mpjpe, jerk = [], np.full(N, np.nan), np.full(N, np.nan)
    for n in range(N):
        ref = C.MotionClip.from_planar(corpus.ref_sites[n, :corpus.ref_length[n]], fps)
        ok, why = C.filter_kinematic(ref)
        if not ok:
            reasons.append(why.value)
            continue
        roll = C.MotionClip.from_planar(corpus.sites[n], fps)
        mpjpe[n] = C.rollout_mpjpe(ref, roll)
        jerk[n] = C.rollout_jerk(roll)
        if C.passes_gate(mpjpe[n], jerk[n]):
            kept[n] = True
            reasons.append(C.Reason.OK.value)
        else:
            reasons.append("gate")
    split = np.full(N, "", dtype=object)
    idx = np.flatnonzero(kept)
    if len(idx):
        split[idx] = C.split_assignment(len(idx), rng, ratios)
    return CurationResult(kept, reasons, mpjpe, jerk, split)


def corpus_windows(corpus: Corpus, ids: np.ndarray, L_max: int, H: int, stride: int):
    """Stacked windows over trajectories ``ids``: history, target states, target actions, instruction, trajectory."""
    hs, ts, ta, ii, tt = [], [], [], [], []
    for n in ids:
        traj = C.TrackedTrajectory(corpus.states[n], corpus.actions[n], corpus.sites[n], int(corpus.instruction[n]))
        h, s, a = C.window_arrays(traj, L_max, H, stride)
        hs.append(h), ts.append(s), ta.append(a)
        ii.append(np.full(len(h), traj.instruction_id)), tt.append(np.full(len(h), n))
    if not hs:
        d_s, d_a = corpus.states.shape[-1], corpus.actions.shape[-1]
        return (np.zeros((0, L_max, d_s)), np.zeros((0, H, d_s)), np.zeros((0, H, d_a)),
                np.zeros(0, np.int64), np.zeros(0, np.int64))
    return (np.concatenate(hs), np.concatenate(ts), np.concatenate(ta), np.concatenate(ii), np.concatenate(tt))
