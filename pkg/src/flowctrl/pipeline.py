"""Workspace stages: generate, curate, pretrain, train-aligner, rlhr, eval and report.

Each stage reads the files earlier stages wrote, writes only its own files, and
drops a stamp recording the config digest, seed and code version. All randomness
flows from the run seed through per-stage generators, so identical inputs give
identical outputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import zlib
from contextlib import contextmanager
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as K
from . import flow as F
from . import metrics as Mt
from . import rlhr as R
from . import tensor as T
from .aligner import Aligner, MinMaxNormalizer, distinct_batches, random_crops, tail_window, train_aligner
from .config import RunConfig
from .instruction import InstructionEncoder
from .storage import file_digest, read_container, read_window_dataset, write_container, write_window_dataset

log = logging.getLogger("flowctrl")

LAYOUT = {
    "corpus": "data/corpus.bin",
    "manifest": "data/manifest.json",
    "curation": "data/curation.json",
    "train_windows": "data/windows_train.bin",
    "val_windows": "data/windows_val.bin",
    "stage1": "checkpoints/stage1.ckpt",
    "stage1_partial": "checkpoints/stage1.partial",
    "pretrain_log": "logs/pretrain.csv",
    "aligner": "checkpoints/aligner.ckpt",
    "aligner_log": "logs/aligner.csv",
    "aligner_report": "reports/aligner.txt",
    "rlhr": "checkpoints/rlhr.ckpt",
    "rlhr_log": "logs/rlhr.csv",
    "rlhr_report": "reports/rlhr_compare.txt",
    "summary": "reports/summary.txt",
}
CHECKPOINT_EVERY = 1000


class PipelineError(Exception):
    exit_code = 1


class MissingPrerequisite(PipelineError):
    exit_code = 2

    def __init__(self, path, hint: str = ""):
        self.path = Path(path)
        super().__init__(f"missing prerequisite {self.path}" + (f" ({hint})" if hint else ""))


class NumericalFailure(PipelineError):
    exit_code = 3


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / LAYOUT[key]

    def eval_paths(self, policy: str) -> tuple[Path, Path]:
        return self.root / f"reports/eval_{policy}.txt", self.root / f"reports/eval_{policy}.csv"

    def require(self, *keys: str, hint: str = "") -> None:
        for key in keys:
            if not self.path(key).exists():
                raise MissingPrerequisite(self.path(key), hint)

    def ensure_dirs(self) -> None:
        for sub in ("data", "checkpoints", "logs", "reports", "stamps"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)


# -- helpers ----------------------------------------------------------------------
def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]))


def code_version() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_stamp(ws: Workspace, stage: str, cfg: RunConfig, outputs: list[str]) -> dict:
    stamp = {"stage": stage, "config_hash": cfg.digest(), "seed": cfg.seed, "code_version": code_version(),
             "precision": cfg.precision,
             "outputs": {k: file_digest(ws.path(k)) for k in outputs if ws.path(k).exists()}}
    path = ws.root / "stamps" / f"{stage}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")
    return stamp


@contextmanager
def precision(name: str):
    with T.default_dtype(np.float32 if name == "f32" else np.float64):
        yield


@contextmanager
def numerics_guard(stage: str):
    try:
        yield
    except FloatingPointError as exc:
        raise NumericalFailure(f"{stage}: {exc}") from exc
    except ValueError as exc:
        if "NaN" in str(exc) or "non-finite" in str(exc):
            raise NumericalFailure(f"{stage}: {exc}") from exc
        raise


class CsvLog:
    def __init__(self, path: Path, columns: list[str], append: bool = False):
        self.path, self.columns = path, columns
        path.parent.mkdir(parents=True, exist_ok=True)
        if not append or not path.exists():
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(columns)

    def __call__(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in self.columns])


def texts_of(cfg: RunConfig) -> list[str]:
    return [i.text for i in cfg.vocab.build().instructions()]


def load_corpus(ws: Workspace) -> tuple[dict, K.Corpus]:
    meta, arr = read_container(ws.path("corpus"), "corpus")
    return meta, K.Corpus(**{f.name: arr[f.name] for f in fields(K.Corpus)})


def _policy_arrays(policy: F.FlowPolicy, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in policy.state_dict().items()}


def build_policy(cfg: RunConfig, rng: np.random.Generator, normalizer=None) -> F.FlowPolicy:
    enc = InstructionEncoder(cfg.vocab.build(), rng, d_txt=cfg.model.d_txt, d_pool=cfg.model.d_pool)
    return F.FlowPolicy(cfg.model, enc, rng, normalizer)


def load_policy(cfg: RunConfig, path: Path, which: str = "ema") -> F.FlowPolicy:
    meta, arr = read_container(path, "policy")
    nz = F.Normalizer(arr["norm.s_mean"], arr["norm.s_std"], arr["norm.a_mean"], arr["norm.a_std"])
    policy = build_policy(cfg, np.random.default_rng(0), nz)
    prefix = f"{which}."
    policy.load_state_dict({k[len(prefix):]: v for k, v in arr.items() if k.startswith(prefix)})
    return policy


def load_aligner(cfg: RunConfig, ws: Workspace) -> tuple[Aligner, np.ndarray]:
    meta, arr = read_container(ws.path("aligner"), "aligner")
    al = Aligner(cfg.aligner, cfg.env.d_s, cfg.model.d_pool, np.random.default_rng(0),
                 MinMaxNormalizer(arr["norm.lo"], arr["norm.hi"]))
    al.load_state_dict({k[6:]: v for k, v in arr.items() if k.startswith("param.")})
    al.eval()
    al.requires_grad_(False)
    return al, arr["text_pool"].astype(T.get_default_dtype())


# -- stages ---------------------------------------------------------------------
def cmd_generate(cfg: RunConfig, ws: Workspace) -> dict:
    ws.ensure_dirs()
    vocab = cfg.vocab.build()
    texts = texts_of(cfg)
    corpus = K.generate_corpus(vocab, cfg.env, cfg.data.repeats, cfg.data.frames, stage_rng(cfg.seed, "generate"),
                               cfg.data.perturb_sigma, cfg.data.corrupt_fraction)
    if len(corpus) == 0:
        log.warning("data.repeats is 0: writing an empty dataset")
    meta = {"fps": cfg.env.fps, "K": cfg.env.K, "frames": cfg.data.frames, "repeats": cfg.data.repeats,
            "instructions": texts}
    write_container(ws.path("corpus"), "corpus", meta, corpus.arrays())
    entries = [{"id": n, "instruction_id": int(corpus.instruction[n]), "instruction": texts[corpus.instruction[n]],
                "repeat": n % max(cfg.data.repeats, 1),
                "artifact": K.ARTIFACTS[corpus.artifact[n]] if corpus.artifact[n] >= 0 else None}
               for n in range(len(corpus))]
    manifest = {"count": len(corpus), "instructions": texts, "repeats": cfg.data.repeats, "trajectories": entries}
    ws.path("manifest").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return write_stamp(ws, "generate", cfg, ["corpus", "manifest"])


def cmd_curate(cfg: RunConfig, ws: Workspace) -> dict:
    ws.require("corpus", hint="run 'generate' first")
    ws.ensure_dirs()
    meta, corpus = load_corpus(ws)
    res = K.curate_corpus(corpus, meta["fps"], stage_rng(cfg.seed, "curate"), cfg.data.split)
    m = cfg.model
    for key, split in (("train_windows", "train"), ("val_windows", "val")):
        ids = np.flatnonzero(res.split == split)
        h, s, a, ii, tt = K.corpus_windows(corpus, ids, m.L_max, m.H, cfg.data.stride)
        write_window_dataset(ws.path(key), h, s, a, ii, tt, K=cfg.env.K, fps=cfg.env.fps)
    reasons = {r: res.reason.count(r) for r in sorted(set(res.reason))}
    summary = {
        "count": len(corpus), "kept": int(res.kept.sum()), "reasons": reasons,
        "splits": {s: int((res.split == s).sum()) for s in ("train", "val", "test")},
        "trajectories": [{"id": n, "reason": res.reason[n], "split": res.split[n] or None,
                          "mpjpe": None if np.isnan(res.mpjpe[n]) else float(res.mpjpe[n]),
                          "jerk": None if np.isnan(res.jerk[n]) else float(res.jerk[n])} for n in range(len(corpus))],
    }
    ws.path("curation").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return write_stamp(ws, "curate", cfg, ["curation", "train_windows", "val_windows"])


def _window_data(path: Path, texts: list[str]) -> F.WindowData:
    d = read_window_dataset(path)
    return F.WindowData(d["history"], d["target_states"], d["target_actions"], [texts[i] for i in d["instruction"]])


def cmd_pretrain(cfg: RunConfig, ws: Workspace) -> dict:
    ws.require("train_windows", "val_windows", hint="run 'curate' first")
    ws.ensure_dirs()
    texts = texts_of(cfg)
    train = _window_data(ws.path("train_windows"), texts)
    val = _window_data(ws.path("val_windows"), texts)
    if len(train) == 0:
        raise MissingPrerequisite(ws.path("train_windows"), "the training split has no windows")
    tc = cfg.stage1
    with precision(cfg.precision), numerics_guard("pretrain"):
        init_rng = stage_rng(cfg.seed, "pretrain.init")
        nz = F.Normalizer.fit(train.target_states, train.target_actions)
        policy = build_policy(cfg, init_rng, nz)
        rng = stage_rng(cfg.seed, "pretrain.train")
        val_rng = stage_rng(cfg.seed, "pretrain.val")
        params = policy.parameters()
        opt = F.AdamW(params, lr=tc.lr, betas=tc.betas, weight_decay=tc.weight_decay)
        ema = F.EmaState(params, tc.ema_decay, tc.ema_warmup)
        start, val0 = 0, None
        partial = ws.path("stage1_partial")
        if partial.exists():
            meta, arr = read_container(partial, "stage1-partial")
            if meta["config_hash"] == cfg.digest():
                policy.load_state_dict({k[4:]: v for k, v in arr.items() if k.startswith("raw.")})
                opt.load_state_dict({k[4:]: v for k, v in arr.items() if k.startswith("opt.")})
                ema.shadow = [arr[f"ema.{n}"].astype(p.dtype) for n, p in policy.named_parameters()]
                ema.steps = meta["ema_steps"]
                rng.bit_generator.state = meta["rng_state"]
                start, val0 = meta["step"], meta["val0"]
                log.info("resuming pretraining at step %d", start)
        logger = CsvLog(ws.path("pretrain_log"), ["step", "fm_loss", "val_loss", "lr"], append=start > 0)
        state = {"val0": val0}

        def checkpoint(step, opt, ema):
            if step == tc.steps or step % CHECKPOINT_EVERY:
                return
            arrays = {f"raw.{k}": v for k, v in policy.state_dict().items()}
            arrays.update({f"opt.{k}": v for k, v in opt.state_dict().items()})
            arrays.update({f"ema.{n}": s for (n, _), s in zip(policy.named_parameters(), ema.shadow)})
            write_container(partial, "stage1-partial",
                            {"config_hash": cfg.digest(), "step": step, "val0": state["val0"],
                             "ema_steps": ema.steps, "rng_state": rng.bit_generator.state}, arrays)

        def log_row(row):
            if row["step"] == 0:
                state["val0"] = row["val_loss"]
            logger(row)

        opt, ema, v0, v_final = F.pretrain(policy, train, val, tc, rng, val_rng, log_row, start, opt, ema, checkpoint)
        arrays = _policy_arrays(policy, "raw.")
        ema_policy = build_policy(cfg, np.random.default_rng(0), nz)
        ema.copy_to(ema_policy.parameters())
        arrays.update(_policy_arrays(ema_policy, "ema."))
        arrays.update({f"norm.{k}": v for k, v in nz.arrays().items()})
        meta = {"model": cfg.model.to_dict(), "steps": tc.steps, "val_loss_init": state["val0"],
                "val_loss_final": v_final, "config_hash": cfg.digest()}
        write_container(ws.path("stage1"), "policy", meta, arrays)
    if partial.exists():
        partial.unlink()
    return write_stamp(ws, "pretrain", cfg, ["stage1", "pretrain_log"])


def _split_ids(ws: Workspace, split: str) -> np.ndarray:
    cur = json.loads(ws.path("curation").read_text())
    return np.array([t["id"] for t in cur["trajectories"] if t["split"] == split], dtype=np.int64)


def _text_pool(policy: F.FlowPolicy, texts: list[str]) -> np.ndarray:
    with T.no_grad():
        return policy.encoder(texts).c_pool.data.copy()


def batched_r_precision(z_s, z_t, labels, batch: int, rng: np.random.Generator, ks=(1, 2, 3)) -> dict:
    """R@k averaged over batches that never repeat an instruction; batches smaller than k are skipped."""
    bs = distinct_batches(labels, batch, rng, min_size=1)
    out = {}
    for k in ks:
        vals = [Mt.r_precision(z_s[b], z_t[b], k) for b in bs if len(b) >= k]
        out[k] = float(np.mean(vals)) if vals else float("nan")
    return out


def aligner_heldout(al: Aligner, text_pool: np.ndarray, states: np.ndarray, labels: np.ndarray,
                    rng: np.random.Generator, crops: int = 4, batch: int = 32) -> dict:
    """Retrieval quality on held-out trajectories using full-length random crops."""
    zs, zl = [], []
    for _ in range(crops):
        c, l = random_crops(states, rng, al.cfg.max_len, al.cfg.max_len)
        with T.no_grad():
            zs.append(al.encode_states(c, l).data)
        zl.append(labels)
    zs, zl = np.concatenate(zs).astype(np.float64), np.concatenate(zl)
    with T.no_grad():
        zt = al.encode_text(text_pool[zl]).data.astype(np.float64)
    out = {f"r{k}": v for k, v in batched_r_precision(zs, zt, zl, batch, rng).items()}
    out["mm_dist"] = Mt.mm_dist(zs, zt)
    out["pairs"] = len(zs)
    return out


def cmd_train_aligner(cfg: RunConfig, ws: Workspace) -> dict:
    ws.require("stage1", hint="run 'pretrain' first")
    ws.require("corpus", "curation", hint="run 'generate' and 'curate' first")
    ws.ensure_dirs()
    texts = texts_of(cfg)
    _, corpus = load_corpus(ws)
    train_ids, test_ids = _split_ids(ws, "train"), _split_ids(ws, "test")
    if len(train_ids) == 0:
        raise MissingPrerequisite(ws.path("curation"), "no training trajectories")
    with precision(cfg.precision), numerics_guard("train-aligner"):
        policy = load_policy(cfg, ws.path("stage1"))
        pool = _text_pool(policy, texts)
        rng = stage_rng(cfg.seed, "aligner")
        al = Aligner(cfg.aligner, cfg.env.d_s, cfg.model.d_pool, rng)
        logger = CsvLog(ws.path("aligner_log"), ["epoch", "loss", "lr", "gamma"])
        train_aligner(al, corpus.states[train_ids], corpus.instruction[train_ids], pool, rng, logger)
        arrays = {f"param.{k}": v for k, v in al.state_dict().items()}
        arrays.update({"norm.lo": al.normalizer.lo, "norm.hi": al.normalizer.hi, "text_pool": pool})
        write_container(ws.path("aligner"), "aligner", {"aligner": cfg.aligner.to_dict(), "instructions": texts},
                        arrays)
        if len(test_ids):
            rep = aligner_heldout(al, pool, corpus.states[test_ids], corpus.instruction[test_ids],
                                  stage_rng(cfg.seed, "aligner.eval"), batch=cfg.eval.r_precision_batch)
            ws.path("aligner_report").write_text("".join(f"{k}={v!r}\n" for k, v in rep.items()))
    return write_stamp(ws, "train-aligner", cfg, ["aligner", "aligner_log", "aligner_report"])


def _rl_arrays(trainer: R.RLHRTrainer) -> dict[str, np.ndarray]:
    arrays = {f"ema.{k}": v for k, v in trainer.policy.state_dict().items()}
    arrays.update({f"noise.{k}": v for k, v in trainer.noise.state_dict().items()})
    arrays.update({f"critic.{k}": v for k, v in trainer.critic.state_dict().items()})
    return arrays


def cmd_rlhr(cfg: RunConfig, ws: Workspace) -> dict:
    ws.require("stage1", hint="RL post-training starts from the pretrained EMA checkpoint; run 'pretrain' first")
    ws.require("aligner", hint="run 'train-aligner' first")
    ws.ensure_dirs()
    texts = texts_of(cfg)
    rc = cfg.rlhr
    eval_seed = cfg.seed + cfg.eval.seed_offset
    # RL always runs in 64-bit so stored chain likelihoods are reproduced to round-off
    with precision("f64"), numerics_guard("rlhr"):
        policy = load_policy(cfg, ws.path("stage1"))
        al, _ = load_aligner(cfg, ws)
        bc = R.episode_rewards(policy, al, cfg.env, texts, rc, eval_seed)
        trainer = R.RLHRTrainer(policy, al, cfg.env, texts, rc, stage_rng(cfg.seed, "rlhr"))
        logger = CsvLog(ws.path("rlhr_log"), [f.name for f in fields(R.IterationStats)] + ["ratio_err"])
        for _ in range(rc.iterations):
            stats = trainer.train_iteration()
            logger({**asdict(stats), "ratio_err": trainer.max_first_ratio_err})
        rl = R.episode_rewards(trainer.policy, al, cfg.env, texts, rc, eval_seed)
        arrays = _rl_arrays(trainer)
        _, src = read_container(ws.path("stage1"), "policy")
        arrays.update({k: v for k, v in src.items() if k.startswith("norm.")})
        write_container(ws.path("rlhr"), "policy", {"iterations": rc.iterations, "config_hash": cfg.digest()},
                        arrays)
    report = {"bc_reward": float(bc[0].mean()), "rl_reward": float(rl[0].mean()),
              "bc_phys": float(bc[1].mean()), "rl_phys": float(rl[1].mean()),
              "bc_text": float(bc[2].mean()), "rl_text": float(rl[2].mean()),
              "bc_duration": float(bc[3].sum() / (len(texts) * rc.T_max)),
              "rl_duration": float(rl[3].sum() / (len(texts) * rc.T_max))}
    report["relative_gain"] = (report["rl_reward"] - report["bc_reward"]) / abs(report["bc_reward"])
    ws.path("rlhr_report").write_text("".join(f"{k}={v!r}\n" for k, v in report.items()))
    return write_stamp(ws, "rlhr", cfg, ["rlhr", "rlhr_log", "rlhr_report"])


def evaluate_policy(cfg: RunConfig, policy: F.FlowPolicy, al: Aligner, text_pool: np.ndarray,
                    ref_states: np.ndarray) -> Mt.EvalReport:
    ev = cfg.eval
    texts = texts_of(cfg)
    prompts = texts * ev.rollouts_per_instruction
    labels = np.tile(np.arange(len(texts)), ev.rollouts_per_instruction)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, ev.seed_offset]))
    res = F.rollout_closed_loop(policy, cfg.env, prompts, ev.T_max, ev.K_steps, ev.guidance_w, rng)
    B = len(prompts)
    t_end = np.where(res.fallen, np.minimum(res.t_valid + 1, ev.T_max), ev.T_max)
    wins = [tail_window(res.states[i], int(t_end[i]), al.cfg.max_len) for i in range(B)]
    with T.no_grad():
        z_s = al.encode_states(np.stack([w for w, _ in wins]), np.array([n for _, n in wins])).data.astype(np.float64)
        z_t = al.encode_text(text_pool[labels]).data.astype(np.float64)
        ref_w = [tail_window(s, None, al.cfg.max_len) for s in ref_states]
        z_r = al.encode_states(np.stack([w for w, _ in ref_w])).data.astype(np.float64) if len(ref_w) else None
    rk = batched_r_precision(z_s, z_t, labels, ev.r_precision_batch, np.random.default_rng(0))
    fid = Mt.fid(z_s, z_r) if z_r is not None and len(z_r) >= 2 else float("nan")
    floats, jerks = [], []
    for i in range(B):
        frames = res.sites[i, :t_end[i] + 1]
        floats.append(Mt.floating(frames))
        if len(frames) >= 4:
            jerks.append(Mt.jerk_eval(frames))
    dur = Mt.duration(zip(res.t_valid, np.full(B, ev.T_max)))
    return Mt.EvalReport(rk[1], rk[2], rk[3], Mt.mm_dist(z_s, z_t), fid, float(np.mean(floats)),
                         float(np.mean(jerks)) if jerks else float("nan"), dur)


def cmd_eval(cfg: RunConfig, ws: Workspace, policy_name: str = "bc") -> Mt.EvalReport:
    key = {"bc": "stage1", "rlhr": "rlhr"}[policy_name]
    ws.require(key, hint=f"no {policy_name} checkpoint")
    ws.require("aligner", hint="run 'train-aligner' first")
    ws.require("corpus", "curation", hint="run 'generate' and 'curate' first")
    ws.ensure_dirs()
    _, corpus = load_corpus(ws)
    ref_ids = np.concatenate([_split_ids(ws, "val"), _split_ids(ws, "test")])
    with precision(cfg.precision), numerics_guard("eval"):
        policy = load_policy(cfg, ws.path(key))
        al, pool = load_aligner(cfg, ws)
        report = evaluate_policy(cfg, policy, al, pool, corpus.states[ref_ids])
    txt, csv_path = ws.eval_paths(policy_name)
    report.write(txt, csv_path)
    stamp_path = ws.root / "stamps" / f"eval_{policy_name}.json"
    stamp_path.write_text(json.dumps({"stage": f"eval-{policy_name}", "config_hash": cfg.digest(), "seed": cfg.seed,
                                      "code_version": code_version(), "report": file_digest(txt)},
                                     indent=2, sort_keys=True) + "\n")
    return report


def cmd_report(cfg: RunConfig, ws: Workspace) -> str:
    lines = []
    if ws.path("stage1").exists():
        meta, _ = read_container(ws.path("stage1"), "policy")
        v0, v1 = meta["val_loss_init"], meta["val_loss_final"]
        lines.append(f"pretrain: val_loss {v0:.4f} -> {v1:.4f} (ratio {v1 / v0:.3f})")
    for key, title in (("aligner_report", "aligner held-out"), ("rlhr_report", "rlhr vs bc")):
        if ws.path(key).exists():
            kv = ", ".join(line.replace("=", " ") for line in ws.path(key).read_text().split("\n") if line)
            lines.append(f"{title}: {kv}")
    for name in ("bc", "rlhr"):
        txt, _ = ws.eval_paths(name)
        if txt.exists():
            rep = Mt.EvalReport.from_text(txt.read_text())
            lines.append(f"eval {name}: " + ", ".join(f"{k} {v:.4g}" for k, v in asdict(rep).items()))
    if not lines:
        raise MissingPrerequisite(ws.root / "reports", "no stage outputs to summarize yet")
    text = "\n".join(lines) + "\n"
    ws.ensure_dirs()
    ws.path("summary").write_text(text)
    return text
