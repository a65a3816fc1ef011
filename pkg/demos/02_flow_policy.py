"""Train a small flow policy by behavior cloning and let it drive the chain closed-loop.

The policy predicts a chunk of future actions and states from noise in a few Euler
steps, conditioned on the instruction and on sampled history frames. Only the first
action of each chunk is executed before the policy is queried again.

Run: python3 demos/02_flow_policy.py   (about two minutes on one core)
"""

import numpy as np

from flowctrl import corpus as K
from flowctrl import env as E
from flowctrl import flow as F
from flowctrl import metrics as M
from flowctrl import tensor as T
from flowctrl.instruction import InstructionEncoder, Vocabulary
from flowctrl.jast import ModelConfig, count_parameters


def windows(corpus, ids, mcfg, texts):
    h, s, a, ii, _ = K.corpus_windows(corpus, ids, mcfg.L_max, mcfg.H, stride=4)
    return F.WindowData(h, s, a, [texts[i] for i in ii])


def main():
    rng = np.random.default_rng(0)
    cfg = E.EnvConfig()
    vocab = Vocabulary(verbs=("swing", "bend"), body_parts=("arm", "leg"), speeds=("slow",))
    texts = [i.text for i in vocab.instructions()]
    corpus = K.generate_corpus(vocab, cfg, repeats=6, T=120, rng=rng)
    res = K.curate_corpus(corpus, cfg.fps, rng, ratios=(0.8, 0.2, 0.0))
    mcfg = ModelConfig(n_layers=1, d_model=32, n_heads=2, d_head=16, H=4, L_max=16, N_s=4, N_l=4,
                       d_s=cfg.d_s, d_a=cfg.d_a, d_pool=16, d_txt=16)
    train = windows(corpus, np.flatnonzero(res.split == "train"), mcfg, texts)
    val = windows(corpus, np.flatnonzero(res.split == "val"), mcfg, texts)
    print(f"{len(texts)} instructions, {len(train)} training windows, {len(val)} validation windows")

    policy = F.FlowPolicy(mcfg, InstructionEncoder(vocab, rng, d_txt=16, d_pool=16), rng,
                          F.Normalizer.fit(train.target_states, train.target_actions))
    print(f"velocity model: {count_parameters(mcfg):,} parameters")
    tcfg = F.PretrainConfig(steps=1500, batch_size=32, lr=1e-3, warmup=100, ema_decay=0.99, ema_warmup=100,
                            val_every=250, val_size=128)

    def log(row):
        train_loss = "   -  " if np.isnan(row["fm_loss"]) else f"{row['fm_loss']:.4f}"
        print(f"  step {row['step']:5d}  train {train_loss}  val {row['val_loss']:.4f}")

    _, ema, _, _ = F.pretrain(policy, train, val, tcfg, rng, np.random.default_rng(1), log)
    ema.copy_to(policy.parameters())

    with T.no_grad():
        for w in (1.0, 2.0):
            out = F.rollout_closed_loop(policy, cfg, texts * 2, 150, 5, w, np.random.default_rng(2))
            dur = M.duration(zip(out.t_valid, np.full(len(out.t_valid), 150)))
            floating = np.mean([M.floating(s[..., 1]) for s in out.sites])
            jerk = np.mean([M.jerk_eval(np.concatenate([s, np.zeros(s.shape[:-1] + (1,))], -1)) for s in out.sites])
            print(f"guidance w={w:g}: duration {dur:.3f}, floating {floating:.1f} mm, jerk {jerk:.2f} mm/frame^3")

    # how close does the closed loop stay to the expert it imitates?
    _, ref_states, _ = K.expert_reference(texts, 151, cfg)
    err = np.abs(out.states[: len(texts), :, 5:9] - ref_states[:, :, 5:9]).mean(axis=(1, 2))
    for text, e in zip(texts, err):
        print(f"  {text:16s} mean joint-angle gap to expert {e:.3f} rad")


if __name__ == "__main__":
    main()
