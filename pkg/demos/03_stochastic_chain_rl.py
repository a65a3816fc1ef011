"""The RL post-training machinery on a tiny policy.

Deterministic Euler sampling has no likelihood. Injecting bounded Gaussian noise into
the action entries at every step turns the sampler into a Markov chain whose
log-likelihood is a sum of diagonal Gaussians, which is all PPO needs.

Run: python3 demos/03_stochastic_chain_rl.py
"""

import math

import numpy as np

from flowctrl import aligner as A
from flowctrl import env as E
from flowctrl import flow as F
from flowctrl import rlhr as R
from flowctrl import tensor as T
from flowctrl.instruction import InstructionEncoder, Vocabulary
from flowctrl.jast import ModelConfig


def main():
    T.set_default_dtype(np.float64)
    rng = np.random.default_rng(0)
    cfg = E.EnvConfig()
    vocab = Vocabulary(verbs=("swing", "tap"), body_parts=("arm",), speeds=("slow",))
    texts = [i.text for i in vocab.instructions()]
    mcfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_head=8, H=2, L_max=8, N_s=2, N_l=2,
                       d_s=cfg.d_s, d_a=cfg.d_a, d_pool=8, d_txt=8)
    policy = F.FlowPolicy(mcfg, InstructionEncoder(vocab, rng, d_txt=8, d_pool=8), rng)
    for p in policy.model.parameters():
        p.data[...] = rng.normal(0.0, 0.05, size=p.shape)

    print("noise scale bounds: z=-inf -> %.4f, z=0 -> %.5f, z=+inf -> %.4f" % tuple(
        R.noise_scale(z, 0.03, 0.08).item() for z in (-50.0, 0.0, 50.0)))
    print(f"geometric mean sqrt(0.03 * 0.08) = {math.sqrt(0.03 * 0.08):.5f}")

    net = R.NoiseNet(mcfg.d_s, mcfg.d_a, rng, hidden=8)
    with T.no_grad():
        cond = policy.encoder(texts)
    hist = policy.history(np.zeros((2, mcfg.L_max, mcfg.d_s)), rng)
    xs_a, xs_s, mu, sigma, logp = R.sample_chain(policy, net, cond, hist, K=4, rng=rng)
    n = mu[0].size
    print(f"\n4-step chain, {n} noised entries per sample: log-likelihoods {np.round(logp, 3)}")
    z = (xs_a[:, 1:] - mu) / sigma[:, :, None, :]
    print(f"  recovered standardized noise: mean {z.mean():+.3f}, std {z.std():.3f}")
    new, _ = R.recompute_logprob(policy, net, xs_a, xs_s, cond, hist)
    print(f"  ratio under unchanged weights: {R.ppo_ratio(new, logp).data}")
    print(f"  closed-form entropy per step: {R.entropy_bonus(np.broadcast_to(sigma[:, :, None, :], mu.shape).reshape(2, 4, -1)).item():.3f}"
          f" (a unit Gaussian would give {0.5 * math.log(2 * math.pi * math.e) * n / 4:.3f})")

    print("\nclipped surrogate, eps = 0.1:")
    for ratio, adv in ((1.0, 1.0), (1.5, 1.0), (0.5, 1.0), (1.5, -1.0), (0.5, -1.0)):
        print(f"  ratio {ratio:.1f}, advantage {adv:+.0f} -> loss {R.ppo_loss(np.array([ratio]), np.array([adv])).item():+.2f}")

    al = A.Aligner(A.AlignerConfig(d_z=8, n_layers=1, hidden=16, n_heads=2, max_len=16, min_len=4),
                   mcfg.d_s, mcfg.d_pool, rng)
    al.eval()
    al.requires_grad_(False)
    rc = R.RLConfig(n_envs=2, frames_per_iter=16, epochs=2, minibatch=16, K_steps=3, T_max=30, text_window=16,
                    noise_hidden=8, critic_hidden=16, actor_lr=1e-4)
    trainer = R.RLHRTrainer(policy, al, cfg, texts, rc, rng)
    print("\nRL iterations on the chain (16 frames per iteration, 30-frame episodes):")
    for _ in range(4):
        s = trainer.train_iteration()
        print(f"  iter {s.iter}: mean reward {s.mean_reward:+.3f}, phys {s.r_phys:.3f}, sigma {s.mean_sigma:.4f}, "
              f"bc anchor {s.bc_loss:.2e}, first-epoch ratio error {trainer.max_first_ratio_err:.1e}")


if __name__ == "__main__":
    main()
