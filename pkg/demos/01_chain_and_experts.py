"""Walk through the planar chain: settle it, drive it with every rule-based expert, then curate a small corpus.

Run: python3 demos/01_chain_and_experts.py
"""

import numpy as np

from flowctrl import corpus as K
from flowctrl import env as E
from flowctrl import metrics as M
from flowctrl.instruction import Vocabulary


def main():
    cfg = E.EnvConfig()
    s0 = E.initial_state(cfg)
    print(f"chain with K={cfg.K} joints, state size {cfg.d_s}, {cfg.fps:g} fps")
    print(f"settled root at x={s0.root_pos[0]:+.3f} z={s0.root_pos[1]:.3f}, lean {s0.theta:+.3f} rad")

    # the rest action holds the pose; commanding straight joints lets the post fold and the chain falls
    for name, action in (("rest", E.rest_action(cfg)), ("straight", np.zeros(cfg.K))):
        s = s0
        for t in range(1, 151):
            s = E.step(s, action, cfg)
            if E.is_fallen(s, cfg):
                break
        fell = bool(E.is_fallen(s, cfg))
        print(f"{name:8s} targets for 5 s: root z {s.root_pos[1]:.3f}, " + (f"fell at frame {t}" if fell else "standing"))

    vocab = Vocabulary()
    texts = [i.text for i in vocab.instructions()]
    _, states, sites = K.expert_reference(texts, 240, cfg)
    print("\nexpert rollouts over 8 s:")
    for text, st, si in zip(texts, states, sites):
        lowest = si[..., 1].min()
        print(f"  {text:18s} root z in [{st[:, 0].min():.2f}, {st[:, 0].max():.2f}]  lowest site {lowest:+.3f} m  "
              f"floating {M.floating(si[..., 1]):6.1f} mm")

    rng = np.random.default_rng(0)
    corpus = K.generate_corpus(vocab, cfg, repeats=2, T=120, rng=rng, corrupt_fraction=0.25)
    res = K.curate_corpus(corpus, cfg.fps, rng)
    print(f"\ncurated {len(corpus)} tracked clips: kept {int(res.kept.sum())}")
    for n in np.flatnonzero(~res.kept):
        art = K.ARTIFACTS[corpus.artifact[n]] if corpus.artifact[n] >= 0 else "none"
        print(f"  clip {n:2d} ({texts[corpus.instruction[n]]}) injected artifact {art!r} -> rejected as {res.reason[n]}")
    splits = {s: int((res.split == s).sum()) for s in ("train", "val", "test")}
    print(f"splits {splits}")


if __name__ == "__main__":
    main()
