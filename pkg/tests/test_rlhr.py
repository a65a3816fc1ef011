import copy
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from flowctrl import aligner as A
from flowctrl import env as E
from flowctrl import flow as F
from flowctrl import rlhr as R
from flowctrl import tensor as T
from flowctrl.instruction import InstructionEncoder, Vocabulary
from flowctrl.jast import ModelConfig
from flowctrl.tensor import Parameter, Tensor

VOCAB = Vocabulary()
TINY = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_head=4, H=2, L_max=6, N_s=2, N_l=2,
                   d_s=23, d_a=4, d_pool=4, d_txt=4)


@pytest.fixture(autouse=True)
def _f64():
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(prev)


def _policy(seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    pol = F.FlowPolicy(TINY, InstructionEncoder(VOCAB, rng, d_txt=4, d_pool=4), rng)
    for p in pol.model.parameters():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    return pol


def _inputs(pol, rng, B):
    texts = [VOCAB.instructions()[i].text for i in rng.integers(0, VOCAB.M, B)]
    with T.no_grad():
        cond = pol.encoder(texts)
    hist = pol.history(rng.normal(size=(B, TINY.L_max, TINY.d_s)), rng)
    return cond, hist


# -- noise scale -----------------------------------------------------------------
def test_noise_scale_examples():
    assert R.noise_scale(0.0, 0.03, 0.08).item() == pytest.approx(math.sqrt(0.03 * 0.08), rel=1e-12)
    assert R.noise_scale(0.0, 0.03, 0.08).item() == pytest.approx(0.04899, abs=1e-5)
    assert R.noise_scale(50.0, 0.03, 0.08).item() == pytest.approx(0.08, rel=1e-12)
    assert R.noise_scale(-50.0, 0.03, 0.08).item() == pytest.approx(0.03, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30), st.floats(0.0, 5.0))
def test_noise_scale_bounded_and_monotone(z, dz):
    lo, hi = R.noise_scale(z, 0.03, 0.08).item(), R.noise_scale(z + dz, 0.03, 0.08).item()
    assert 0.03 - 1e-12 <= lo <= hi <= 0.08 + 1e-12


def test_noise_net_starts_at_geometric_mean():
    rng = np.random.default_rng(0)
    net = R.NoiseNet(TINY.d_s, TINY.d_a, rng, hidden=8)
    _, hist = _inputs(_policy(), rng, 3)
    np.testing.assert_allclose(net(np.array([0.0, 0.3, 0.9]), hist).data, math.sqrt(0.03 * 0.08), rtol=1e-12)


# -- stochastic chain ---------------------------------------------------------------
def test_noise_enters_action_entries_only():
    rng = np.random.default_rng(1)
    pol = _policy()
    net = R.NoiseNet(TINY.d_s, TINY.d_a, rng, hidden=8)
    B = 4
    cond, hist = _inputs(pol, rng, B)
    x_a, x_s = rng.normal(size=(B, TINY.H, TINY.d_a)), rng.normal(size=(B, TINY.H, TINY.d_s))
    nxt_a, nxt_s, mu_a, sigma = R.stochastic_euler_step(pol, net, x_a, x_s, 0.2, 0.25, cond, hist, rng)
    with T.no_grad():
        v_a, v_s = pol.velocity(Tensor(x_a), Tensor(x_s), np.full(B, 0.2), cond, hist)
    np.testing.assert_array_equal(nxt_s - (x_s + 0.25 * v_s.data), 0.0)
    np.testing.assert_allclose(mu_a, x_a + 0.25 * v_a.data, atol=1e-15)
    assert np.all(nxt_a != mu_a)
    assert sigma.shape == (B, TINY.d_a)


def test_action_residual_statistics():
    rng = np.random.default_rng(2)
    pol = _policy()
    net = R.NoiseNet(TINY.d_s, TINY.d_a, rng, hidden=8)
    B = 20_000
    cond, hist = _inputs(pol, rng, B)
    x_a, x_s = np.zeros((B, TINY.H, TINY.d_a)), np.zeros((B, TINY.H, TINY.d_s))
    nxt_a, _, mu_a, sigma = R.stochastic_euler_step(pol, net, x_a, x_s, 0.0, 0.2, cond, hist, rng)
    z = (nxt_a - mu_a) / sigma[:, None, :]
    assert abs(z.std() - 1.0) < 0.01
    assert abs(z.mean()) < 0.01


def test_chain_logprob_examples_and_oracle():
    x = np.zeros((1, 1, 1, 1))
    assert R.chain_logprob(x, x, np.ones((1, 1, 1))).item() == pytest.approx(-0.9189385332, abs=1e-9)
    rng = np.random.default_rng(3)
    B, K, H, d = 3, 4, 2, 5
    xn, mu = rng.normal(size=(B, K, H, d)), rng.normal(size=(B, K, H, d))
    sigma = rng.uniform(0.03, 0.08, size=(B, K, d))
    oracle = scipy.stats.norm.logpdf(xn, mu, sigma[:, :, None, :]).reshape(B, -1).sum(1)
    np.testing.assert_allclose(R.chain_logprob(xn, mu, sigma).data, oracle, rtol=0, atol=1e-10)
    with pytest.raises(ValueError):
        R.chain_logprob(xn, mu, np.zeros_like(sigma))


def test_sample_chain_logprob_matches_recompute():
    rng = np.random.default_rng(4)
    pol = _policy()
    net = R.NoiseNet(TINY.d_s, TINY.d_a, rng, hidden=8)
    cond, hist = _inputs(pol, rng, 5)
    xs_a, xs_s, mu, sigma, logp = R.sample_chain(pol, net, cond, hist, 3, rng)
    assert xs_a.shape == (5, 4, TINY.H, TINY.d_a) and sigma.shape == (5, 3, TINY.d_a)
    lp, sig = R.recompute_logprob(pol, net, xs_a, xs_s, cond, hist)
    np.testing.assert_allclose(lp.data, logp, atol=1e-9)
    np.testing.assert_allclose(sig.data, sigma, atol=1e-15)


# -- PPO pieces ------------------------------------------------------------------------
def test_ppo_ratio_examples():
    assert R.ppo_ratio(-3.0, -3.0).item() == 1.0
    assert R.ppo_ratio(0.0, -1000.0).item() == pytest.approx(math.exp(20.0))
    assert R.ppo_ratio(-1000.0, 0.0).item() == pytest.approx(math.exp(-20.0))
    assert R.ppo_ratio(math.log(2.0), 0.0).item() == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize("ratio,adv,expected", [
    (1.2, 1.0, -1.1), (0.8, 1.0, -0.8), (0.8, -1.0, 0.9), (1.2, -1.0, 1.2), (1.05, 2.0, -2.1), (1.0, 0.0, 0.0),
    (2.0, 1.0, -1.1), (0.5, -1.0, 0.9), (1.0, -3.0, 3.0),
])
def test_ppo_loss_table(ratio, adv, expected):
    assert R.ppo_loss(np.array([ratio]), np.array([adv]), 0.1).item() == pytest.approx(expected, abs=1e-12)


def test_ppo_loss_gradient_vanishes_when_clipped():
    r = Parameter(np.array([1.2, 0.95]))
    R.ppo_loss(r, np.array([1.0, 1.0]), 0.1).backward()
    np.testing.assert_allclose(r.grad, [0.0, -0.5])


def _gae_oracle(r, v, d, last, gamma, lam):
    Tn = len(r)
    nv = np.append(v[1:], last)
    delta = r + gamma * nv * (1 - d) - v
    adv = np.zeros(Tn)
    for t in range(Tn):
        acc, disc = 0.0, 1.0
        for s in range(t, Tn):
            acc += disc * delta[s]
            if d[s]:
                break
            disc *= gamma * lam
        adv[t] = acc
    return adv


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_gae_matches_direct_sum(Tn, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=Tn), rng.normal(size=Tn)
    d = (rng.random(Tn) < 0.3).astype(float)
    last = rng.normal()
    adv, ret = R.gae(r, v, d, last, gamma, lam)
    np.testing.assert_allclose(adv, _gae_oracle(r, v, d, last, gamma, lam), atol=1e-10)
    np.testing.assert_allclose(ret, adv + v)


def test_gae_limits():
    r = np.array([1.0, 2.0, 3.0])
    v = np.array([0.5, 0.25, 0.0])
    d = np.zeros(3)
    adv, ret = R.gae(r, v, d, 4.0, gamma=1.0, lam=1.0)
    np.testing.assert_allclose(ret, [10.0, 9.0, 7.0])
    adv, _ = R.gae(r, v, d, 4.0, gamma=0.9, lam=0.0)
    np.testing.assert_allclose(adv, r + 0.9 * np.array([0.25, 0.0, 4.0]) - v)
    adv, _ = R.gae(r, v, np.array([0.0, 1.0, 0.0]), 4.0, gamma=1.0, lam=1.0)
    assert adv[1] == pytest.approx(2.0 - 0.25)
    adv, _ = R.gae(r, v, d, 4.0, gamma=0.0, lam=0.95)
    np.testing.assert_allclose(adv, r - v)
    # constant unit reward, zero values, gamma = lambda = 0.9 over three steps
    adv, _ = R.gae(np.ones(3), np.zeros(3), np.zeros(3), 0.0, gamma=0.9, lam=0.9)
    np.testing.assert_allclose(adv, [1 + 0.81 + 0.81 ** 2, 1.81, 1.0])
    with pytest.raises(ValueError):
        R.gae(r, v[:2], d, 0.0)


def test_entropy_examples():
    K, n = 3, 7
    ones = np.ones((1, K, n))
    assert R.entropy_bonus(ones).item() == pytest.approx(1.4189385332 * n, rel=1e-10)
    assert R.entropy_bonus(2 * ones).item() - R.entropy_bonus(ones).item() == pytest.approx(n * math.log(2.0))


def test_entropy_matches_monte_carlo():
    rng = np.random.default_rng(5)
    sigma = rng.uniform(0.03, 0.08, size=(1, 2, 3))
    x = rng.normal(size=(200_000, 2, 3)) * sigma
    mc = -scipy.stats.norm.logpdf(x, 0.0, sigma).sum(axis=(1, 2)).mean() / 2
    assert R.entropy_bonus(sigma).item() == pytest.approx(mc, rel=0.01)


# -- rewards --------------------------------------------------------------------------
def test_phys_reward_examples():
    k = np.array([100.0, 10.0, 0.1, 0.1])
    assert R.phys_reward_from_errors(np.zeros(4)) == pytest.approx(1.0)
    assert R.phys_reward_from_errors(np.log(2.0) / k) == pytest.approx(0.5)
    assert R.phys_reward_from_errors(np.array([np.inf, 0.0, 0.0, 0.0])) == pytest.approx(0.5)


def test_phys_reward_on_states():
    cfg = E.EnvConfig()
    s = E.initial_state(cfg)
    assert R.phys_reward(s, s, cfg) == pytest.approx(1.0)
    moved = E.EnvState(s.q + np.array([5.0] + [0.0] * (len(s.q) - 1)), s.qd)
    # horizontal root drift is not penalized
    assert R.phys_reward(moved, s, cfg) == pytest.approx(1.0)
    bent = E.EnvState(s.q.copy(), s.qd)
    bent.q[-1] += 0.5
    assert R.phys_reward(bent, s, cfg) < 1.0


def test_text_reward_examples():
    np.testing.assert_allclose(R.text_reward_from_similarity(np.zeros((4, 4))), -math.log(4))
    np.testing.assert_allclose(R.text_reward_from_similarity(100 * np.eye(3)), 0.0, atol=1e-40)
    S = np.array([[1.0, 2.0], [3.0, 0.0]])
    np.testing.assert_allclose(R.text_reward_from_similarity(S, [1, 1]),
                               [2 - np.log(np.e + np.e ** 2), -np.log(np.e ** 3 + 1)])
    with pytest.raises(ValueError):
        R.text_reward_from_similarity(np.zeros((0, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000), st.floats(0.1, 100.0))
def test_text_reward_is_a_log_probability(B, seed, gamma):
    S = gamma * np.random.default_rng(seed).uniform(-1, 1, size=(B, B))
    r = R.text_reward_from_similarity(S)
    assert np.all(r <= 1e-12)
    full = np.stack([R.text_reward_from_similarity(S, np.full(B, j)) for j in range(B)], 1)
    np.testing.assert_allclose(np.exp(full).sum(1), 1.0, rtol=1e-10)


# -- anchor and objective ---------------------------------------------------------------
def test_bc_anchor_zero_at_frozen_and_frozen_untouched():
    rng = np.random.default_rng(6)
    pol = _policy()
    frozen = copy.deepcopy(pol)
    frozen.requires_grad_(False)
    cond, hist = _inputs(pol, rng, 3)
    x1_a, x1_s = rng.normal(size=(3, TINY.H, TINY.d_a)), rng.normal(size=(3, TINY.H, TINY.d_s))
    assert R.bc_anchor(pol, frozen, x1_a, x1_s, cond, cond, hist, rng).item() == pytest.approx(0.0, abs=1e-30)
    pol.model.parameters()[0].data += 0.5
    loss = R.bc_anchor(pol, frozen, x1_a, x1_s, cond, cond, hist, rng)
    assert loss.item() > 0
    loss.backward()
    assert any(p.grad is not None and np.any(p.grad != 0) for p in pol.model.parameters())
    assert all(p.grad is None or not np.any(p.grad) for p in frozen.parameters())


def test_objective_without_bc_has_no_anchor_gradient():
    rng = np.random.default_rng(7)
    pol = _policy()
    frozen = copy.deepcopy(pol)
    frozen.requires_grad_(False)
    pol.model.parameters()[0].data += 0.5
    cond, hist = _inputs(pol, rng, 3)
    x1_a, x1_s = rng.normal(size=(3, TINY.H, TINY.d_a)), rng.normal(size=(3, TINY.H, TINY.d_s))
    w = Parameter(np.array(2.0))
    bc = R.bc_anchor(pol, frozen, x1_a, x1_s, cond, cond, hist, rng)
    total = R.rl_objective(w * 1.0, w * w, w * 3.0, bc, alpha_v=0.5, alpha_e=0.0, alpha_bc=0.0)
    assert total.item() == pytest.approx(2.0 + 0.5 * 4.0)
    total.backward()
    assert all(p.grad is None or not np.any(p.grad) for p in pol.model.parameters())
    assert w.grad == pytest.approx(1.0 + 0.5 * 4.0)


def test_objective_linearity():
    got = R.rl_objective(1.5, 2.0, 3.0, 4.0, alpha_v=0.5, alpha_e=0.01, alpha_bc=2.0).item()
    assert got == pytest.approx(1.5 + 0.5 * 2.0 - 0.01 * 3.0 + 2.0 * 4.0)
    assert R.rl_objective(1.5, 2.0, 3.0, None, alpha_bc=1.0).item() == pytest.approx(1.5 + 1.0 - 0.003)


def test_reward_scaler():
    sc = R.RunningRewardScaler(3)
    assert sc.scale == 1.0
    for _ in range(50):
        sc.observe_returns(np.full(3, -2.5))
    assert sc.scale == pytest.approx(2.5)
    sc = R.RunningRewardScaler(2)
    for _ in range(20):
        out = sc(np.array([4.0, -4.0]), np.array([True, True]))
    np.testing.assert_allclose(out, [1.0, -1.0])


def test_critic_starts_at_zero():
    c = R.Critic(5, 3, np.random.default_rng(0), hidden=8)
    np.testing.assert_array_equal(c(np.ones((4, 5)), np.ones((4, 3))).data, 0.0)


# -- trainer -------------------------------------------------------------------------
def _trainer(alpha_bc=1.0, seed=8):
    rng = np.random.default_rng(seed)
    pol = _policy(scale=0.05)
    texts = [VOCAB.instructions()[i].text for i in (0, 5)]
    al = A.Aligner(A.AlignerConfig(d_z=4, n_layers=1, hidden=8, n_heads=2, max_len=8, min_len=2),
                   TINY.d_s, TINY.d_pool, rng)
    al.eval()
    al.requires_grad_(False)
    rc = R.RLConfig(n_envs=2, frames_per_iter=4, epochs=2, minibatch=4, K_steps=2, T_max=3, text_window=8,
                    noise_hidden=8, critic_hidden=8, alpha_bc=alpha_bc, actor_lr=1e-3)
    return R.RLHRTrainer(pol, al, E.EnvConfig(), texts, rc, rng)


def test_trainer_first_ratio_is_one_and_frozen_parts_fixed():
    tr = _trainer()
    frozen0 = [p.data.copy() for p in tr.frozen.parameters()]
    enc0 = [p.data.copy() for p in tr.policy.encoder.parameters()]
    model0 = [p.data.copy() for p in tr.policy.model.parameters()]
    stats = tr.train_iteration()
    assert tr.max_first_ratio_err < 1e-9
    assert all(np.array_equal(a, p.data) for a, p in zip(frozen0, tr.frozen.parameters()))
    assert all(np.array_equal(a, p.data) for a, p in zip(enc0, tr.policy.encoder.parameters()))
    assert any(not np.array_equal(a, p.data) for a, p in zip(model0, tr.policy.model.parameters()))
    assert 0.03 <= stats.mean_sigma <= 0.08
    assert stats.bc_loss > 0
    # T_max = 3 and 4 frames per iteration: every env finishes once
    assert 0.0 <= stats.duration <= 1.0 and np.isfinite(stats.r_text)


def test_trainer_without_anchor_reports_zero_bc():
    tr = _trainer(alpha_bc=0.0)
    assert tr.train_iteration().bc_loss == 0.0


def test_trainer_is_deterministic():
    a, b = _trainer().train_iteration(), _trainer().train_iteration()
    assert a == b


def test_trainer_needs_one_prompt_per_env():
    tr = _trainer()
    with pytest.raises(ValueError):
        R.RLHRTrainer(tr.policy, tr.aligner, E.EnvConfig(), ["hold still"], tr.rcfg, np.random.default_rng(0))
