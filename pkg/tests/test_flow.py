import numpy as np
import pytest

from flowctrl import env as E
from flowctrl import flow as F
from flowctrl import metrics as Mt
from flowctrl import tensor as T
from flowctrl.instruction import InstructionEncoder, Vocabulary
from flowctrl.jast import ModelConfig
from flowctrl.tensor import Parameter, Tensor, grad_check

VOCAB = Vocabulary()
TINY = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_head=4, H=2, L_max=6, N_s=2, N_l=2,
                   d_s=23, d_a=4, d_pool=4, d_txt=4)


def _policy(seed=0, randomize=False, normalizer=None):
    rng = np.random.default_rng(seed)
    pol = F.FlowPolicy(TINY, InstructionEncoder(VOCAB, rng, d_txt=4, d_pool=4), rng, normalizer)
    if randomize:
        for p in pol.model.parameters():
            p.data[...] = rng.normal(0.0, 0.3, size=p.shape)
    return pol


def _batch(rng, B=3):
    texts = [VOCAB.instructions()[i].text for i in rng.integers(0, VOCAB.M, B)]
    x1_a = rng.normal(size=(B, TINY.H, TINY.d_a))
    x1_s = rng.normal(size=(B, TINY.H, TINY.d_s))
    buf = rng.normal(size=(B, TINY.L_max, TINY.d_s))
    return texts, x1_a, x1_s, buf


class _ConstantField:
    """Stand-in policy whose velocity is a fixed chunk, for sampler arithmetic."""

    def __init__(self, c_a, c_s, uncond_a=None):
        self.cfg = TINY
        self.encoder = InstructionEncoder(VOCAB, np.random.default_rng(0), d_txt=4, d_pool=4)
        self.c_a, self.c_s = c_a, c_s
        self.uncond_a = c_a if uncond_a is None else uncond_a

    def velocity(self, x_a, x_s, tau, cond, hist):
        B = x_a.shape[0]
        a = np.where(cond.null[:, None, None], self.uncond_a, self.c_a)
        return Tensor(np.broadcast_to(a, (B,) + self.c_a.shape).copy()), Tensor(np.broadcast_to(self.c_s, x_s.shape).copy())


def test_fm_pair_examples():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(2, 2, 4))
    x1 = rng.normal(size=(2, 2, 4))
    s0, s1 = np.zeros((2, 2, 3)), np.ones((2, 2, 3))
    p = F.make_fm_pair(x1, s1, rng, tau=0.0, x0_a=x0, x0_s=s0)
    np.testing.assert_array_equal(p.xt_a, x0)
    np.testing.assert_array_equal(p.u_a, x1 - x0)
    p = F.make_fm_pair(x1, s1, rng, tau=1.0, x0_a=x0, x0_s=s0)
    np.testing.assert_array_equal(p.xt_a, x1)
    c = rng.normal(size=(2, 2, 4))
    p = F.make_fm_pair(2 * c, s1, rng, tau=0.5, x0_a=np.zeros_like(c), x0_s=s0)
    np.testing.assert_allclose(p.xt_a, c)
    np.testing.assert_allclose(p.u_a, 2 * c)


def test_fm_pair_random_tau_per_sample():
    rng = np.random.default_rng(1)
    p = F.make_fm_pair(np.ones((500, 2, 4)), np.ones((500, 2, 3)), rng)
    assert p.tau.shape == (500,) and 0.0 <= p.tau.min() and p.tau.max() < 1.0
    tb = p.tau[:, None, None]
    np.testing.assert_allclose(p.xt_a, (1 - tb) * p.x0_a + tb * p.x1_a)


def test_chunk_mse_zero_when_exact():
    rng = np.random.default_rng(2)
    u_a, u_s = rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 2, 3))
    assert F.chunk_mse(Tensor(u_a), Tensor(u_s), u_a, u_s).item() == 0.0


def test_zero_init_loss_is_mean_square_target():
    rng = np.random.default_rng(3)
    pol = _policy()
    texts, x1_a, x1_s, buf = _batch(rng)
    pair = F.make_fm_pair(x1_a, x1_s, rng)
    loss = F.fm_loss(pol, pair, pol.encoder(texts), pol.history(buf, rng)).item()
    expected = (np.sum(pair.u_a ** 2) + np.sum(pair.u_s ** 2)) / (pair.u_a.size + pair.u_s.size)
    assert loss == pytest.approx(expected, rel=1e-12)


def test_fm_loss_gradient():
    rng = np.random.default_rng(4)
    pol = _policy(randomize=True)
    texts, x1_a, x1_s, buf = _batch(rng)
    pair = F.make_fm_pair(x1_a, x1_s, rng)
    hist = pol.history(buf, rng)
    err = grad_check(lambda: F.fm_loss(pol, pair, pol.encoder(texts), hist), pol.parameters(),
                     max_entries=3, rng=np.random.default_rng(0))
    assert err < 1e-5


def test_euler_constant_field():
    rng = np.random.default_rng(5)
    c_a, c_s = rng.normal(size=(TINY.H, TINY.d_a)), rng.normal(size=(TINY.H, TINY.d_s))
    pol = _ConstantField(c_a, c_s)
    cond = pol.encoder(["wave arm slow"] * 2)
    x0 = (rng.normal(size=(2, TINY.H, TINY.d_a)), rng.normal(size=(2, TINY.H, TINY.d_s)))
    x_a, x_s = F.euler_sample(pol, cond, None, 4, 1.0, rng, x0=x0)
    np.testing.assert_allclose(x_a, x0[0] + c_a, atol=1e-12)
    np.testing.assert_allclose(x_s, x0[1] + c_s, atol=1e-12)


def test_guidance_extrapolates_between_fields():
    rng = np.random.default_rng(6)
    c_a, u_a = rng.normal(size=(TINY.H, TINY.d_a)), rng.normal(size=(TINY.H, TINY.d_a))
    pol = _ConstantField(c_a, np.zeros((TINY.H, TINY.d_s)), uncond_a=u_a)
    cond = pol.encoder(["tap leg fast"])
    x0 = (np.zeros((1, TINY.H, TINY.d_a)), np.zeros((1, TINY.H, TINY.d_s)))
    for w in (0.0, 1.0, 2.0, 3.5):
        x_a, _ = F.euler_sample(pol, cond, None, 5, w, rng, x0=x0)
        np.testing.assert_allclose(x_a[0], u_a + w * (c_a - u_a), atol=1e-12)


def test_w_one_skips_unconditional_pass():
    rng = np.random.default_rng(7)
    pol = _policy(randomize=True)
    texts, x1_a, x1_s, buf = _batch(rng, 2)
    cond, null = pol.encoder(texts), pol.encoder.null_condition(2)
    hist = pol.history(buf, rng)
    x_a, x_s = Tensor(x1_a), Tensor(x1_s)
    tau = np.array([0.2, 0.7])
    one = F.guided_velocity(pol, x_a, x_s, tau, cond, null, hist, 1.0)
    v_a, _ = pol.velocity(x_a, x_s, tau, cond, hist)
    u_a, _ = pol.velocity(x_a, x_s, tau, null, hist)
    np.testing.assert_array_equal(one[0].data, v_a.data)
    np.testing.assert_allclose(u_a.data + (v_a.data - u_a.data) * 1.0, v_a.data, atol=1e-12)
    zero = F.guided_velocity(pol, x_a, x_s, tau, cond, null, hist, 0.0)
    np.testing.assert_allclose(zero[0].data, u_a.data, atol=1e-12)


def test_w_zero_equals_unconditional_sample():
    rng = np.random.default_rng(8)
    pol = _policy(randomize=True)
    texts, _, _, buf = _batch(rng, 2)
    hist = pol.history(buf, rng)
    x0 = (rng.normal(size=(2, TINY.H, TINY.d_a)), rng.normal(size=(2, TINY.H, TINY.d_s)))
    guided = F.euler_sample(pol, pol.encoder(texts), hist, 3, 0.0, rng, x0=x0)
    plain = F.euler_sample(pol, pol.encoder.null_condition(2), hist, 3, 1.0, rng, x0=x0)
    np.testing.assert_allclose(guided[0], plain[0], atol=1e-12)


def test_euler_rejects_zero_steps():
    pol = _policy()
    with pytest.raises(ValueError):
        F.euler_sample(pol, pol.encoder(["wave arm slow"]), None, 0, 1.0, np.random.default_rng(0))


def test_ema_limits_and_geometric_recursion():
    p = Parameter(np.full(3, 5.0))
    ema = F.EmaState([p], decay=0.0, warmup=0)
    p.data[:] = 7.0
    ema.update([p])
    np.testing.assert_array_equal(ema.shadow[0], 7.0)

    ema = F.EmaState([p], decay=1.0, warmup=0)
    p.data[:] = -1.0
    for _ in range(5):
        ema.update([p])
    np.testing.assert_array_equal(ema.shadow[0], 7.0)

    d = 0.9
    ema = F.EmaState([p], decay=d, warmup=0)  # shadow starts at -1
    p.data[:] = 2.0
    for n in range(1, 30):
        ema.update([p])
        np.testing.assert_allclose(ema.shadow[0] - 2.0, d ** n * (-1.0 - 2.0), rtol=1e-10)


def test_ema_copies_during_warmup():
    p = Parameter(np.zeros(2))
    ema = F.EmaState([p], decay=0.5, warmup=3)
    for v in (1.0, 2.0, 3.0):
        p.data[:] = v
        ema.update([p])
        np.testing.assert_array_equal(ema.shadow[0], v)
    p.data[:] = 5.0
    ema.update([p])
    np.testing.assert_allclose(ema.shadow[0], 4.0)
    q = Parameter(np.zeros(2))
    ema.copy_to([q])
    np.testing.assert_allclose(q.data, 4.0)


class _RestPolicy(_ConstantField):
    """Action field -x / (1 - tau) lands exactly on zero, which the normalizer maps to the rest pose."""

    def __init__(self, env_cfg):
        super().__init__(np.zeros((TINY.H, TINY.d_a)), np.zeros((TINY.H, TINY.d_s)))
        self.normalizer = F.Normalizer(np.zeros(TINY.d_s), np.ones(TINY.d_s), E.rest_action(env_cfg),
                                       np.ones(TINY.d_a))
        self.steps = 0

    def velocity(self, x_a, x_s, tau, cond, hist):
        tb = np.asarray(tau, dtype=np.float64).reshape(-1, 1, 1)
        return Tensor(-x_a.data / (1.0 - tb)), Tensor(np.zeros(x_s.shape))

    def history(self, raw, rng):
        return None


def test_rest_policy_static_in_zero_gravity():
    cfg = E.with_overrides(E.EnvConfig(), gravity=0.0)
    pol = _RestPolicy(cfg)
    res = F.rollout_closed_loop(pol, cfg, ["wave arm slow", "bend leg fast"], 20, 5, 1.0, np.random.default_rng(0))
    np.testing.assert_allclose(res.actions[:, 1:], np.broadcast_to(E.rest_action(cfg), (2, 20, 4)), atol=1e-12)
    np.testing.assert_allclose(res.states, np.broadcast_to(res.states[:, :1], res.states.shape), atol=1e-9)
    assert not res.fallen.any() and res.t_valid.tolist() == [20, 20]
    assert Mt.duration(zip(res.t_valid, [20, 20])) == 1.0


def test_rollout_single_step():
    cfg = E.EnvConfig()
    pol = _policy(seed=1, randomize=True)
    res = F.rollout_closed_loop(pol, cfg, ["swing arm fast"], 1, 2, 2.0, np.random.default_rng(0))
    assert res.states.shape == (1, 2, cfg.d_s) and res.actions.shape == (1, 2, cfg.d_a)
    s0 = E.initial_state(cfg)
    expected = E.to_state_vector(E.step(s0, res.actions[0, 1], cfg), cfg)
    np.testing.assert_allclose(res.states[0, 1], expected, atol=1e-12)


def test_normalizer_round_trip_and_floor():
    rng = np.random.default_rng(9)
    s = rng.normal(2.0, 3.0, size=(100, 5))
    s[:, 0] = 1.0
    a = rng.normal(size=(100, 2))
    nz = F.Normalizer.fit(s, a)
    assert nz.s_std[0] == F.STD_FLOOR
    np.testing.assert_allclose(nz.denorm_s(nz.norm_s(s)), s)
    np.testing.assert_allclose(nz.norm_a(a).mean(0), 0.0, atol=1e-12)


def test_pretrain_reduces_loss_on_constant_chunk():
    # one fixed chunk and one instruction: the sampled chunk approaches it as training proceeds
    rng = np.random.default_rng(10)
    pol = _policy(seed=2)
    target_a = rng.normal(size=(1, TINY.H, TINY.d_a))
    target_s = rng.normal(size=(1, TINY.H, TINY.d_s))
    n = 32
    data = F.WindowData(np.zeros((n, TINY.L_max, TINY.d_s)), np.repeat(target_s, n, 0), np.repeat(target_a, n, 0),
                        ["wave arm slow"] * n)
    tcfg = F.PretrainConfig(steps=300, batch_size=16, lr=3e-3, warmup=10, cfg_dropout=0.0, ema_warmup=0,
                            ema_decay=0.9, val_every=100, val_size=16)
    rows = []
    errors = []

    def gap(policy):
        hist = policy.history(np.zeros((1, TINY.L_max, TINY.d_s)), np.random.default_rng(0))
        x_a, _ = F.euler_sample(policy, policy.encoder(["wave arm slow"]), hist, 10, 1.0, np.random.default_rng(1))
        return float(np.linalg.norm(x_a - target_a))

    errors.append(gap(pol))
    for stop in (100, 300):
        F.pretrain(pol, data, data, F.PretrainConfig(**{**tcfg.__dict__, "steps": stop}), rng, log=rows.append,
                   start_step=0 if stop == 100 else 100)
        errors.append(gap(pol))
    assert errors[2] < errors[1] < errors[0]
    assert rows[-1]["val_loss"] <= 0.5 * rows[0]["val_loss"]
    assert all(np.isfinite(r["val_loss"]) for r in rows)
