import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advens import attacks
from advens.attacks import AttackConfig, attack, project_linf, transfer_attack
from advens.autodiff import LossKind
from advens.data import Dataset
from advens.models import Ensemble, ModelParams, init_params, mlp


def linear(W, b=None):
    W = np.asarray(W, dtype=float)
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=float)
    return ModelParams(mlp(W.shape[0], (), W.shape[1]), [W, b])


def logistic(w):
    """Two-class model with logits (w.x, -w.x)."""
    w = np.asarray(w, dtype=float)
    return linear(np.stack([w, -w], axis=1))


def logistic_grad(w, x, t):
    """Closed-form input gradient of -log p_t for the logistic model above."""
    z = float(np.dot(w, x))
    p0 = 1.0 / (1.0 + np.exp(-2 * z))
    return -(1 - p0) * 2 * np.asarray(w) if t == 0 else p0 * 2 * np.asarray(w)


def test_project_examples():
    np.testing.assert_array_equal(project_linf([0.75], [0.5], 0.1), [0.6])
    np.testing.assert_array_equal(project_linf([0.55], [0.5], 0.1), [0.55])
    np.testing.assert_array_equal(project_linf([-0.2], [0.05], 0.1, (0.0, 1.0)), [0.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32), st.floats(0.0, 2.0), st.booleans())
def test_project_idempotent_and_contracting(seed, delta, clamp):
    rng = np.random.default_rng(seed)
    x_nom = rng.uniform(0, 1, 6)
    x = x_nom + rng.normal(0, 1.5, 6)
    dom = (0.0, 1.0) if clamp else None
    p = project_linf(x, x_nom, delta, dom)
    assert np.array_equal(project_linf(p, x_nom, delta, dom), p)
    dist = np.abs(p - x_nom).max()
    assert dist <= min(np.abs(x - x_nom).max(), delta) + 1e-15


def test_config_defaults():
    assert AttackConfig(0.1, steps=5).eta == pytest.approx(0.05)
    assert attacks.pgd(0.1, 5).eta == pytest.approx(0.025)
    assert AttackConfig(0.1).sigma == pytest.approx(0.05)
    assert AttackConfig(0.0).sigma == 0.0
    with pytest.raises(ValueError):
        AttackConfig(0.1, steps=0)
    with pytest.raises(ValueError):
        AttackConfig(0.1, rule="adam", beta1=1.0)


def test_logistic_linear_fgsm_oracle():
    w, x = np.array([1.0, 0.0]), np.array([[0.2, 0.0]])
    target = Ensemble([logistic(w)])
    g = logistic_grad(w, x[0], 0)
    assert np.sign(g).tolist() == [-1.0, 0.0]
    cfg = AttackConfig(0.3, steps=1, step_size=0.3, init_sigma=0.0, rule="sign")
    res = attack(target, x, [0], cfg)
    np.testing.assert_allclose(res.x_adv, [[-0.1, 0.0]], atol=1e-15)
    assert res.x_adv[0, 1] == 0.0
    assert res.success[0] and res.predictions[0] == 1


def test_single_step_sign_is_fgsm():
    target = Ensemble([init_params(mlp(4, (8,), 3), 2)])
    x = np.random.default_rng(0).standard_normal((5, 4))
    y = np.array([0, 1, 2, 0, 1])
    a = attack(target, x, y, AttackConfig(0.2, steps=1, step_size=0.2, init_sigma=0.0))
    b = attacks.fgsm(target, x, y, 0.2)
    np.testing.assert_array_equal(a.x_adv, b.x_adv)


def test_first_adam_step_is_sign_step():
    target = Ensemble([init_params(mlp(4, (8,), 3), 3)])
    x = np.random.default_rng(1).standard_normal((6, 4))
    y = np.arange(6) % 3
    cfg = attacks.pgd(1.0, 1, init_sigma=0.0, step_size=0.01)
    res = attack(target, x, y, cfg)
    sign_cfg = AttackConfig(1.0, steps=1, step_size=0.01, init_sigma=0.0)
    ref = attack(target, x, y, sign_cfg)
    np.testing.assert_allclose(res.x_adv - x, ref.x_adv - x, rtol=1e-3, atol=1e-12)


def test_sigma_zero_sign_attack_is_deterministic():
    target = Ensemble([init_params(mlp(4, (8,), 3), 4)])
    x = np.random.default_rng(2).standard_normal((5, 4))
    cfg = AttackConfig(0.3, steps=6, init_sigma=0.0)
    assert attack(target, x, [0] * 5, cfg).x_adv.tobytes() == attack(target, x, [0] * 5, cfg).x_adv.tobytes()


def test_noise_stream_depends_on_example_index_only():
    target = Ensemble([init_params(mlp(3, (4,), 2), 5)])
    x = np.random.default_rng(3).standard_normal((4, 3))
    cfg = AttackConfig(0.2, steps=3)
    whole = attack(target, x, [0, 1, 0, 1], cfg, rng_seed=9).x_adv
    part = attack(target, x[2:], [0, 1], cfg, rng_seed=9, indices=[2, 3]).x_adv
    np.testing.assert_array_equal(whole[2:], part)


def _random_case(rng):
    dim, classes = int(rng.integers(2, 5)), int(rng.integers(2, 4))
    k = int(rng.integers(1, 3))
    members = [init_params(mlp(dim, (int(rng.integers(2, 6)),), classes), int(s)) for s in rng.integers(0, 999, k)]
    rule = ["sign", "gradient", "adam"][int(rng.integers(3))]
    kind = list(LossKind)[int(rng.integers(3))]
    delta = float(rng.uniform(0.01, 1.0))
    clamp = (0.0, 1.0) if rng.random() < 0.5 else None
    cfg = AttackConfig(delta, steps=int(rng.integers(1, 6)), rule=rule, loss_kind=kind, domain_clamp=clamp,
                       step_size=float(rng.uniform(0.01, 2.0)) if rng.random() < 0.3 else None)
    x = rng.uniform(0, 1, (3, dim)) if clamp else rng.normal(0, 2, (3, dim))
    mode = "logit" if rng.random() < 0.3 else "probability"
    return Ensemble(members, mode), x, rng.integers(0, classes, 3), cfg


def test_threat_model_invariants_random_runs():
    rng = np.random.default_rng(2024)
    for i in range(300):
        target, x, y, cfg = _random_case(rng)
        res = attack(target, x, y, cfg, rng_seed=i)
        assert np.abs(res.x_adv - x).max() <= cfg.delta + 1e-12
        if cfg.domain_clamp:
            assert res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0


def test_margin_flag_consistency():
    rng = np.random.default_rng(7)
    for i in range(100):
        target, x, y, cfg = _random_case(rng)
        cfg = attacks.pgd(cfg.delta, cfg.steps, loss_kind=LossKind.MARGIN)
        res = attack(Ensemble(target.members, "logit"), x, y, cfg, rng_seed=i)
        final_margin = -res.losses[-1]
        assert np.all(res.success[final_margin < 0])


def test_loss_trace_has_every_iterate():
    target = Ensemble([init_params(mlp(3, (4,), 2), 1)])
    res = attack(target, np.zeros((2, 3)), [0, 1], AttackConfig(0.1, steps=4))
    assert res.losses.shape == (5, 2) and len(res.loss_trace) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_aborts_example():
    m = init_params(mlp(2, (3,), 2), 1)
    m.arrays[0][0, 0] = np.inf
    target = Ensemble([m])
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    res = attack(target, x, [0, 1], AttackConfig(0.1, steps=2, init_sigma=0.0))
    assert res.aborted[0]


def test_transfer_single_member_strategies_agree():
    m = init_params(mlp(3, (5,), 3), 2)
    x = np.random.default_rng(4).standard_normal((4, 3))
    cfg = AttackConfig(0.2, steps=4)
    outs = [transfer_attack([m], x, [0, 1, 2, 0], cfg, s, rng_seed=3).x_adv
            for s in (attacks.RANDOM_MEMBER, attacks.MEAN_LOSS, attacks.MAX_LOSS)]
    assert outs[0].tobytes() == outs[1].tobytes() == outs[2].tobytes()


def test_transfer_duplicate_members_mean_loss():
    m = init_params(mlp(3, (5,), 3), 2)
    x = np.random.default_rng(5).standard_normal((4, 3))
    cfg = AttackConfig(0.2, steps=4)
    one = transfer_attack([m], x, [0, 1, 2, 0], cfg, attacks.MEAN_LOSS, rng_seed=3).x_adv
    two = transfer_attack([m, m], x, [0, 1, 2, 0], cfg, attacks.MEAN_LOSS, rng_seed=3).x_adv
    np.testing.assert_allclose(two, one, atol=1e-15)


def test_transfer_mean_loss_gradient_closed_form():
    w1, w2 = np.array([1.0, 0.5]), np.array([-0.7, 0.3])
    x = np.array([[0.2, -0.4]])
    # gradient rule with a tiny step reveals the ascent direction itself
    eta = 1e-6
    cfg = AttackConfig(1.0, steps=1, step_size=eta, init_sigma=0.0, rule="gradient")
    res = transfer_attack([logistic(w1), logistic(w2)], x, [0], cfg, attacks.MEAN_LOSS)
    expected = 0.5 * (logistic_grad(w1, x[0], 0) + logistic_grad(w2, x[0], 0))
    np.testing.assert_allclose((res.x_adv[0] - x[0]) / eta, expected, rtol=1e-9)


def test_transfer_max_loss_follows_worse_member():
    w1, w2 = np.array([2.0, 0.0]), np.array([0.0, -0.5])
    x = np.array([[0.3, 0.3]])
    cfg = AttackConfig(1.0, steps=1, step_size=1e-6, init_sigma=0.0, rule="gradient")
    res = transfer_attack([logistic(w1), logistic(w2)], x, [0], cfg, attacks.MAX_LOSS)
    # member 2 has the larger loss at x (its margin is negative)
    np.testing.assert_allclose((res.x_adv[0] - x[0]) / 1e-6, logistic_grad(w2, x[0], 0), rtol=1e-9)


def test_random_member_invariants():
    members = [init_params(mlp(3, (4,), 2), s) for s in range(3)]
    x = np.random.default_rng(6).uniform(0, 1, (5, 3))
    cfg = AttackConfig(0.15, steps=5, domain_clamp=(0, 1))
    a = transfer_attack(members, x, [0, 1, 0, 1, 0], cfg, attacks.RANDOM_MEMBER, rng_seed=11)
    b = transfer_attack(members, x, [0, 1, 0, 1, 0], cfg, attacks.RANDOM_MEMBER, rng_seed=11)
    assert a.x_adv.tobytes() == b.x_adv.tobytes()
    assert np.abs(a.x_adv - x).max() <= 0.15 + 1e-12


def test_strongest_attack_on_constant_model():
    m = linear(np.zeros((3, 3)), [0.0, 1.0, 0.0])
    ds = Dataset(np.random.default_rng(0).standard_normal((20, 3)), np.arange(20) % 3, 3)
    out = attacks.strongest_attack(Ensemble([m]), ds, attacks.pgd(0.1, 1), start_steps=4, max_steps=64)
    assert out["steps"] == [4, 8]
    assert out["accuracy"][0] == out["accuracy"][1] == pytest.approx(7 / 20)


def test_strongest_attack_envelope_nonincreasing():
    target = Ensemble([init_params(mlp(4, (8,), 3), 8)])
    rng = np.random.default_rng(1)
    ds = Dataset(rng.standard_normal((30, 4)), rng.integers(0, 3, 30), 3)
    out = attacks.strongest_attack(target, ds, attacks.pgd(0.3, 1), start_steps=1, max_steps=16, tol=-1.0)
    assert out["steps"] == [1, 2, 4, 8, 16]
    env = out["envelope"]
    assert all(b <= a for a, b in zip(env, env[1:]))
    assert out["final"] == env[-1] == min(out["accuracy"])
