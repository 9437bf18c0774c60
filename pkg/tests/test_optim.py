import numpy as np
import pytest

from aero import qrnn
from aero.optim import (AdamState, AeroQuantileState, AeroSharedState, NonFiniteError,
                        adam_step, adversarial_gradient, aero_quantile_step, aero_shared_step,
                        redistribute_momentum, sgd_step)
from aero.qrnn import QrnnConfig
from aero.tensor import ShapeError


def tiny_setup(seed=0, n=4, **cfg_kw):
    kw = dict(feature_dim=5, conv1_channels=2, conv2_channels=2, kernel_size=3, hidden_dim=3,
              horizon=2)
    kw.update(cfg_kw)
    cfg = QrnnConfig(**kw)
    rng = np.random.default_rng(seed)
    params = qrnn.init_params(cfg, rng)
    x = rng.normal(size=(n, cfg.feature_dim))
    y = rng.normal(size=(n, cfg.horizon))
    return params, x, y


def natural_grads(params, x, y, input_grad=False):
    _, cache = qrnn.forward(params, x, return_cache=True)
    return qrnn.backward_quantile_gradients(cache, params, y, input_grad=input_grad)


# --- baselines ---------------------------------------------------------------

def test_sgd_arithmetic_and_null_gradient():
    theta = np.array([1.0])
    sgd_step(theta, np.array([2.0]), 0.1)
    assert theta[0] == pytest.approx(0.8, abs=1e-15)
    before = theta.copy()
    sgd_step(theta, np.zeros(1), 0.1)
    np.testing.assert_array_equal(theta, before)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(np.zeros(2), np.zeros(3), 0.1)


def test_adam_null_gradient_leaves_params():
    theta = np.array([0.3, -1.2])
    adam_step(theta, np.zeros(2), AdamState(lr=0.01))
    np.testing.assert_allclose(theta, [0.3, -1.2], atol=1e-15)


def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0, 3.0])
    st = AdamState(lr=0.01)
    theta = np.zeros(3)
    adam_step(theta, g, st)
    m_hat = (1 - 0.9) * g / (1 - 0.9)
    v_hat = (1 - 0.999) * g ** 2 / (1 - 0.999)
    np.testing.assert_allclose(theta, -0.01 * m_hat / (np.sqrt(v_hat) + 1e-8), atol=1e-12)


# --- AERO-Shared -------------------------------------------------------------

def test_shared_without_noise_or_momentum_is_sgd():
    rng = np.random.default_rng(0)
    g = rng.normal(size=6)
    a, b = np.ones(6), np.ones(6)
    aero_shared_step(a, g, AeroSharedState(lr=0.1, noise=0.0, momentum=0.0), rng)
    sgd_step(b, g, 0.1)
    np.testing.assert_array_equal(a, b)


def test_shared_without_noise_is_classical_momentum():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 4))
    theta, ref, m = np.zeros(4), np.zeros(4), np.zeros(4)
    st = AeroSharedState(lr=0.05, noise=0.0, momentum=0.8)
    for g in grads:
        aero_shared_step(theta, g, st, rng)
        m = 0.8 * m + 0.2 * g
        ref = ref - 0.05 * m
    np.testing.assert_allclose(theta, ref, atol=1e-15)


def test_shared_matches_scripted_replay():
    grads = np.random.default_rng(1).normal(size=(6, 5))
    theta = np.zeros(5)
    st = AeroSharedState(lr=0.05, noise=0.1, momentum=0.9)
    run_rng = np.random.default_rng(42)
    for g in grads:
        aero_shared_step(theta, g, st, run_rng)

    replay_rng = np.random.default_rng(42)
    ref, m = np.zeros(5), np.zeros(5)
    for g in grads:
        g_prime = g + 0.1 * replay_rng.standard_normal(5)
        m = 0.9 * m + (1 - 0.9) * g_prime
        ref = ref - 0.05 * m
    np.testing.assert_allclose(theta, ref, rtol=0, atol=1e-12)


def test_shared_adam_base_runs_and_rejects_nan():
    theta = np.zeros(3)
    st = AeroSharedState(lr=0.01, noise=0.0, momentum=0.5, base="adam")
    aero_shared_step(theta, np.ones(3), st, np.random.default_rng(0))
    assert np.all(theta < 0)
    with pytest.raises(NonFiniteError):
        aero_shared_step(theta, np.array([1.0, np.nan, 0.0]), st, np.random.default_rng(0))


# --- adversarial gradient ----------------------------------------------------

def test_adversarial_gradient_zero_eps_is_natural():
    params, x, y = tiny_setup()
    grads = natural_grads(params, x, y)
    for i in range(3):
        g_adv = adversarial_gradient(params, x, y, i, 0.0)
        assert g_adv.tobytes() == grads[i].tobytes()


def test_adversarial_gradient_flat_input_region():
    params, x, y = tiny_setup()
    grads = natural_grads(params, x, y)
    g_adv = adversarial_gradient(params, x, y, 1, 0.5, input_grad=np.zeros_like(x))
    np.testing.assert_array_equal(g_adv, grads[1])


def test_input_gradient_matches_finite_differences():
    params, x, y = tiny_setup(seed=3)
    _, xg = natural_grads(params, x, y, input_grad=True)
    h = 1e-6
    for i, q in enumerate(params.config.quantiles):
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num[idx] = (qrnn.pinball_loss(qrnn.forward(params, xp)[i], y, q)
                        - qrnn.pinball_loss(qrnn.forward(params, xm)[i], y, q)) / (2 * h)
        np.testing.assert_allclose(xg[i], num, atol=1e-7)


def test_adversarial_gradient_matches_manual_replay():
    params, x, y = tiny_setup(seed=5)
    _, xg = natural_grads(params, x, y, input_grad=True)
    st = AeroQuantileState(3)
    g_adv = adversarial_gradient(params, x, y, 2, 0.01, state=st)
    assert st.grad_eval_count == 2
    x_manual = x + 0.01 * np.sign(xg[2])
    ref = natural_grads(params, x_manual, y)[2]
    np.testing.assert_allclose(g_adv, ref, rtol=0, atol=1e-10)


# --- momentum redistribution -------------------------------------------------

def test_redistribute_examples():
    vs = [np.array([3.0, 4.0]), np.array([0.0, 1.0])]
    out = redistribute_momentum(vs, 6.0)
    for a, b in zip(out, vs):
        np.testing.assert_array_equal(a, b)
    zeros = [np.zeros(2), np.zeros(2)]
    for a in redistribute_momentum(zeros, 3.0):
        assert not a.any()
    with pytest.raises(ValueError):
        redistribute_momentum(vs, -1.0)


def test_redistribute_hits_target_and_keeps_directions():
    rng = np.random.default_rng(0)
    vs = [rng.normal(size=7) for _ in range(3)]
    out = redistribute_momentum(vs, 5.0)
    assert sum(np.linalg.norm(v) for v in out) == pytest.approx(5.0, abs=1e-12)
    for a, b in zip(out, vs):
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos == pytest.approx(1.0, abs=1e-14)


# --- AERO quantile step ------------------------------------------------------

def test_lambda_one_energy_is_redirect_energy():
    params, x, y = tiny_setup()
    st = AeroQuantileState(3, lr=0.01, energy_mix=1.0)
    tr = aero_quantile_step(params, x, y, st)
    assert tr.energy == tr.redirect_sq


def test_full_degeneration_is_per_quantile_sgd():
    params, x, y = tiny_setup(seed=2)
    ref = params.copy()
    st = AeroQuantileState(3, lr=0.05, momentum=0.0, energy_rate=0.0, adv_eps=0.0,
                           coop_strength=0.0, anticipate=False)
    for _ in range(5):
        tr = aero_quantile_step(params, x, y, st)
        for g in natural_grads(ref, x, y):
            sgd_step(ref.flat, g, 0.05)
        assert tr.alignment == [1.0, 1.0, 1.0]
    assert params.flat.tobytes() == ref.flat.tobytes()


def scripted_step(params, x, y, velocities, lam, mu, kappa, eps, coop, lrs):
    """Independent straight-line recomputation of one per-quantile AERO step."""
    nq = params.config.n_quantiles
    preds = qrnn.forward(params, x)
    grads, xgrads = natural_grads(params, x, y, input_grad=True)
    out = {"R": [], "E": [], "eta": [], "v": []}
    new_v = []
    for q in range(nq):
        G = grads[q]
        x_adv = x + eps * np.sign(xgrads[q])
        G_adv = natural_grads(params, x_adv, y)[q]
        p = preds[q]
        delta = np.mean((p - np.mean(p)) ** 2)
        u = G_adv / np.linalg.norm(G_adv)
        d = G_adv + delta * u
        R = (np.dot(d, G) / np.dot(G, G)) * G
        for j in range(nq):
            if j != q:
                R = R + coop[q][j] * grads[j]
        E = lam * np.dot(R, R) + (1 - lam) * np.dot(G, G)
        eta = lrs[q] / (1 + kappa * E)
        v = mu * velocities[q] + (1 - mu) * R
        out["R"].append(R)
        out["E"].append(E)
        out["eta"].append(eta)
        new_v.append(v)
    theta = params.flat.copy()
    for q in range(nq):
        theta = theta - out["eta"][q] * new_v[q]
    out["v"] = new_v
    out["theta"] = theta
    return out


def test_step_matches_scripted_replay():
    params, x, y = tiny_setup(seed=7, feature_dim=3, conv1_channels=1, conv2_channels=1,
                              kernel_size=1, hidden_dim=1, horizon=1)
    coop = [[0.0, 0.03, 0.07], [0.02, 0.0, 0.05], [0.04, 0.01, 0.0]]
    lrs = (0.05, 0.04, 0.03)
    st = AeroQuantileState(3, lr=lrs, energy_mix=0.3, momentum=0.6, energy_rate=0.7,
                           adv_eps=0.02, coop=np.array(coop))
    velocities = [np.zeros(params.size) for _ in range(3)]
    for _ in range(3):
        expected = scripted_step(params, x, y, velocities, 0.3, 0.6, 0.7, 0.02, coop, lrs)
        tr = aero_quantile_step(params, x, y, st, keep_vectors=True)
        for q in range(3):
            np.testing.assert_allclose(tr.redirects[q], expected["R"][q], rtol=0, atol=1e-10)
            assert tr.energy[q] == pytest.approx(expected["E"][q], abs=1e-10)
            assert tr.lr[q] == pytest.approx(expected["eta"][q], abs=1e-10)
            assert tr.velocity_norm[q] == pytest.approx(np.linalg.norm(expected["v"][q]),
                                                        abs=1e-10)
        assert tr.grad_evals == [2, 2, 2]
        np.testing.assert_allclose(params.flat, expected["theta"], rtol=0, atol=1e-10)
        velocities = expected["v"]


def test_grad_eval_count_is_two_per_quantile():
    params, x, y = tiny_setup()
    st = AeroQuantileState(3, lr=0.01)
    for k in range(1, 4):
        aero_quantile_step(params, x, y, st)
        assert st.grad_eval_count == 2 * 3 * k


@pytest.mark.parametrize("lam", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_energy_bracket(lam):
    params, x, y = tiny_setup(seed=1)
    st = AeroQuantileState(3, lr=0.02, energy_mix=lam, energy_rate=0.5)
    for _ in range(20):
        tr = aero_quantile_step(params, x, y, st)
        for e, r_sq, g_sq in zip(tr.energy, tr.redirect_sq, tr.grad_sq):
            assert min(r_sq, g_sq) <= e <= max(r_sq, g_sq)
            assert e >= 0


def test_redistribution_conserves_total_momentum():
    params, x, y = tiny_setup(seed=4)
    st = AeroQuantileState(3, lr=0.02, redistribute=True)
    for _ in range(30):
        tr = aero_quantile_step(params, x, y, st)
        assert abs(tr.momentum_total - st.momentum_target) / st.momentum_target < 1e-6


def test_clamp_alignment_zeroes_negative_coefficients():
    params, x, y = tiny_setup(seed=6)
    st = AeroQuantileState(3, lr=0.01, adv_eps=5.0, clamp_alignment=True, coop_strength=0.0)
    for _ in range(10):
        tr = aero_quantile_step(params, x, y, st)
        assert all(a >= 0 for a in tr.alignment)


def test_determinism():
    runs = []
    for _ in range(2):
        params, x, y = tiny_setup(seed=9)
        st = AeroQuantileState(3, lr=0.03, redistribute=True, energy_rate=0.2)
        for _ in range(5):
            aero_quantile_step(params, x, y, st)
        runs.append(params.flat.tobytes())
    assert runs[0] == runs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_step_names_stage():
    params, x, y = tiny_setup()
    st = AeroQuantileState(3, lr=0.01)
    y = y.copy()
    y[0, 0] = np.nan
    x = x.copy()
    x[0, 0] = np.inf
    with pytest.raises(NonFiniteError) as info:
        aero_quantile_step(params, x, y, st)
    assert info.value.stage
