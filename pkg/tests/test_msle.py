import numpy as np
import pytest
from scipy.special import logsumexp, roots_hermitenorm

from mmnlvi import msle
from mmnlvi.autodiff import gradcheck
from mmnlvi.datagen import ScenarioSpec, simulate
from mmnlvi.model import ChoiceDataset, loglik
from mmnlvi.msle import (MsleConfig, MsleEstimate, conditional_betas, fit_msle, make_draws,
                         simulated_loglik, simulated_loglik_tape)
from mmnlvi.vi import DataArrays


def toy_k1(seed=0):
    return simulate(ScenarioSpec(3, 2, J=3, L=0, K=1, zeta=np.array([0.5]), tau=np.array([1.3]), seed=seed))[0]


def gh_person_logliks(ds, zeta, tau, n=64):
    """log int prod_t P(y_t | b) N(b; zeta, tau^2) db per person, Gauss-Hermite."""
    x, w = roots_hermitenorm(n)
    logw = np.log(w / np.sqrt(2 * np.pi))
    b = zeta + tau * x
    d = ds.xr[..., 0]  # (N, T, J)
    v = b[:, None, None, None] * d[None]
    onehot = ds.choice[..., None] == np.arange(ds.J)
    lp = ((v * onehot).sum(-1) - logsumexp(v, axis=-1)).sum(-1)  # (Q, N)
    return lp, logw, b


def test_zero_draws_rejected():
    with pytest.raises(ValueError):
        make_draws(3, 0, 2)
    with pytest.raises(ValueError):
        simulated_loglik(toy_k1(), np.zeros(0), np.zeros(1), np.eye(1), np.zeros((3, 0, 1)))
    with pytest.raises(ValueError):
        MsleConfig(n_draws=0).validate()


def test_degenerate_mixing_equals_mnl():
    ds, truth = simulate(ScenarioSpec(20, 3, J=4, L=2, K=3, seed=1))
    draws = make_draws(20, 50, 3)
    zeta = truth.globals.zeta
    val = simulated_loglik(ds, truth.globals.alpha, zeta, np.zeros((3, 3)), draws)
    ref = loglik(ds, truth.globals.alpha, np.tile(zeta, (20, 1)))
    assert abs(val - ref) < 1e-8


def test_single_draw_equals_likelihood_at_drawn_betas():
    ds, truth = simulate(ScenarioSpec(10, 3, J=4, L=2, K=3, seed=2))
    draws = make_draws(10, 1, 3, "pseudo", 5)
    chol = np.linalg.cholesky(truth.omega)
    betas = truth.globals.zeta + draws[:, 0] @ chol.T
    val = simulated_loglik(ds, truth.globals.alpha, truth.globals.zeta, chol, draws)
    assert val == pytest.approx(loglik(ds, truth.globals.alpha, betas), abs=1e-10)


def test_converges_to_gauss_hermite():
    ds = toy_k1()
    zeta, tau = 0.4, 1.1
    lp, logw, _ = gh_person_logliks(ds, zeta, tau)
    exact = logsumexp(lp + logw[:, None], axis=0).sum()
    draws = make_draws(3, 10**5, 1, "halton", 0)
    val = simulated_loglik(ds, np.zeros(0), np.array([zeta]), np.array([[tau]]), draws)
    assert abs(val - exact) < 1e-3


def test_tape_matches_numeric_and_gradcheck():
    ds, truth = simulate(ScenarioSpec(4, 2, J=3, L=1, K=2, seed=3))
    arrays = DataArrays(ds)
    draws = make_draws(4, 7, 2)
    rng = np.random.default_rng(0)
    P = {"alpha": rng.normal(size=1), "zeta": rng.normal(size=2), "chol.diag": rng.normal(size=2),
         "chol.off": rng.normal(size=1)}
    rep = gradcheck(lambda tape, L: simulated_loglik_tape(tape, L, arrays, draws), P)
    assert rep.worst <= 1e-3
    from mmnlvi.autodiff import Tape
    tape = Tape()
    val = simulated_loglik_tape(tape, {k: tape.const(v) for k, v in P.items()}, arrays, draws).value
    ref = simulated_loglik(ds, P["alpha"], P["zeta"], msle.chol_from(P["chol.diag"], P["chol.off"]), draws)
    assert float(val) == pytest.approx(ref, abs=1e-10)


def test_conditional_beta_no_menus_gives_zeta():
    ds, _ = simulate(ScenarioSpec(3, 2, J=3, L=1, K=2, seed=4))
    n_menus = ds.n_menus.copy()
    n_menus[1] = 0
    ds0 = ChoiceDataset(ds.xf, ds.xr, ds.avail, ds.choice, n_menus, validate=False)
    est = MsleEstimate(np.array([0.3]), np.array([0.5, -0.2]), np.array([[1.0, 0.0], [0.4, 0.8]]))
    out = conditional_betas(ds0, est, make_draws(3, 200, 2, "pseudo"))
    np.testing.assert_array_equal(out[1], est.zeta)


def test_conditional_beta_matches_quadrature():
    ds = toy_k1(1)
    est = MsleEstimate(np.zeros(0), np.array([0.2]), np.array([[0.9]]))
    out = conditional_betas(ds, est, make_draws(3, 10**5, 1, "halton", 2))
    lp, logw, b = gh_person_logliks(ds, 0.2, 0.9)
    w = np.exp(lp + logw[:, None] - logsumexp(lp + logw[:, None], axis=0))
    ref = (w * b[:, None]).sum(0)
    np.testing.assert_allclose(out[:, 0], ref, atol=1e-2)


def test_log_space_weights_equal_direct_weights():
    ds, _ = simulate(ScenarioSpec(5, 2, J=3, L=1, K=2, seed=5))
    est = MsleEstimate(np.array([0.1]), np.array([0.5, -0.5]), np.eye(2))
    draws = make_draws(5, 300, 2, "pseudo")
    arrays = DataArrays(ds)
    betas = est.zeta + draws @ est.omega_chol.T
    p = np.exp(msle._person_logprobs(arrays, np.arange(5), est.alpha, betas))
    direct = np.einsum("nr,nrk->nk", p / p.sum(1, keepdims=True), betas)
    np.testing.assert_allclose(conditional_betas(arrays, est, draws), direct, atol=1e-12, rtol=0)


@pytest.fixture(scope="module")
def small_fit():
    ds, truth = simulate(ScenarioSpec(150, 5, J=4, L=2, K=2, seed=6))
    cfg = MsleConfig(n_draws=50, max_iter=150, seed=1, record_timing=False, n_cond_draws=200)
    return ds, truth, cfg, fit_msle(ds, cfg)


def test_trace_non_decreasing(small_fit):
    _, _, _, (est, rep) = small_fit
    vals = [r[1] for r in rep.trace]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert len(vals) > 5
    np.linalg.cholesky(est.omega)
    assert rep.summary.means["beta"].shape == (150, 2)


def test_fit_deterministic(small_fit, tmp_path):
    ds, _, cfg, (est, rep) = small_fit
    est2, rep2 = fit_msle(ds, cfg)
    rep.save(tmp_path / "a.json")
    rep2.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    np.testing.assert_array_equal(est.betas, est2.betas)


def test_simulated_loglik_bit_exact():
    ds, truth = simulate(ScenarioSpec(30, 3, J=4, L=2, K=3, seed=7))
    chol = np.linalg.cholesky(truth.omega)
    a = simulated_loglik(ds, truth.globals.alpha, truth.globals.zeta, chol, make_draws(30, 100, 3, seed=3))
    b = simulated_loglik(ds, truth.globals.alpha, truth.globals.zeta, chol, make_draws(30, 100, 3, seed=3))
    assert a == b


def test_degenerate_truth_recovers_small_tau():
    # N * T = 10^4 with Omega = 0 in the generating process
    ds, _ = simulate(ScenarioSpec(1000, 10, J=4, L=1, K=2, tau=np.full(2, 1e-10), seed=8))
    est, rep = fit_msle(ds, MsleConfig(n_draws=50, max_iter=600, rel_tol=0.0, seed=2, n_cond_draws=50))
    assert np.all(est.tau <= 0.05), est.tau


def test_draw_count_stability_on_n500():
    ds, truth = simulate(ScenarioSpec(500, 5, seed=9))
    chol = np.linalg.cholesky(truth.omega)
    g = truth.globals
    a = simulated_loglik(ds, g.alpha, g.zeta, chol, make_draws(500, 1000, 5, seed=1), chunk=32)
    b = simulated_loglik(ds, g.alpha, g.zeta, chol, make_draws(500, 10000, 5, seed=1), chunk=4)
    assert abs(a - b) <= 1e-3 * abs(b)
