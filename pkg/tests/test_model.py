import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import betaln

from mmnlvi import model as m
from mmnlvi.model import ChoiceDataset, GlobalParams, LocalParams, MenuObservation, PriorConfig


def random_corr(rng, K, scale=1.0):
    a = rng.normal(size=(K, K + 2)) * scale
    s = a @ a.T + 0.1 * np.eye(K)
    d = np.sqrt(np.diag(s))
    return s / np.outer(d, d)


def random_dataset(rng, N=4, T=3, J=4, L=2, K=2, ragged=False, holes=False):
    persons = []
    for n in range(N):
        menus = []
        for t in range(int(rng.integers(1, T + 1)) if ragged else T):
            avail = np.ones(J, bool)
            if holes:
                avail = rng.random(J) < 0.7
                avail[rng.integers(J)] = True
            y = int(rng.choice(np.flatnonzero(avail)))
            menus.append(MenuObservation(rng.random((J, L)), rng.random((J, K)), avail, y))
        persons.append(menus)
    return ChoiceDataset.from_persons(persons)


# -- utilities and kernel ----------------------------------------------------

def test_utility_zero_params():
    menu = MenuObservation(np.ones((3, 2)), np.ones((3, 1)), np.ones(3, bool), 0)
    np.testing.assert_array_equal(m.systematic_utility(np.zeros(2), np.zeros(1), menu), np.zeros(3))


def test_utility_hand_example():
    menu = MenuObservation([[0.5]], [[0.25]], [True], 0)
    assert m.systematic_utility(np.array([2.0]), np.array([-1.0]), menu)[0] == 0.75


def test_utility_matches_dot_products():
    rng = np.random.default_rng(0)
    menu = MenuObservation(rng.random((5, 3)), rng.random((5, 4)), np.ones(5, bool), 2)
    a, b = rng.normal(size=3), rng.normal(size=4)
    expected = [sum(a[i] * menu.xf[j, i] for i in range(3)) + sum(b[i] * menu.xr[j, i] for i in range(4))
                for j in range(5)]
    np.testing.assert_allclose(m.systematic_utility(a, b, menu), expected, atol=1e-12, rtol=0)


def test_utility_dimension_mismatch():
    menu = MenuObservation(np.ones((3, 2)), np.ones((3, 1)), np.ones(3, bool), 0)
    with pytest.raises(ValueError):
        m.systematic_utility(np.zeros(3), np.zeros(1), menu)


def test_mnl_equal_utilities():
    assert m.mnl_logprob(np.zeros(5), np.ones(5, bool), 3) == pytest.approx(np.log(0.2), abs=1e-15)


def test_mnl_single_available():
    avail = np.array([False, True, False])
    assert m.mnl_logprob(np.array([5.0, -1.0, 3.0]), avail, 1) == 0.0


def test_mnl_softmax_oracle():
    v = np.array([1.0, 0.5, -0.2, 0.0, 0.3])
    expected = np.log(np.exp(v[0]) / np.exp(v).sum())
    assert m.mnl_logprob(v, np.ones(5, bool), 0) == pytest.approx(expected, abs=1e-12)


def test_mnl_unavailable_choice():
    with pytest.raises(ValueError):
        m.mnl_logprob(np.zeros(3), np.array([True, False, True]), 1)


@settings(max_examples=100)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.integers(0, 2**31 - 1),
       st.floats(-50, 50))
def test_mnl_normalised_and_shift_invariant(vs, seed, shift):
    v = np.array(vs)
    rng = np.random.default_rng(seed)
    avail = rng.random(v.size) < 0.6
    avail[0] = True
    total = sum(np.exp(m.mnl_logprob(v, avail, j)) for j in np.flatnonzero(avail))
    assert abs(total - 1.0) <= 1e-12
    for j in np.flatnonzero(avail):
        assert abs(m.mnl_logprob(v + shift, avail, j) - m.mnl_logprob(v, avail, j)) <= 1e-12


# -- covariance pieces -------------------------------------------------------

def test_omega_identity_psi():
    tau = np.array([0.5, 2.0, 3.0])
    np.testing.assert_allclose(m.omega_from(tau, np.eye(3)), np.diag(tau**2))


def test_omega_hand_example():
    psi = np.array([[1.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(m.omega_from(np.array([1.0, 2.0]), psi), [[1.0, 1.0], [1.0, 4.0]])


def test_omega_rejects_non_pd():
    psi = np.array([[1.0, 1.2], [1.2, 1.0]])
    with pytest.raises(ValueError):
        m.omega_from(np.ones(2), psi)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_omega_pd_and_round_trip(K, seed):
    rng = np.random.default_rng(seed)
    psi = random_corr(rng, K)
    tau = 0.1 + 3 * rng.random(K)
    omega = m.omega_from(tau, psi)
    assert np.linalg.eigvalsh(omega).min() > 0
    np.testing.assert_allclose(np.diag(omega), tau**2, rtol=1e-14)
    tau2, psi2 = m.split_omega(omega)
    np.testing.assert_allclose(tau2, tau, atol=1e-12, rtol=0)
    np.testing.assert_allclose(psi2, psi, atol=1e-12, rtol=0)


# -- densities ----------------------------------------------------------------

def test_lkj_uniform_at_nu_one():
    rng = np.random.default_rng(3)
    a, b = random_corr(rng, 4), random_corr(rng, 4)
    assert m.lkj_logpdf(a, 1.0) - m.lkj_logpdf(b, 1.0) == 0.0


@pytest.mark.parametrize("nu", [1.0, 2.0, 4.5])
def test_lkj_k2_matches_scaled_beta(nu):
    # off-diagonal r = 2x - 1 with x ~ Beta(nu, nu)
    for r in (-0.7, 0.0, 0.35):
        psi = np.array([[1.0, r], [r, 1.0]])
        expected = stats.beta(nu, nu).logpdf((r + 1) / 2) - np.log(2)
        assert m.lkj_logpdf(psi, nu) == pytest.approx(expected, abs=1e-12)


def test_lkj_k3_integrates_to_one():
    rng = np.random.default_rng(11)
    n = 1_000_000
    u = rng.uniform(-1, 1, (n, 3))
    a, b, c = u.T
    det = 1 + 2 * a * b * c - a * a - b * b - c * c
    ok = det > 0
    nu = 2.0
    dens = np.where(ok, np.exp((nu - 1) * np.log(np.where(ok, det, 1.0)) - m.lkj_log_normalizer(3, nu)), 0)
    est = 8 * dens.mean()
    se = 8 * dens.std() / np.sqrt(n)
    assert abs(est - 1.0) < 4 * se


def test_half_cauchy_at_zero():
    assert m.half_cauchy_logpdf(np.array([0.0]), np.array([10.0])) == pytest.approx(np.log(2 / (np.pi * 10)))


def test_half_cauchy_matches_scipy():
    tau = np.array([0.3, 2.0, 17.0])
    sig = np.array([1.0, 10.0, 2.5])
    assert m.half_cauchy_logpdf(tau, sig) == pytest.approx(stats.halfcauchy(scale=sig).logpdf(tau).sum())


def test_half_cauchy_out_of_support():
    with pytest.raises(ValueError):
        m.half_cauchy_logpdf(np.array([-1.0]), np.array([1.0]))


def test_mvn_standard_at_origin():
    K = 4
    assert m.mvn_logpdf(np.zeros(K), np.zeros(K), np.eye(K)) == pytest.approx(-K / 2 * np.log(2 * np.pi))


def test_mvn_matches_scipy():
    rng = np.random.default_rng(2)
    cov = random_corr(rng, 3) * 2.0
    x = rng.normal(size=(6, 3))
    mu = rng.normal(size=3)
    np.testing.assert_allclose(m.mvn_logpdf(x, mu, cov), stats.multivariate_normal(mu, cov).logpdf(x))


# -- joint ---------------------------------------------------------------------

def _standard_prior(L, K):
    return PriorConfig(np.zeros(L), np.eye(L), np.zeros(K), np.eye(K), np.ones(K), 1.0)


def test_log_joint_single_person_closed_form():
    J, L, K = 4, 1, 2
    menu = MenuObservation(np.zeros((J, L)), np.zeros((J, K)), np.ones(J, bool), 1)
    ds = ChoiceDataset.from_persons([[menu]])
    g = GlobalParams(np.zeros(L), np.zeros(K), np.ones(K), np.eye(K))
    prior = _standard_prior(L, K)
    got = m.log_joint(ds, g, LocalParams(np.zeros((1, K))), prior)
    expected = (
        stats.norm.logpdf(0.0)  # alpha
        + 2 * stats.norm.logpdf(0.0)  # zeta
        + 2 * stats.halfcauchy.logpdf(1.0)  # tau
        + (-np.log(2.0) - betaln(1.0, 1.0))  # LKJ(1) for K=2 is uniform on (-1, 1)
        + 2 * stats.norm.logpdf(0.0)  # beta_1 | zeta, Omega = I
        + np.log(1.0 / J)
    )
    assert got == pytest.approx(expected, abs=1e-12)


def _likelihood_part(ds, g, betas, prior):
    return m.log_joint(ds, g, LocalParams(betas), prior) - m.log_prior_globals(g, prior) \
        - np.sum(m.mvn_logpdf(betas, g.zeta, g.omega))


def test_doubling_dataset_doubles_likelihood():
    rng = np.random.default_rng(5)
    one = random_dataset(rng, N=1, T=3)
    two = ChoiceDataset.concat([one, one])
    g = GlobalParams(rng.normal(size=2), rng.normal(size=2), np.array([0.5, 1.5]), random_corr(rng, 2))
    prior = PriorConfig.default(2, 2)
    b = rng.normal(size=(1, 2))
    single = _likelihood_part(one, g, b, prior)
    double = _likelihood_part(two, g, np.vstack([b, b]), prior)
    assert double == 2 * single


def test_log_joint_term_by_term():
    rng = np.random.default_rng(9)
    ds = random_dataset(rng, N=5, T=4, J=3, L=2, K=2, ragged=True, holes=True)
    g = GlobalParams(rng.normal(size=2), rng.normal(size=2), np.array([0.7, 1.3]), random_corr(rng, 2))
    betas = rng.normal(size=(5, 2))
    prior = PriorConfig(rng.normal(size=2), np.diag([2.0, 3.0]), rng.normal(size=2), np.diag([4.0, 1.0]),
                        np.array([10.0, 5.0]), 2.5)
    total = stats.multivariate_normal(prior.lambda0, prior.xi0).logpdf(g.alpha)
    total += stats.multivariate_normal(prior.mu0, prior.sigma0_cov).logpdf(g.zeta)
    total += stats.halfcauchy(scale=prior.sigma0).logpdf(g.tau).sum()
    r = g.psi[0, 1]
    total += stats.beta(2.5, 2.5).logpdf((r + 1) / 2) - np.log(2)
    omega = np.diag(g.tau) @ g.psi @ np.diag(g.tau)
    for n in range(ds.N):
        total += stats.multivariate_normal(g.zeta, omega).logpdf(betas[n])
        for menu in ds.person_menus(n):
            v = menu.xf @ g.alpha + menu.xr @ betas[n]
            total += v[menu.choice] - np.log(np.exp(v[menu.avail]).sum())
    got = m.log_joint(ds, g, LocalParams(betas), prior)
    assert got == pytest.approx(total, abs=1e-10)


def test_dropping_a_person_removes_its_terms():
    rng = np.random.default_rng(4)
    ds = random_dataset(rng, N=6, T=3)
    g = GlobalParams(rng.normal(size=2), rng.normal(size=2), np.array([1.0, 2.0]), random_corr(rng, 2))
    betas = rng.normal(size=(6, 2))
    prior = PriorConfig.default(2, 2)
    full = m.log_joint(ds, g, LocalParams(betas), prior)
    keep = np.arange(6) != 2
    reduced = m.log_joint(ds.subset(keep), g, LocalParams(betas[keep]), prior)
    person = ds.subset([2])
    own = m.mvn_logpdf(betas[2], g.zeta, g.omega) + m.loglik(person, g.alpha, betas[[2]])
    assert abs(full - reduced - own) <= 1e-10


def test_log_joint_shape_errors():
    rng = np.random.default_rng(0)
    ds = random_dataset(rng)
    g = GlobalParams(np.zeros(2), np.zeros(2), np.ones(2), np.eye(2))
    with pytest.raises(ValueError):
        m.log_joint(ds, g, LocalParams(np.zeros((3, 2))), PriorConfig.default(2, 2))


def test_global_params_reject_bad_support():
    with pytest.raises(ValueError):
        GlobalParams(np.zeros(1), np.zeros(2), np.array([1.0, -1.0]), np.eye(2))


# -- dataset and CSV -----------------------------------------------------------

def test_menu_requires_available_choice():
    with pytest.raises(m.DataError):
        MenuObservation(np.ones((2, 1)), np.ones((2, 1)), [True, False], 1)
    with pytest.raises(m.DataError):
        MenuObservation(np.ones((2, 1)), np.ones((2, 1)), [False, False], 0)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    ds = random_dataset(rng, N=5, T=4, J=3, L=2, K=3, ragged=True, holes=True)
    path = tmp_path / "d.csv"
    m.write_dataset_csv(ds, path)
    back = m.read_dataset_csv(path)
    for attr in ("xf", "xr", "avail", "choice", "n_menus", "person_ids"):
        a, b = getattr(ds, attr), getattr(back, attr)
        mask = ds.menu_mask
        if attr in ("xf", "xr", "avail", "choice"):
            a, b = a[mask], b[mask]
        np.testing.assert_array_equal(a, b)
    assert path.read_text().splitlines()[0] == "person_id,menu_id,alt_id,avail,chosen,xf_1,xf_2,xr_1,xr_2,xr_3"


def test_csv_errors_name_the_row(tmp_path):
    rng = np.random.default_rng(8)
    ds = random_dataset(rng, N=2, T=2, J=3, L=1, K=1)
    path = tmp_path / "d.csv"
    m.write_dataset_csv(ds, path)
    lines = path.read_text().splitlines()
    fields = lines[4].split(",")
    fields[4] = "1" if fields[4] == "0" else "0"
    lines[4] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(m.DataError, match="row"):
        m.read_dataset_csv(path)
