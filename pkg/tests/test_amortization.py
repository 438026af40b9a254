import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmnlvi import amortization as am
from mmnlvi import autodiff as ad
from mmnlvi.amortization import InferenceNetwork, encode, encode_menus, predict_out_of_sample
from mmnlvi.autodiff import Tape, gradcheck
from mmnlvi.datagen import ScenarioSpec, simulate
from mmnlvi.model import ChoiceDataset, PriorConfig
from mmnlvi.vi import DataArrays, FitConfig, VariationalState, draw_noise, elbo_terms, fit, n_offdiag


@pytest.fixture(scope="module")
def fitted():
    ds, truth = simulate(ScenarioSpec(60, 4, J=4, L=2, K=3, seed=11))
    rep = fit(ds, PriorConfig.default(2, 3), FitConfig(method="AVI2", max_epochs=40, lr=0.02, conv_filters=8,
                                                       hidden=10, record_timing=False, n_summary_draws=50))
    return ds, truth, rep


def test_menu_length_paper_shape():
    assert am.menu_length(5, 5, 3) == 50
    ds, _ = simulate(ScenarioSpec(3, 2, seed=0))
    enc = encode_menus(ds).reshape(3, 2, 50)
    np.testing.assert_array_equal(enc[..., :5].sum(-1), 1.0)
    np.testing.assert_array_equal(enc[..., -5:], 1.0)


def test_unavailable_covariates_zeroed_and_padding_empty():
    ds, _ = simulate(ScenarioSpec(2, 3, J=3, L=1, K=2, seed=1))
    ds.avail[0, 0, 2] = False
    ds.choice[0, 0] = 0
    ds.n_menus[1] = 2
    enc = encode_menus(ds).reshape(2, 3, -1)
    cov = enc[0, 0, 3:3 + 9].reshape(3, 3)
    np.testing.assert_array_equal(cov[2], 0.0)
    np.testing.assert_array_equal(enc[1, 2], 0.0)


def _random_person(rng, T, J=4, L=2, K=3):
    from mmnlvi.model import MenuObservation
    return [MenuObservation(rng.random((J, L)), rng.random((J, K)), np.ones(J, bool), int(rng.integers(J)))
            for _ in range(T)]


def _net_with_stats(rng, C=6, H=5, variant="AVI2"):
    net = InferenceNetwork(4, 3, 2, C, H, variant)
    params = net.init_params(rng)
    net.bn.running_mean = rng.normal(size=C)
    net.bn.running_var = rng.random(C) + 0.5
    net.finalize(params)
    return net


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    net = _net_with_stats(rng)
    person = _random_person(rng, 6)
    a = encode(net, person)
    b = encode(net, [person[i] for i in rng.permutation(6)])
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12, rtol=0)
    np.testing.assert_allclose(a.chol, b.chol, atol=1e-12, rtol=0)


def _pooled(net, person):
    ds = ChoiceDataset.from_persons([person])
    arrays = DataArrays(ds, with_encoding=True)
    tape = Tape()
    P = {k: tape.const(v) for k, v in net.weights.items()}
    h = ad.conv1d(tape.const(arrays.enc), P["net.conv.w"], P["net.conv.b"], net.E)
    return ad.maxpool(h, arrays.mask).value


def test_duplicated_menu_same_pooled_features():
    rng = np.random.default_rng(3)
    net = _net_with_stats(rng)
    person = _random_person(rng, 3)
    np.testing.assert_array_equal(_pooled(net, person), _pooled(net, person + [person[1]]))


def test_varying_menu_counts_pool_real_menus_only():
    rng = np.random.default_rng(4)
    net = _net_with_stats(rng)
    short, long = _random_person(rng, 2), _random_person(rng, 5)
    both = ChoiceDataset.from_persons([short, long])
    m, c = net.posterior_np(None, DataArrays(both, with_encoding=True))
    alone = encode(net, short)
    np.testing.assert_allclose(m[0], alone.mean, atol=1e-12)
    np.testing.assert_allclose(c[0], alone.chol, atol=1e-12)


def test_dimension_mismatch_rejected():
    rng = np.random.default_rng(5)
    net = _net_with_stats(rng)
    with pytest.raises(ValueError, match="dimension mismatch"):
        encode(net, _random_person(rng, 2, K=2))


@pytest.mark.parametrize("variant", ["AVI", "AVI2"])
def test_learnable_count_independent_of_n(variant):
    counts = set()
    for N in (10, 10**3, 10**5):
        net = InferenceNetwork(5, 5, 3, variant=variant)
        state = VariationalState(3, 5, N, variant, local=net)
        counts.add(state.n_learnable())
    assert len(counts) == 1


def test_avi2_adds_only_covariance_heads():
    K, H = 5, 64
    avi = InferenceNetwork(5, K, 3, 32, H, "AVI").n_learnable()
    avi2 = InferenceNetwork(5, K, 3, 32, H, "AVI2").n_learnable()
    shared = K + n_offdiag(K)
    heads = (H + 1) * K + (H + 1) * n_offdiag(K)
    assert avi2 == avi - shared + heads


@pytest.mark.parametrize("variant", ["AVI", "AVI2"])
def test_elbo_gradcheck_network(variant):
    ds, _ = simulate(ScenarioSpec(4, 2, J=3, L=1, K=2, seed=6))
    net = InferenceNetwork(3, 2, 1, 2, 3, variant)
    state = VariationalState(1, 2, 4, variant, local=net, seed=1)
    rng = np.random.default_rng(7)
    for k in state.params:
        state.params[k] = state.params[k] + 0.3 * rng.standard_normal(state.params[k].shape)
    batch = DataArrays(ds, with_encoding=True).batch()
    noise = draw_noise(state, 4, 1, np.random.default_rng(8))
    prior = PriorConfig.default(1, 2)

    def fn(tape, P):
        return elbo_terms(tape, P, state, batch, noise, prior)["elbo"]
    rep = gradcheck(fn, state.params)
    net_err = {k: v for k, v in rep.max_rel_error.items() if k.startswith("net.")}
    assert max(net_err.values()) <= 1e-3, net_err
    assert rep.worst <= 1e-3, rep.max_rel_error


def test_cholesky_diagonal_positive_extreme_inputs():
    rng = np.random.default_rng(9)
    net = _net_with_stats(rng)
    net.weights["net.diag.b"] = np.full(3, -200.0)
    person = _random_person(rng, 3)
    out = encode(net, person)
    assert np.all(np.diag(out.chol) > 1e-12)


def test_weight_file_round_trip(tmp_path, fitted):
    ds, _, rep = fitted
    net = rep.state.local
    alpha = rep.summary.means["alpha"]
    net.save(tmp_path / "w.bin", alpha_hat=alpha)
    back, a2 = InferenceNetwork.load(tmp_path / "w.bin")
    np.testing.assert_array_equal(a2, alpha)
    assert back.dims == net.dims and back.variant == net.variant
    for k, v in net.weights.items():
        np.testing.assert_array_equal(back.weights[k], v)
    m1, c1 = net.posterior_np(None, DataArrays(ds, with_encoding=True))
    m2, c2 = back.posterior_np(None, DataArrays(ds, with_encoding=True))
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(c1, c2)
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="payload"):
        InferenceNetwork.load(tmp_path / "bad.bin")
    (tmp_path / "junk.bin").write_bytes(b"nope" + raw[4:])
    with pytest.raises(ValueError, match="not an inference-network"):
        InferenceNetwork.load(tmp_path / "junk.bin")


def test_predict_on_training_set_reproduces_fit_encodings(fitted):
    ds, truth, rep = fitted
    pred = predict_out_of_sample(rep.state.local, ds, rep.summary.means["alpha"], truth.betas)
    np.testing.assert_array_equal(pred.means, rep.summary.means["beta"])
    assert 0 <= pred.metrics["accuracy"] <= 1 and pred.metrics["loglik"] < 0
    assert pred.metrics["rmse_beta"] == pytest.approx(np.sqrt(np.mean((pred.means - truth.betas) ** 2)))
    assert len(pred.posteriors()) == ds.N


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_fitted_network_permutation_invariance(fitted, seed):
    ds, _, rep = fitted
    rng = np.random.default_rng(seed)
    n = int(rng.integers(ds.N))
    person = ds.person_menus(n)
    a = encode(rep.state.local, person)
    b = encode(rep.state.local, [person[i] for i in rng.permutation(len(person))])
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12, rtol=0)
    np.testing.assert_allclose(a.chol, b.chol, atol=1e-12, rtol=0)
