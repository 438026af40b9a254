import numpy as np
import pytest
from scipy.stats import multivariate_normal

from mmnlvi import flows
from mmnlvi.autodiff import Tape, gradcheck
from mmnlvi.datagen import ScenarioSpec, simulate
from mmnlvi.flows import FlowError, FlowStack, SylvesterLayer, flow_logprob, forward_np, layer_forward
from mmnlvi.model import PriorConfig
from mmnlvi.vi import FitConfig, fit


def random_layer_params(layer, rng, scale=1.0):
    p = layer.init_params(rng)
    for k in p:
        if not k.endswith(".hh"):
            p[k] = scale * rng.standard_normal(p[k].shape)
    return p


def apply_layer(layer, params, z):
    tape = Tape()
    P = {k: tape.const(v) for k, v in params.items()}
    out, ld = layer_forward(tape, layer, P, tape.const(np.atleast_2d(z)))
    return out.value, ld.value


def numeric_logdet(layer, params, z, h=1e-6):
    D = z.size
    J = np.empty((D, D))
    for i in range(D):
        e = np.zeros(D)
        e[i] = h
        J[:, i] = (apply_layer(layer, params, z + e)[0][0] - apply_layer(layer, params, z - e)[0][0]) / (2 * h)
    return np.log(abs(np.linalg.det(J)))


def test_zero_r_is_identity():
    layer = SylvesterLayer("f", 4, 3)
    p = layer.init_params(np.random.default_rng(0))
    z = np.random.default_rng(1).normal(size=(5, 4))
    out, ld = apply_layer(layer, p, z)
    np.testing.assert_array_equal(out, z)
    np.testing.assert_array_equal(ld, 0.0)


def test_logdet_numeric_2d():
    layer = SylvesterLayer("f", 2, 2)
    rng = np.random.default_rng(2)
    p = random_layer_params(layer, rng)
    z = rng.normal(size=2)
    assert abs(apply_layer(layer, p, z)[1][0] - numeric_logdet(layer, p, z)) < 1e-6


def test_logdet_numeric_randomized_100():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        D = int(rng.integers(1, 7))
        M = int(rng.integers(1, D + 1))
        layer = SylvesterLayer("f", D, M)
        p = random_layer_params(layer, rng)
        z = rng.normal(size=D)
        worst = max(worst, abs(apply_layer(layer, p, z)[1][0] - numeric_logdet(layer, p, z)))
    assert worst < 1e-5


def test_saturated_tanh_gives_zero_logdet():
    layer = SylvesterLayer("f", 3, 3)
    rng = np.random.default_rng(4)
    p = random_layer_params(layer, rng)
    p["f.b"] = np.full(3, 40.0)
    _, ld = apply_layer(layer, p, rng.normal(size=(4, 3)))
    assert np.all(np.abs(ld) < 1e-12)


def test_invertibility_bound_holds():
    layer = SylvesterLayer("f", 3, 3)
    p = random_layer_params(layer, np.random.default_rng(5), scale=20.0)
    b = flows.DIAG_BOUND
    assert np.all(b * np.tanh(p["f.r_diag"]) * b * np.tanh(p["f.rt_diag"]) > -1)
    _, ld = apply_layer(layer, p, np.zeros((1, 3)))
    assert np.all(np.isfinite(ld))


def test_bottleneck_validated():
    with pytest.raises(FlowError):
        SylvesterLayer("f", 2, 3)
    with pytest.raises(FlowError):
        flows.parse_flow_spec("zeta:planar:4")
    assert flows.parse_flow_spec("zeta:sylvester:4") == ("zeta", 4)


def test_q_orthonormal():
    rng = np.random.default_rng(6)
    for D in range(1, 7):
        for M in range(1, D + 1):
            q = flows.householder_q_np(rng.normal(size=(M, D)), M)
            assert np.abs(q.T @ q - np.eye(M)).max() < 1e-10
            tape = Tape()
            qt = flows.householder_q(tape, tape.const(rng.normal(size=(M, D))), D, M).value
            assert np.abs(qt.T @ qt - np.eye(M)).max() < 1e-10


def test_empty_stack_returns_base():
    stack = FlowStack("flow.z", 3, depth=0)
    tape = Tape()
    z0 = tape.const(np.ones((2, 3)))
    base = tape.const(np.array([-1.0, -2.0]))
    z, lq = flow_logprob(tape, stack, {}, z0, base)
    np.testing.assert_array_equal(z.value, z0.value)
    np.testing.assert_array_equal(lq.value, base.value)


def test_composition_of_layers():
    rng = np.random.default_rng(7)
    stack = FlowStack("flow.z", 3, depth=2)
    p = {}
    for layer in stack.layers:
        p.update(random_layer_params(layer, rng))
    z0 = rng.normal(size=(4, 3))
    z, ld = forward_np(stack, p, z0)
    z1, ld1 = apply_layer(stack.layers[0], p, z0)
    z2, ld2 = apply_layer(stack.layers[1], p, z1)
    np.testing.assert_allclose(z, z2, atol=1e-12)
    np.testing.assert_allclose(ld, ld1 + ld2, atol=1e-12)


def test_flow_gradcheck():
    rng = np.random.default_rng(8)
    stack = FlowStack("flow.z", 3, depth=2, M=2)
    p = {}
    for layer in stack.layers:
        p.update(random_layer_params(layer, rng, 0.7))
    z0 = rng.normal(size=(3, 3))

    def fn(tape, P):
        z, lq = flow_logprob(tape, stack, P, tape.const(z0), tape.const(np.zeros(3)))
        return (z * z).sum() + lq.sum()
    assert gradcheck(fn, p).worst <= 1e-3


def _k2_flow(rng):
    stack = FlowStack("flow.z", 2, depth=2)
    p = {}
    for layer in stack.layers:
        p.update(random_layer_params(layer, rng, 1.2))
    return stack, p


def _logq(stack, p, z0):
    base = multivariate_normal(np.zeros(2), np.eye(2)).logpdf(z0)
    z, ld = forward_np(stack, p, z0)
    return z, base - ld


def _invert(stack, p, x, iters=100):
    """Fixed-point-free inversion by Newton steps on the forward map."""
    z = x.copy()
    for _ in range(iters):
        fz, _ = forward_np(stack, p, z)
        r = fz - x
        if np.abs(r).max() < 1e-12:
            break
        h = 1e-7
        J = np.empty((z.shape[0], 2, 2))
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            J[:, :, i] = (forward_np(stack, p, z + e)[0] - forward_np(stack, p, z - e)[0]) / (2 * h)
        z = z - np.linalg.solve(J, r[..., None])[..., 0]
    return z


def test_histogram_density_matches():
    rng = np.random.default_rng(9)
    stack, p = _k2_flow(rng)
    z0 = rng.standard_normal((10**6, 2))
    x, _ = forward_np(stack, p, z0)
    edges = np.linspace(-3, 3, 31)
    hist, _, _ = np.histogram2d(x[:, 0], x[:, 1], bins=[edges, edges])
    w = edges[1] - edges[0]
    emp = hist / (z0.shape[0] * w * w)
    c = 0.5 * (edges[1:] + edges[:-1])
    gx, gy = np.meshgrid(c, c, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    # density at cell centres via inversion of the flow
    u = _invert(stack, p, grid)
    _, lq = _logq(stack, p, u)
    dens = np.exp(lq).reshape(gx.shape)
    sel = dens > 0.05
    assert sel.sum() > 20
    rel = np.abs(emp[sel] - dens[sel]) / dens[sel]
    assert rel.max() < 0.05


def test_flow_density_integrates_to_mass():
    rng = np.random.default_rng(10)
    stack, p = _k2_flow(rng)
    x, _ = forward_np(stack, p, rng.standard_normal((10**6, 2)))
    lo, hi = np.quantile(x, 0.0002, axis=0) - 0.5, np.quantile(x, 0.9998, axis=0) + 0.5
    mass = np.mean(np.all((x > lo) & (x < hi), axis=1))
    assert mass > 0.999
    # importance sampling with a uniform proposal on the box; q via inversion of the flow
    xs = rng.uniform(lo, hi, size=(40000, 2))
    _, lq = _logq(stack, p, _invert(stack, p, xs))
    est = np.prod(hi - lo) * np.mean(np.exp(lq))
    assert abs(est / mass - 1) < 0.01


def test_zero_init_flow_reproduces_first_step():
    ds, _ = simulate(ScenarioSpec(20, 3, J=3, L=1, K=2, seed=1))
    prior = PriorConfig.default(1, 2)
    plain = fit(ds, prior, FitConfig(max_epochs=1, seed=4, record_timing=False))
    flowed = fit(ds, prior, FitConfig(max_epochs=1, seed=4, record_timing=False, flows={"zeta": (4, None)}))
    assert plain.trace[0][1] == flowed.trace[0][1]
    for k, v in plain.state.params.items():
        np.testing.assert_array_equal(flowed.state.params[k], v)


def test_q_stays_orthonormal_after_fit():
    ds, _ = simulate(ScenarioSpec(20, 3, J=3, L=1, K=2, seed=2))
    rep = flows.fit_with_flow(ds, PriorConfig.default(1, 2), FitConfig(max_epochs=30, lr=0.05), "zeta", 2)
    stack = rep.state.flows["zeta"]
    stack.check_orthonormal(rep.state.params)
    assert any(np.any(rep.state.params[f"flow.zeta.{i}.r_diag"] != 0) for i in range(2))
