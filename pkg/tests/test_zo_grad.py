import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_stack, small_classifier
from zoaeds.errors import ArgumentError, NumericalError, ShapeError
from zoaeds.models import DefenseStack, denoiser_arch
from zoaeds.numerics import ArchSpec, Layer, Network, RngStream
from zoaeds.oracle import BlackBoxOracle
from zoaeds.training import stability_grad_fo
from zoaeds.zo_grad import (
    EstimatorConfig,
    ScalarLossOracle,
    cge,
    estimate_with_value,
    query_targets,
    rge,
    stability_grad_zo_ae,
    stability_grad_zo_ds,
)


def batched(f):
    """Lift a loss on (d,) vectors to the (B, P, d) probe convention."""
    return lambda probes: np.apply_along_axis(f, -1, probes)


def sq_norm(probes):
    return (probes**2).sum(-1)


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def flat(grads):
    return np.concatenate([grads[c][k].ravel() for c in sorted(grads) for k in sorted(grads[c])])


# -- estimator config --------------------------------------------------------

def test_config_validation():
    with pytest.raises(ArgumentError):
        EstimatorConfig("rge", q=0)
    with pytest.raises(ArgumentError):
        EstimatorConfig("cge", mu=0.0)
    with pytest.raises(ArgumentError):
        EstimatorConfig("spsa")
    assert EstimatorConfig("rge", q=5).queries_per_point(64) == 6
    assert EstimatorConfig("cge", q=5).queries_per_point(64) == 65


# -- RGE ---------------------------------------------------------------------

@given(st.integers(1, 10), st.integers(1, 12), st.floats(-5, 5))
def test_rge_constant_loss_is_zero(q, d, c):
    g = rge(lambda p: np.full(p.shape[:2], c), np.ones(d), EstimatorConfig("rge", q=q), RngStream(0))
    np.testing.assert_array_equal(g, np.zeros(d))


def test_rge_forced_direction_quadratic():
    cfg = EstimatorConfig("rge", q=1, mu=0.01)
    g = rge(sq_norm, np.array([1.0, 0.0]), cfg, directions=np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(g, [0.0, 0.02], rtol=1e-9, atol=1e-15)


def test_rge_linear_unbiased():
    gen = np.random.default_rng(3)
    d, n = 8, 10**5
    g_true = gen.normal(size=d)
    w = np.tile(gen.normal(size=d), (n, 1))
    est = rge(lambda p: p @ g_true, w, EstimatorConfig("rge", q=1, mu=0.005), RngStream(3, ("unbiased",)))
    assert np.linalg.norm(est.mean(0) - g_true) / np.linalg.norm(g_true) < 0.02


def test_rge_deterministic_given_stream():
    cfg = EstimatorConfig("rge", q=4)
    a = rge(sq_norm, np.arange(5.0), cfg, RngStream(8, ("d",)))
    b = rge(sq_norm, np.arange(5.0), cfg, RngStream(8, ("d",)))
    assert a.tobytes() == b.tobytes()


def test_rge_nonfinite_names_probe():
    def loss(p):
        out = sq_norm(p)
        out[0, 2] = np.nan
        return out

    with pytest.raises(NumericalError, match="probe 2"):
        rge(loss, np.ones(3), EstimatorConfig("rge", q=3), RngStream(0))


def test_rge_nonfinite_base_point():
    with pytest.raises(NumericalError, match="base point"):
        rge(lambda p: np.full(p.shape[:2], np.inf), np.ones(3), EstimatorConfig("rge", q=2), RngStream(0))


# -- CGE ---------------------------------------------------------------------

def test_cge_quadratic_hand_value():
    g = cge(sq_norm, np.array([1.0, 2.0]), EstimatorConfig("cge", mu=0.1))
    np.testing.assert_allclose(g, [2.1, 4.1], rtol=1e-12)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=10))
def test_cge_linear_exact(coeffs):
    g = np.array(coeffs)
    w = np.linspace(-1, 1, len(g))
    est = cge(lambda p: p @ g, w, EstimatorConfig("cge", mu=0.005))
    np.testing.assert_allclose(est, g, atol=1e-9)


def test_cge_constant_loss_is_zero():
    np.testing.assert_array_equal(cge(lambda p: np.ones(p.shape[:2]), np.ones(4), EstimatorConfig()), np.zeros(4))


def test_cge_error_shrinks_with_mu():
    w = np.array([0.3, -1.2, 0.8])
    smooth = batched(lambda v: np.sin(v).sum() + (v**2).sum())
    true_smooth = np.cos(w) + 2 * w
    errs_q, errs_s = [], []
    for mu in (1e-1, 1e-2, 1e-3):
        cfg = EstimatorConfig("cge", mu=mu)
        errs_q.append(np.abs(cge(sq_norm, w, cfg) - 2 * w).max())
        errs_s.append(np.abs(cge(smooth, w, cfg) - true_smooth).max())
    assert errs_q[0] > errs_q[1] > errs_q[2]
    assert errs_s[0] > errs_s[1] > errs_s[2]
    # forward-difference error on a quadratic is exactly mu per coordinate
    np.testing.assert_allclose(errs_q, [1e-1, 1e-2, 1e-3], rtol=1e-6)


def test_estimate_with_value_returns_base_loss():
    w = np.array([[1.0, 2.0], [0.0, -1.0]])
    g, base = estimate_with_value(sq_norm, w, EstimatorConfig("cge", mu=0.1))
    np.testing.assert_allclose(base, [5.0, 1.0])
    np.testing.assert_allclose(g, 2 * w + 0.1)


# -- query accounting through a real oracle ----------------------------------

@pytest.mark.parametrize("kind,q,expected", [("rge", 7, 8), ("cge", 0, 17)])
def test_estimator_query_count(kind, q, expected):
    base = BlackBoxOracle(lambda x: np.stack([x.sum(1), -x.sum(1)], 1), (16,))
    loss = ScalarLossOracle(base, np.array([0, 1, 0]))
    cfg = EstimatorConfig(kind, q=max(q, 1))
    rge(loss, np.zeros((3, 16)), cfg, RngStream(0)) if kind == "rge" else cge(loss, np.zeros((3, 16)), cfg)
    assert base.queries_used == 3 * expected


def test_scalar_loss_oracle_is_deterministic():
    base = BlackBoxOracle(lambda x: x[:, :3] * 2.0, (4,))
    loss = ScalarLossOracle(base, np.array([1]))
    w = np.array([0.1, 0.5, -0.2, 3.0])
    assert loss.value(w)[0] == loss.value(w)[0]


def test_query_targets_modes():
    base = BlackBoxOracle(lambda x: x[:, :3], (3,))
    x = np.array([[0.1, 2.0, -1.0], [3.0, 0.0, 0.0]])
    np.testing.assert_array_equal(query_targets(base, x), [1, 0])
    np.testing.assert_allclose(query_targets(base, x, "soft").sum(1), 1.0)
    np.testing.assert_array_equal(query_targets(base, x, "output"), x)
    with pytest.raises(ArgumentError):
        query_targets(base, x, "argmin")
    assert base.queries_used == 6


# -- stability pathways -------------------------------------------------------

SHAPE = (1, 4, 4)


def linear_ae_stack(d_z=3, seed=0):
    gen = np.random.default_rng(seed)
    d = int(np.prod(SHAPE))
    enc = Network(ArchSpec(SHAPE, [Layer("flatten"), Layer("dense", d_z)]),
                  {"1.w": gen.normal(size=(d_z, d)), "1.b": np.zeros(d_z)})
    dec = Network(ArchSpec((d_z,), [Layer("dense", d), Layer("reshape", shape=SHAPE)]),
                  {"0.w": gen.normal(size=(d, d_z)), "0.b": np.zeros(d)})
    den = Network(denoiser_arch(SHAPE, width=2), rng=RngStream(seed))  # zero head: identity
    base = small_classifier(SHAPE, classes=3, seed=seed)
    return DefenseStack(den, BlackBoxOracle.from_network(base), enc, dec, base_model=base)


def test_zo_ae_zero_estimate_gives_zero_grads():
    stack = make_stack(shape=SHAPE, d_z=4)
    x = np.random.default_rng(0).uniform(size=(2,) + SHAPE)
    cfg = EstimatorConfig("rge", q=1)
    zero_dirs = np.zeros((1, 4))
    sg = stability_grad_zo_ae(stack, x, 0 * x, cfg, np.array([0, 1]), directions=zero_dirs)
    assert np.all(sg.a == 0)
    for comp in sg.grads.values():
        for g in comp.values():
            assert np.all(g == 0)


def test_zo_ae_linear_encoder_outer_product():
    stack = linear_ae_stack()
    gen = np.random.default_rng(1)
    x, delta = gen.uniform(size=(1,) + SHAPE), 0.1 * gen.normal(size=(1,) + SHAPE)
    sg = stability_grad_zo_ae(stack, x, delta, EstimatorConfig("cge"), np.array([2]))
    v = (x + delta).ravel()
    np.testing.assert_allclose(sg.grads["encoder"]["1.w"], np.outer(sg.a[0], v), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(sg.grads["encoder"]["1.b"], sg.a[0], rtol=1e-12)


def test_zo_ae_inner_equals_jacobian_form():
    shape = SHAPE
    enc = Network(ArchSpec(shape, [Layer("flatten"), Layer("dense", 6), Layer("sigmoid"), Layer("dense", 4)]),
                  rng=RngStream(2, ("enc",)))
    dec = Network(ArchSpec((4,), [Layer("dense", 16), Layer("reshape", shape=shape)]), rng=RngStream(2, ("dec",)))
    base = small_classifier(shape, classes=3, seed=2)
    stack = make_stack(shape=shape, d_z=4, seed=2)
    stack = DefenseStack(stack.denoiser, BlackBoxOracle.from_network(base), enc, dec, base_model=base)
    gen = np.random.default_rng(2)
    x, delta = gen.uniform(size=(3,) + shape), 0.25 * gen.normal(size=(3,) + shape)
    targets = np.array([0, 1, 2])
    cfg = EstimatorConfig("cge")
    inner = stability_grad_zo_ae(stack, x, delta, cfg, targets, form="inner")
    jac = stability_grad_zo_ae(stack, x, delta, cfg, targets, form="jacobian")
    np.testing.assert_allclose(flat(inner.grads), flat(jac.grads), rtol=0, atol=1e-10)
    with pytest.raises(ArgumentError):
        stability_grad_zo_ae(stack, x, delta, cfg, targets, form="adjoint")


def test_zo_ae_encoder_decoder_mismatch():
    stack = make_stack(shape=SHAPE, d_z=4)
    stack.encoder = Network(ArchSpec(SHAPE, [Layer("flatten"), Layer("dense", 5)]), rng=RngStream(0))
    x = np.zeros((1,) + SHAPE)
    with pytest.raises(ShapeError):
        stability_grad_zo_ae(stack, x, x, EstimatorConfig(), np.array([0]))


def test_zo_ae_query_count():
    stack = make_stack(shape=SHAPE, d_z=4)
    x = np.random.default_rng(0).uniform(size=(5,) + SHAPE)
    sg = stability_grad_zo_ae(stack, x, 0 * x, EstimatorConfig("cge"), np.zeros(5, int))
    assert sg.queries == stack.base.queries_used == 5 * 5


def additive_bias_denoiser(shape):
    # z = x + delta + b: a single conv with a centred unit kernel
    w = np.zeros((1, shape[0], 3, 3))
    w[0, 0, 1, 1] = 1.0
    return Network(ArchSpec(shape, [Layer("conv", 1)]), {"0.w": w, "0.b": np.zeros(1)})


def test_zo_ds_bias_gradient_equals_a():
    shape = (1, 1, 1)
    den = additive_bias_denoiser(shape)
    base = BlackBoxOracle(lambda x: np.concatenate([x.reshape(len(x), 1), -x.reshape(len(x), 1)], 1), shape)
    x = np.array([[[[0.4]]]])
    sg = stability_grad_zo_ds(den, base, x, np.zeros_like(x), EstimatorConfig("cge"), np.array([0]))
    np.testing.assert_allclose(sg.grads["denoiser"]["0.b"], sg.a[0], rtol=1e-12)


def test_zo_ds_zero_estimate_gives_zero_grads():
    stack = make_stack(shape=SHAPE, ae=False)
    x = np.random.default_rng(0).uniform(size=(2,) + SHAPE)
    sg = stability_grad_zo_ds(stack.denoiser, stack.base, x, 0 * x, EstimatorConfig("rge", q=1), np.array([0, 1]),
                              directions=np.zeros((1, 16)))
    assert all(np.all(g == 0) for g in sg.grads["denoiser"].values())


def test_zo_ds_cge_matches_first_order():
    stack = make_stack(shape=SHAPE, ae=False, seed=4)
    gen = np.random.default_rng(4)
    x, delta = gen.uniform(size=(4,) + SHAPE), 0.25 * gen.normal(size=(4,) + SHAPE)
    targets = np.argmax(stack.base_model.predict(x), 1)
    zo = stability_grad_zo_ds(stack.denoiser, stack.base, x, delta, EstimatorConfig("cge", mu=1e-4), targets)
    fo = stability_grad_fo(stack, x, delta, targets)
    assert cosine(flat(zo.grads), flat(fo.grads)) >= 0.999


def test_zo_ae_cge_matches_first_order():
    stack = make_stack(shape=SHAPE, d_z=4, seed=5)
    gen = np.random.default_rng(5)
    x, delta = gen.uniform(size=(4,) + SHAPE), 0.25 * gen.normal(size=(4,) + SHAPE)
    targets = np.argmax(stack.base_model.predict(x), 1)
    zo = stability_grad_zo_ae(stack, x, delta, EstimatorConfig("cge", mu=1e-4), targets)
    fo = stability_grad_fo(stack, x, delta, targets)
    fo.grads.pop("decoder")
    assert cosine(flat(zo.grads), flat(fo.grads)) >= 0.999
