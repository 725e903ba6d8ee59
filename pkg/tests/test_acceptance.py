"""Acceptance criteria 1-10.

Each test prints one ``[criterion N] PASS|FAIL`` line with the measured
numbers, then asserts. Criteria 7, 8 and 10 share one run of the
classification suite over seeds 0, 1, 2; criterion 9 runs the
reconstruction suite over the same seeds.
"""
import time

import numpy as np
import pytest

from conftest import brute_bound, make_stack, small_classifier
from zoaeds.certify import certified_radius, lower_conf_bound, standard_accuracy
from zoaeds.data import make_toy_digits
from zoaeds.experiments import (
    ClassificationSuite,
    ReconstructionSuite,
    mean_ca,
    mean_row,
    run_classification,
    run_reconstruction,
)
from zoaeds.models import DefenseStack
from zoaeds.numerics import ArchSpec, Layer, Network, RngStream
from zoaeds.oracle import BlackBoxOracle
from zoaeds.training import default_config, expected_queries, stability_grad_fo, train
from zoaeds.zo_grad import EstimatorConfig, ScalarLossOracle, cge, rge, stability_grad_zo_ae, stability_grad_zo_ds

SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


def flat(grads):
    return np.concatenate([grads[c][k].ravel() for c in sorted(grads) for k in sorted(grads[c])])


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_rge_unbiased(report):
    t0 = time.perf_counter()
    d, n = 8, 10**5
    gen = np.random.default_rng(1)
    g_true, w0 = gen.normal(size=d), gen.normal(size=d)
    est = rge(lambda p: p @ g_true, np.tile(w0, (n, 1)), EstimatorConfig("rge", q=1, mu=0.005),
              RngStream(1, ("criterion-1",)))
    se = est.std(0, ddof=1) / np.sqrt(n)
    z = np.abs(est.mean(0) - g_true) / se
    secs = time.perf_counter() - t0
    ok = bool(np.all(z < 3) and secs < 10)
    assert report(1, ok, f"max |mean - g| / SE = {z.max():.2f} (< 3), {secs:.2f}s (< 10s)")


# -- 2 ------------------------------------------------------------------------

def per_coordinate_variance(d, q, n=20000):
    est = rge(lambda p: (p**2).sum(-1), np.ones((n, d)), EstimatorConfig("rge", q=q, mu=1e-3),
              RngStream(2, ("criterion-2", d, q)))
    return est.var(0).mean()


def normalized_variance(oracle, z, target, q, n=20000):
    """``E||a_hat - g||^2 / ||g||^2`` of RGE at ``z``; ``g`` from CGE at tiny mu."""
    g = cge(ScalarLossOracle(oracle, target), z, EstimatorConfig("cge", mu=1e-6))
    loss = ScalarLossOracle(oracle, np.repeat(target, n))
    est = rge(loss, np.repeat(z, n, 0), EstimatorConfig("rge", q=q, mu=1e-3), RngStream(2, ("criterion-2", z.shape[1])))
    return float(((est - g) ** 2).sum(1).mean() / (g**2).sum())


def test_criterion_2_variance_law(report):
    t0 = time.perf_counter()
    d, q = 32, 4
    v = per_coordinate_variance(d, q)
    r_q = v / per_coordinate_variance(d, 2 * q)
    r_d = per_coordinate_variance(2 * d, q) / v
    stack = make_stack(d_z=16, seed=0)
    gen = np.random.default_rng(0)
    x = gen.uniform(size=(1, 1, 8, 8))
    noisy = x + 0.25 * gen.normal(size=x.shape)
    target = np.argmax(stack.base_model.predict(x), 1)
    h = stack.denoiser.predict(noisy)
    v_full = normalized_variance(stack.base, h.reshape(1, -1), target, q)
    v_emb = normalized_variance(stack.composed_oracle(), stack.encoder.predict(h), target, q)
    r_ae = v_full / v_emb
    secs = time.perf_counter() - t0
    ok = abs(r_q - 2) <= 0.3 and abs(r_d - 2) <= 0.3 and abs(r_ae - 4) <= 1.0 and secs < 60
    assert report(2, ok, f"Var(d,q)/Var(d,2q) = {r_q:.3f}, Var(2d,q)/Var(d,q) = {r_d:.3f} (2 +- 15%); "
                         f"d=64 -> d_z=16 reduction {r_ae:.3f}x (4 +- 25%); {secs:.1f}s")


# -- 3 ------------------------------------------------------------------------

def test_criterion_3_inner_product_equals_jacobian(report):
    t0 = time.perf_counter()
    shape = (1, 4, 4)
    enc = Network(ArchSpec(shape, [Layer("flatten"), Layer("dense", 8), Layer("relu"), Layer("dense", 4)]),
                  rng=RngStream(3, ("enc",)))
    dec = Network(ArchSpec((4,), [Layer("dense", 16), Layer("reshape", shape=shape)]), rng=RngStream(3, ("dec",)))
    base = small_classifier(shape, classes=4, seed=3)
    den = make_stack(shape=shape, seed=3, ae=False).denoiser
    stack = DefenseStack(den, BlackBoxOracle.from_network(base), enc, dec)
    gen = np.random.default_rng(3)
    x, delta = gen.uniform(size=(4,) + shape), 0.25 * gen.normal(size=(4,) + shape)
    targets = np.array([0, 1, 2, 3])
    cfg = EstimatorConfig("cge")
    inner = flat(stability_grad_zo_ae(stack, x, delta, cfg, targets, form="inner").grads)
    jac = flat(stability_grad_zo_ae(stack, x, delta, cfg, targets, form="jacobian").grads)
    err = float(np.abs(inner - jac).max())
    secs = time.perf_counter() - t0
    assert report(3, err <= 1e-10 and secs < 1, f"max |inner - jacobian| = {err:.2e} (<= 1e-10), {secs:.2f}s")


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_fo_zo_consistency(report):
    t0 = time.perf_counter()
    stack = make_stack(d_z=16, seed=4)
    gen = np.random.default_rng(4)
    x = gen.uniform(size=(8, 1, 8, 8))
    delta = 0.25 * gen.normal(size=x.shape)
    targets = np.argmax(stack.base_model.predict(x), 1)
    zo = stability_grad_zo_ae(stack, x, delta, EstimatorConfig("cge", mu=1e-4), targets)
    fo = stability_grad_fo(stack, x, delta, targets)
    fo.grads.pop("decoder")
    cos = cosine(flat(zo.grads), flat(fo.grads))
    secs = time.perf_counter() - t0
    assert report(4, cos >= 0.99 and secs < 10, f"cosine(ZO-AE-DS, FO-AE-DS) = {cos:.6f} (>= 0.99), d=64, d_z=16")


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_query_accounting(report):
    stack = make_stack(d_z=16, seed=5)
    x = make_toy_digits(1, seed=5).images
    before = stack.base.queries_used
    sg = stability_grad_zo_ae(stack, x, 0 * x, EstimatorConfig("cge"), np.array([0]))
    cge_rows = stack.base.queries_used - before
    before = stack.base.queries_used
    stability_grad_zo_ds(stack.denoiser, stack.base, x, 0 * x, EstimatorConfig("rge", q=9), np.array([0]),
                         RngStream(5))
    rge_rows = stack.base.queries_used - before
    n = 40
    fresh = make_stack(d_z=16, seed=5)
    cfg = default_config("zo_ae_ds", epochs=1, batch_size=16)
    rep = train(cfg, fresh, make_toy_digits(n, seed=5))
    closed = n + n * (16 + 1)
    ok = (cge_rows == sg.queries == 17 and rge_rows == 10 and rep.queries_used == fresh.base.queries_used == closed
          and expected_queries(cfg, n, 64, 16) == closed)
    assert report(5, ok, f"CGE rows {cge_rows} (= d_z+1 = 17), RGE rows {rge_rows} (= q+1 = 10), "
                         f"epoch {fresh.base.queries_used} (= n + n(d_z+1) = {closed})")


# -- 6 ------------------------------------------------------------------------

def test_criterion_6_certification_math(report):
    t0 = time.perf_counter()
    gen = np.random.default_rng(6)
    triples = [(990, 1000, 0.001)]
    while len(triples) < 100:
        n = int(gen.integers(1, 1001))
        triples.append((int(gen.integers(0, n + 1)), n, float(10 ** gen.uniform(-4, -0.5))))
    err = max(abs(lower_conf_bound(k, n, a) - brute_bound(k, n, a)) for k, n, a in triples)
    radius = certified_radius(0.999, 0.25)
    secs = time.perf_counter() - t0
    ok = err <= 1e-9 and abs(radius - 0.77256) <= 1e-5 and secs < 10
    assert report(6, ok, f"max CP error {err:.2e} over 100 triples (<= 1e-9); radius {radius:.6f} (0.77256 +- 1e-5); "
                         f"{secs:.1f}s")


# -- 7, 8, 10: classification suite -------------------------------------------

@pytest.fixture(scope="module")
def classification():
    t0 = time.perf_counter()
    results = [run_classification(ClassificationSuite(), seed) for seed in SEEDS]
    return results, time.perf_counter() - t0


def test_criterion_7_method_ordering(classification, report):
    results, secs = classification
    train_secs = sum(r.train_seconds for r in results)
    radii = (0.0, 0.0625, 0.125)  # 0, sigma/4, sigma/2
    ae = [mean_ca(results, "zo_ae_ds", r) for r in radii]
    ds = [mean_ca(results, "zo_ds", r) for r in radii]
    fo0 = mean_ca(results, "fo_ae_ds", 0.0)
    ok = all(a > b for a, b in zip(ae, ds)) and fo0 >= ae[0] - 0.05 and train_secs <= 600
    assert report(7, ok, f"ZO-AE-DS {np.round(ae, 3).tolist()} vs ZO-DS {np.round(ds, 3).tolist()} at r={list(radii)}; "
                         f"FO-AE-DS(0) {fo0:.3f} >= {ae[0] - 0.05:.3f}; training {train_secs:.0f}s "
                         f"(suite {secs:.0f}s incl. certification)")


def test_criterion_8_scheme_ordering(classification, report):
    results, _ = classification
    scratch, pf = mean_ca(results, "zo_ae_ds", 0.0), mean_ca(results, "zo_ae_ds_pf", 0.0)
    assert report(8, scratch >= pf, f"CA(0): scratch {scratch:.3f} >= pretrain+finetune {pf:.3f}")


def test_criterion_10_curve_structure(classification, report):
    results, _ = classification
    ok, checked = True, 0
    for res in results:
        for name, curve in res.curves.items():
            vals = [ca for _, ca in curve]
            sa = standard_accuracy(res.records[name], make_toy_digits(ClassificationSuite().n_test, seed=res.seed,
                                                                     split="test").labels)
            ok &= all(a >= b for a, b in zip(vals, vals[1:])) and dict(curve)[0.0] == sa == res.standard_accuracy[name]
            checked += 1
    assert report(10, ok, f"{checked} curves non-increasing with CA(0) == SA exactly")


# -- 9: reconstruction suite ---------------------------------------------------

def test_criterion_9_reconstruction_defense(report):
    t0 = time.perf_counter()
    suite = ReconstructionSuite()
    results = [run_reconstruction(suite, seed) for seed in SEEDS]
    secs = time.perf_counter() - t0
    eps = max(suite.epsilons)
    std_rmse, std_ssim = mean_row(results, "standard", eps)
    ae_rmse, ae_ssim = mean_row(results, "zo_ae_ds", eps)
    clean = mean_row(results, "standard", 0.0)[0]
    defended_clean = {v.name: mean_row(results, v.name, 0.0)[0] for v in suite.variants}
    ok = (std_rmse > ae_rmse and std_ssim < ae_ssim and all(c <= 2 * clean for c in defended_clean.values())
          and secs <= 600)
    clean_txt = ", ".join(f"{k} {v:.4f}" for k, v in defended_clean.items())
    assert report(9, ok, f"eps={eps}: RMSE standard {std_rmse:.4f} > ZO-AE-DS {ae_rmse:.4f}, SSIM standard "
                         f"{std_ssim:.4f} < ZO-AE-DS {ae_ssim:.4f}; eps=0: standard {clean:.4f}, {clean_txt} "
                         f"(all <= {2 * clean:.4f}); {secs:.0f}s")
