import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import brute_bound
from zoaeds.certify import (
    ABSTAIN,
    CertificationRecord,
    CertifyConfig,
    certified_accuracy_curve,
    certified_radius,
    certify,
    lower_conf_bound,
    normal_cdf,
    normal_quantile,
    smooth_predict,
    standard_accuracy,
    write_curve_csv,
    write_records_jsonl,
)
from zoaeds.errors import ArgumentError


def test_bound_against_brute_force_named_case():
    assert abs(lower_conf_bound(990, 1000, 0.001) - brute_bound(990, 1000, 0.001)) < 1e-9


def test_bound_against_brute_force_random_triples():
    gen = np.random.default_rng(2024)
    for _ in range(100):
        n = int(gen.integers(1, 400))
        k = int(gen.integers(0, n + 1))
        alpha = float(10 ** gen.uniform(-4, -0.5))
        assert abs(lower_conf_bound(k, n, alpha) - brute_bound(k, n, alpha)) < 1e-9, (k, n, alpha)


def test_bound_edges():
    assert lower_conf_bound(0, 50, 0.01) == 0.0
    assert lower_conf_bound(50, 50, 0.01) == pytest.approx(0.01 ** (1 / 50), rel=1e-15)


@pytest.mark.parametrize("k,n,alpha", [(-1, 5, 0.1), (6, 5, 0.1), (1, 0, 0.1), (1, 5, 0.0), (1, 5, 1.0)])
def test_bound_invalid(k, n, alpha):
    with pytest.raises(ArgumentError):
        lower_conf_bound(k, n, alpha)


@given(st.integers(1, 300), st.data())
def test_bound_monotone_in_successes(n, data):
    k = data.draw(st.integers(0, n - 1))
    assert lower_conf_bound(k, n, 0.01) <= lower_conf_bound(k + 1, n, 0.01)


def test_bound_coverage():
    gen = np.random.default_rng(7)
    alpha, trials, reps = 0.05, 50, 10**4
    p = 0.7
    ks = gen.binomial(trials, p, size=reps)
    bounds = {k: lower_conf_bound(int(k), trials, alpha) for k in np.unique(ks)}
    cover = np.mean([bounds[k] <= p for k in ks])
    se = math.sqrt(alpha * (1 - alpha) / reps)
    assert cover >= (1 - alpha) - 3 * se


def test_normal_quantile_inverts_cdf():
    for p in (1e-6, 0.1, 0.5, 0.975, 0.999):
        assert normal_cdf(normal_quantile(p)) == pytest.approx(p, abs=1e-11)
    assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-10)


def test_radius_values():
    assert certified_radius(0.999, 0.25) == pytest.approx(0.77256, abs=1e-5)
    assert certified_radius(0.5, 0.25) == 0.0
    assert certified_radius(0.9, 0.0) == 0.0


@given(st.floats(0.5001, 0.99999), st.floats(0.01, 2.0))
def test_radius_scales_linearly_in_sigma(p, sigma):
    assert certified_radius(p, 2 * sigma) == pytest.approx(2 * certified_radius(p, sigma), rel=1e-12)


def rec(i, cls, radius):
    return CertificationRecord(i, cls, 0.9 if cls != ABSTAIN else 0.4, radius, 0)


def test_ca_mixed_set():
    records = [rec(0, 1, 0.3), rec(1, 2, 0.6), rec(2, 0, 0.9), rec(3, ABSTAIN, 0.0)]
    labels = [1, 2, 1, 0]
    curve = dict(certified_accuracy_curve(records, labels, [0.25, 0.5]))
    assert curve == {0.25: 0.5, 0.5: 0.25}


def test_ca_all_correct_threshold():
    records = [rec(i, 0, 0.6) for i in range(5)]
    assert certified_accuracy_curve(records, [0] * 5, [0.5, 0.75]) == [(0.5, 1.0), (0.75, 0.0)]


def test_ca_all_abstain():
    records = [rec(i, ABSTAIN, 0.0) for i in range(4)]
    assert all(ca == 0.0 for _, ca in certified_accuracy_curve(records, [ABSTAIN] * 4, [0.0, 0.1, 1.0]))


def test_ca_length_mismatch():
    with pytest.raises(ArgumentError):
        certified_accuracy_curve([rec(0, 1, 0.3)], [1, 2], [0.0])


record_strategy = st.lists(
    st.tuples(st.integers(-1, 3), st.floats(0.001, 2.0), st.integers(0, 3)), min_size=1, max_size=30)


@given(record_strategy, st.lists(st.floats(0, 3), min_size=1, max_size=8))
def test_ca_curve_non_increasing_and_reduces_to_sa(rows, radii):
    records = [rec(i, c, r if c != ABSTAIN else 0.0) for i, (c, r, _) in enumerate(rows)]
    labels = [y for _, _, y in rows]
    curve = certified_accuracy_curve(records, labels, sorted(radii))
    vals = [ca for _, ca in curve]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    # every non-abstain record has a positive radius, so CA(0) is SA exactly
    assert dict(certified_accuracy_curve(records, labels, [0.0]))[0.0] == standard_accuracy(records, labels)


class Constant:
    def __init__(self, cls, k=3):
        self.cls, self.k = cls, k
        self.rows = 0

    def query(self, x):
        self.rows += len(x)
        out = np.zeros((len(x), self.k))
        out[:, self.cls] = 1.0
        return out


def test_smooth_predict_constant():
    assert smooth_predict(Constant(2), np.zeros((1, 4, 4)), CertifyConfig(n0=10, n=100)) == 2


def test_smooth_predict_tie_abstains():
    def half(x):
        # alternate rows vote 0 and 1, so every even-sized batch splits exactly
        first = np.arange(len(x)) % 2
        return np.stack([first, 1 - first], 1).astype(float)

    assert smooth_predict(half, np.zeros(3), CertifyConfig(n0=10, n=200)) == ABSTAIN


def test_smooth_predict_deterministic():
    def noisy_sign(x):
        s = x.reshape(len(x), -1).sum(1)
        return np.stack([s, -s], 1)

    cfg = CertifyConfig(sigma=0.5, n0=10, n=300, seed=4)
    x = np.full(4, 0.05)
    assert smooth_predict(noisy_sign, x, cfg, 7) == smooth_predict(noisy_sign, x, cfg, 7)


def test_certify_constant_model():
    model = Constant(1)
    cfg = CertifyConfig(sigma=0.25, n0=20, n=500, alpha=0.001)
    r = certify(model, np.zeros((1, 2, 2)), cfg)
    assert r.predicted == 1
    assert r.pA_lower == pytest.approx(0.001 ** (1 / 500))
    assert r.radius == pytest.approx(0.25 * normal_quantile(r.pA_lower))
    assert r.queries == model.rows == 520


def test_certify_doubling_sigma_doubles_radius():
    # vote outcome is noise-independent, so the radius must scale exactly
    r1 = certify(Constant(0), np.zeros(3), CertifyConfig(sigma=0.25, n0=10, n=100))
    r2 = certify(Constant(0), np.zeros(3), CertifyConfig(sigma=0.5, n0=10, n=100))
    assert r2.radius == pytest.approx(2 * r1.radius, rel=1e-12)


def test_certify_sigma_zero_abstains():
    r = certify(Constant(0), np.zeros(3), CertifyConfig(sigma=0.0, n0=10, n=100))
    assert r.predicted == ABSTAIN and r.radius == 0.0


def test_config_validation():
    with pytest.raises(ArgumentError):
        CertifyConfig(alpha=1.5)
    with pytest.raises(ArgumentError):
        CertifyConfig(n0=10, n=5)


def test_writers(tmp_path):
    write_curve_csv([(0.0, 0.5), (0.25, 0.25)], tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text() == "radius,certified_accuracy\n0.0,0.5\n0.25,0.25\n"
    write_records_jsonl([rec(0, 1, 0.3)], tmp_path / "r.jsonl")
    assert '"class": 1' in (tmp_path / "r.jsonl").read_text()
