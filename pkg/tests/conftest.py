import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from zoaeds.models import DefenseStack, decoder_arch, denoiser_arch, encoder_arch
from zoaeds.numerics import ArchSpec, Layer, Network, RngStream
from zoaeds.oracle import BlackBoxOracle

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def finite_difference(f, x, h=1e-5):
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def small_classifier(shape=(1, 8, 8), classes=10, seed=0):
    arch = ArchSpec(shape, [Layer("conv", 2), Layer("relu"), Layer("flatten"), Layer("dense", classes)])
    return Network(arch, rng=RngStream(seed, ("clf",))).freeze()


def make_stack(seed=0, shape=(1, 8, 8), d_z=16, ae=True, randomize_denoiser=True):
    """A small untrained stack with a white-box base handle, for gradient tests."""
    base = small_classifier(shape, seed=seed)
    den = Network(denoiser_arch(shape, width=4), rng=RngStream(seed, ("den",)))
    if randomize_denoiser:
        # break the zero-initialised head so every layer carries gradient
        last = sorted(den.params)[-2]
        den.params[last] = 0.1 * RngStream(seed, ("head",)).generator.standard_normal(den.params[last].shape)
    enc = dec = None
    if ae:
        enc = Network(encoder_arch(shape, d_z=d_z, channels=2), rng=RngStream(seed, ("enc",)))
        dec = Network(decoder_arch(d_z, shape, channels=2), rng=RngStream(seed, ("dec",)))
    return DefenseStack(den, BlackBoxOracle.from_network(base), enc, dec, base_model=base)


def brute_tail(k, n, p):
    """P[Bin(n, p) >= k] by direct summation of log-space terms."""
    if p <= 0:
        return 1.0 if k <= 0 else 0.0
    if p >= 1:
        return 1.0
    lp, lq = math.log(p), math.log1p(-p)
    return sum(math.exp(math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1) + i * lp + (n - i) * lq)
               for i in range(k, n + 1))


def brute_bound(k, n, alpha):
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if brute_tail(k, n, mid) > alpha:
            hi = mid
        else:
            lo = mid
    return lo


@pytest.fixture
def rng():
    return RngStream(1234, ("tests",))
