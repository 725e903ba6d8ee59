"""Randomized-smoothing prediction and certified-radius computation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import binom, binomtest

from zoaeds.errors import ArgumentError
from zoaeds.numerics.rng import RngStream, sample_gaussian

ABSTAIN = -1


@dataclass
class CertifyConfig:
    sigma: float = 0.25
    n0: int = 100
    n: int = 10_000
    alpha: float = 0.001
    seed: int = 0
    batch: int = 2000

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ArgumentError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.n0 < 1 or self.n < self.n0:
            raise ArgumentError(f"need n0 >= 1 and n >= n0, got n0={self.n0}, n={self.n}")
        if self.sigma < 0:
            raise ArgumentError(f"sigma must be >= 0, got {self.sigma}")


@dataclass
class CertificationRecord:
    id: int
    predicted: int  # ABSTAIN (-1) when no class is certified
    pA_lower: float
    radius: float
    queries: int

    @property
    def abstained(self) -> bool:
        return self.predicted == ABSTAIN


def binomial_tail(k: int, n: int, p: float) -> float:
    """``P[Binomial(n, p) >= k]``."""
    if k <= 0:
        return 1.0
    return float(binom.sf(k - 1, n, p))


def lower_conf_bound(successes: int, trials: int, alpha: float, tol: float = 1e-13) -> float:
    """One-sided Clopper-Pearson lower bound at confidence ``1 - alpha``.

    The largest ``p`` with ``P[Bin(trials, p) >= successes] <= alpha``; the
    tail is increasing in ``p`` so bisection applies.
    """
    if trials < 1 or not 0 <= successes <= trials:
        raise ArgumentError(f"invalid counts: successes={successes}, trials={trials}")
    if not 0 < alpha < 1:
        raise ArgumentError(f"alpha must be in (0, 1), got {alpha}")
    if successes == 0:
        return 0.0
    if successes == trials:
        return alpha ** (1.0 / trials)
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if binomial_tail(successes, trials, mid) > alpha:
            hi = mid
        else:
            lo = mid
    return lo


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile(p: float, tol: float = 1e-12) -> float:
    """Inverse standard normal CDF by bisection on ``erfc``."""
    if not 0 < p < 1:
        raise ArgumentError(f"quantile needs p in (0, 1), got {p}")
    lo, hi = -40.0, 40.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def certified_radius(pA_lower: float, sigma: float) -> float:
    if pA_lower <= 0.5 or sigma == 0:
        return 0.0
    if pA_lower >= 1.0:
        return math.inf
    return sigma * normal_quantile(pA_lower)


def _counts(predict, x, num, sigma, rng: RngStream, batch: int, num_classes: int | None):
    """Vote counts of ``predict`` over ``num`` Gaussian-noised copies of ``x``."""
    counts = np.zeros(num_classes or 0, dtype=np.int64)
    done, chunk = 0, 0
    while done < num:
        k = min(batch, num - done)
        noise = sample_gaussian(rng.child(chunk), (k,) + x.shape, sigma)
        logits = predict(x[None] + noise)
        votes = np.bincount(np.argmax(logits, axis=1), minlength=logits.shape[1])
        if len(votes) > len(counts):
            counts = np.pad(counts, (0, len(votes) - len(counts)))
        counts[: len(votes)] += votes
        done += k
        chunk += 1
    return counts


def _predictor(model):
    return model.query if hasattr(model, "query") else model


def smooth_predict(model, x, cfg: CertifyConfig, example_id: int = 0) -> int:
    """Majority vote over ``cfg.n`` noisy copies; abstains unless the top
    two counts differ significantly (two-sided binomial test at ``alpha``)."""
    x = np.asarray(x, dtype=np.float64)
    rng = RngStream(cfg.seed, ("smooth-predict", example_id))
    counts = _counts(_predictor(model), x, cfg.n, cfg.sigma, rng, cfg.batch, None)
    order = np.argsort(-counts, kind="stable")
    n_a = int(counts[order[0]])
    n_b = int(counts[order[1]]) if len(counts) > 1 else 0
    if n_a + n_b == 0:
        return ABSTAIN
    if binomtest(n_a, n_a + n_b, 0.5).pvalue > cfg.alpha:
        return ABSTAIN
    return int(order[0])


def certify(model, x, cfg: CertifyConfig, example_id: int = 0) -> CertificationRecord:
    """Select a class on ``n0`` samples, then bound its probability on ``n`` fresh ones."""
    x = np.asarray(x, dtype=np.float64)
    predict = _predictor(model)
    rng = RngStream(cfg.seed, ("certify", example_id))
    sel = _counts(predict, x, cfg.n0, cfg.sigma, rng.child("select"), cfg.batch, None)
    c_hat = int(np.argmax(sel))
    est = _counts(predict, x, cfg.n, cfg.sigma, rng.child("estimate"), cfg.batch, len(sel))
    n_a = int(est[c_hat]) if c_hat < len(est) else 0
    p_lower = lower_conf_bound(n_a, cfg.n, cfg.alpha)
    radius = certified_radius(p_lower, cfg.sigma)
    if radius <= 0.0:
        return CertificationRecord(example_id, ABSTAIN, p_lower, 0.0, cfg.n0 + cfg.n)
    return CertificationRecord(example_id, c_hat, p_lower, radius, cfg.n0 + cfg.n)


def certify_dataset(model, images, cfg: CertifyConfig) -> list[CertificationRecord]:
    return [certify(model, x, cfg, i) for i, x in enumerate(images)]


def standard_accuracy(records, labels) -> float:
    """Accuracy of the smoothed prediction with abstentions counted as errors."""
    labels = np.asarray(labels)
    if len(records) != len(labels):
        raise ArgumentError(f"{len(records)} records for {len(labels)} labels")
    if not len(labels):
        return 0.0
    return float(np.mean([r.predicted == y for r, y in zip(records, labels)]))


def certified_accuracy_curve(records, labels, radii) -> list[tuple[float, float]]:
    """``CA(r)``: fraction correctly predicted with certified radius strictly above ``r``."""
    labels = np.asarray(labels)
    if len(records) != len(labels):
        raise ArgumentError(f"{len(records)} records for {len(labels)} labels")
    if not len(labels):
        return [(float(r), 0.0) for r in radii]
    correct = np.array([r.predicted == y and r.predicted != ABSTAIN for r, y in zip(records, labels)])
    rad = np.array([r.radius for r in records])
    return [(float(r), float(np.mean(correct & (rad > r)))) for r in radii]


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["radius", "certified_accuracy"])
        for r, ca in curve:
            w.writerow([repr(float(r)), repr(float(ca))])


def write_records_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            d = asdict(r)
            fh.write(json.dumps({"id": d["id"], "class": d["predicted"], "pA_lower": d["pA_lower"],
                                 "radius": d["radius"], "queries": d["queries"]}, sort_keys=True) + "\n")
