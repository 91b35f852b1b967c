import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spgan.dataio import blobs8, make_synthetic, mode_centroids
from spgan.errors import ContractError, DimensionError
from spgan.evaluation import (
    format_report,
    format_table,
    memorization_check,
    mode_coverage,
    parse_report,
    proxy_inception_score,
    train_classifier,
)

CENTROIDS = mode_centroids(blobs8())


def coverage_by_loops(samples, centroids, tau):
    """Nearest centroid by explicit loops; ties go to the lower index."""
    k = len(centroids)
    within = [0] * k
    for s in samples:
        best, best_d = 0, math.inf
        for j, c in enumerate(centroids):
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(s.ravel(), c.ravel())))
            if d < best_d:
                best, best_d = j, d
        if best_d <= tau:
            within[best] += 1
    need = max(1.0, 0.01 * len(samples))
    return sum(w >= need for w in within), within


def test_collapsed_samples_cover_one_mode():
    samples = np.repeat(CENTROIDS[1:2], 50, axis=0)
    rep = mode_coverage(samples, CENTROIDS, 0.5)
    assert rep.modes_covered == 1
    assert rep.counts[1] == 50 and sum(rep.counts) == 50


def test_centroids_cover_every_mode():
    for tau in (1e-9, 0.3, 100.0):
        assert mode_coverage(CENTROIDS, CENTROIDS, tau).modes_covered == 8


def test_gaussian_clouds_match_loop_oracle():
    rng = np.random.default_rng(0)
    sigma = 0.15
    samples = CENTROIDS[rng.integers(0, 8, size=160)] + sigma * rng.normal(size=(160,) + CENTROIDS.shape[1:])
    tau = 3 * sigma * math.sqrt(CENTROIDS[0].size)
    for t in (tau, tau / 3, tau / 2):
        rep = mode_coverage(samples, CENTROIDS, t)
        covered, within = coverage_by_loops(samples, CENTROIDS, t)
        assert rep.modes_covered == covered and rep.within == within
        assert rep.modes_covered <= rep.modes_total


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_coverage_ignores_sample_order(seed):
    rng = np.random.default_rng(seed)
    samples = CENTROIDS[rng.integers(0, 8, size=40)] + rng.uniform(0, 0.6) * rng.normal(size=(40, 1, 15, 15))
    a = mode_coverage(samples, CENTROIDS, 3.0)
    b = mode_coverage(samples[rng.permutation(40)], CENTROIDS, 3.0)
    assert a.as_dict() == b.as_dict()


def test_coverage_errors():
    with pytest.raises(ContractError):
        mode_coverage(np.zeros((0, 1, 15, 15)), CENTROIDS, 1.0)
    with pytest.raises(ContractError):
        mode_coverage(CENTROIDS, CENTROIDS, 0.0)


def test_inception_endpoints():
    p = np.full((7, 4), 0.25)
    assert abs(proxy_inception_score(p) - 1.0) <= 1e-10
    onehot = np.tile(np.eye(5), (3, 1))
    assert abs(proxy_inception_score(onehot) - 5.0) <= 1e-10


def kl_oracle(p):
    n, k = len(p), len(p[0])
    pbar = [sum(p[i][j] for i in range(n)) / n for j in range(k)]
    total = 0.0
    for i in range(n):
        total += sum(p[i][j] * math.log(p[i][j] / pbar[j]) for j in range(k) if p[i][j] > 0)
    return math.exp(total / n)


def test_inception_matches_independent_kl():
    rng = np.random.default_rng(1)
    for _ in range(5):
        p = rng.dirichlet(np.ones(4), size=10)
        assert abs(proxy_inception_score(p) - kl_oracle(p.tolist())) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_inception_row_permutation_and_bounds(seed, k):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(k, 0.3), size=12)
    s = proxy_inception_score(p)
    assert abs(s - proxy_inception_score(p[rng.permutation(12)])) <= 1e-12 * s
    assert 1.0 - 1e-12 <= s <= k + 1e-12


def test_inception_rejects_unnormalized_rows():
    with pytest.raises(ContractError):
        proxy_inception_score(np.array([[0.5, 0.6]]))
    with pytest.raises(ContractError):
        proxy_inception_score(np.array([[1.2, -0.2]]))


def test_memorized_copies_have_zero_distance():
    train = np.random.default_rng(2).normal(size=(30, 1, 4, 4))
    nn = memorization_check(train[[3, 7, 7]], train)
    assert nn.min == 0.0 and nn.mean == 0.0
    assert nn.index.tolist() == [3, 7, 7]


def test_shifted_copies_sit_at_noise_norm():
    rng = np.random.default_rng(3)
    train = 10.0 * rng.normal(size=(20, 1, 4, 4))
    eta = 1e-3
    noise = rng.normal(size=train.shape)
    noise *= eta / np.linalg.norm(noise.reshape(20, -1), axis=1).reshape(-1, 1, 1, 1)
    nn = memorization_check(train + noise, train)
    assert np.allclose(nn.distances, eta, rtol=1e-9, atol=0)


def test_memorization_matches_double_loop():
    rng = np.random.default_rng(4)
    s, t = rng.normal(size=(2, 100, 1, 2, 3))
    nn = memorization_check(s, t)
    for i in range(100):
        best = min(math.sqrt(sum((a - b) ** 2 for a, b in zip(s[i].ravel(), t[j].ravel()))) for j in range(100))
        assert nn.distances[i] == pytest.approx(best, rel=1e-13)


def test_memorization_geometry_mismatch():
    with pytest.raises(DimensionError):
        memorization_check(np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 4, 5)))


def test_metrics_are_deterministic():
    rng = np.random.default_rng(5)
    s = rng.normal(size=(50, 1, 15, 15))
    assert mode_coverage(s, CENTROIDS, 20.0) == mode_coverage(s, CENTROIDS, 20.0)
    assert memorization_check(s, s[::-1]).as_dict() == memorization_check(s, s[::-1]).as_dict()


def test_report_text_roundtrip():
    values = {"modes_covered": 7, "tau": 4.5, "recon_error": 0.1 + 0.2}
    parsed = parse_report(format_report(values))
    assert parsed == {"modes_covered": "7", "tau": "4.5", "recon_error": repr(0.1 + 0.2)}
    assert float(parsed["recon_error"]) == 0.1 + 0.2
    header, row = format_table(values).splitlines()
    assert header.split("\t") == list(values)
    with pytest.raises(ContractError):
        parse_report("no separator here\n")


@pytest.mark.slow
def test_proxy_classifier_is_accurate():
    train = make_synthetic(blobs8(seed=0, samples_per_mode=128))
    held = make_synthetic(blobs8(seed=1000, samples_per_mode=64))
    clf = train_classifier(train, epochs=4, seed=0)
    assert clf.accuracy(held) >= 0.95
    probs = clf.probabilities(held.images[:10])
    assert np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
