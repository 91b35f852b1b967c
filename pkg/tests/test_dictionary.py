import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spgan.dictionary import (
    Dictionary,
    DictionaryTrainLog,
    dict_objective,
    dict_update,
    lipschitz_constant,
    sparse_code,
    train_dictionary,
)
from spgan.errors import (
    ContractError,
    DegenerateStatisticsError,
    DimensionError,
    InitializationError,
    NumericError,
)


def lasso_cd(g, W, lam, tol=1e-10, max_sweeps=200_000):
    """Cyclic coordinate descent, swept until no coordinate moves more than tol."""
    r = np.zeros(W.shape[1])
    resid = g.copy()
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(W.shape[1]):
            wj = W[:, j]
            rho = wj @ resid + r[j] * (wj @ wj)
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / (wj @ wj)
            resid -= wj * (new - r[j])
            biggest = max(biggest, abs(new - r[j]))
            r[j] = new
        if biggest < tol:
            return r
    raise AssertionError("coordinate descent did not settle")


def objective_by_loops(G, W, R, lam):
    total = 0.0
    for i in range(G.shape[0]):
        for c in range(G.shape[1]):
            acc = G[i, c]
            for j in range(W.shape[1]):
                acc -= W[i, j] * R[j, c]
            total += 0.5 * acc * acc
    for j in range(R.shape[0]):
        for c in range(R.shape[1]):
            total += lam * abs(R[j, c])
    return total


def random_dictionary(rng, m, k):
    return Dictionary.from_raw(rng.normal(size=(m, k)))


def test_objective_examples():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(4, 6))
    W = random_dictionary(rng, 4, 3)
    assert dict_objective(G, W, np.zeros((3, 6)), 0.1) == pytest.approx(0.5 * np.sum(G**2), rel=1e-15)
    R = rng.normal(size=(3, 6))
    assert dict_objective(W.atoms @ R, W, R, 0.0) == pytest.approx(0.0, abs=1e-25)
    assert dict_objective(G, W, R, 0.1) == pytest.approx(objective_by_loops(G, W.atoms, R, 0.1), rel=1e-13)
    with pytest.raises(DimensionError):
        dict_objective(G, W, np.zeros((2, 6)), 0.1)


def test_dictionary_requires_unit_columns():
    with pytest.raises(ContractError):
        Dictionary(np.ones((3, 2)))
    with pytest.raises(NumericError):
        Dictionary(np.array([[np.nan], [1.0]]))
    with pytest.raises(ContractError):
        sparse_code(np.ones(3), np.ones((3, 2)), 0.1)


def test_power_iteration_budget():
    W = random_dictionary(np.random.default_rng(1), 30, 40).atoms
    assert lipschitz_constant(W) == pytest.approx(np.linalg.eigvalsh(W.T @ W)[-1], rel=1e-10)
    with pytest.raises(NumericError):
        lipschitz_constant(W, max_iter=3, rtol=0.0)


def test_power_iteration_with_tied_eigenvalues():
    Q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(27, 3)))
    assert lipschitz_constant(Q) == pytest.approx(1.0, rel=1e-12)
    W = Dictionary.from_raw(Q + 1e-4 * np.random.default_rng(3).normal(size=Q.shape)).atoms
    assert lipschitz_constant(W) == pytest.approx(np.linalg.eigvalsh(W.T @ W)[-1], rel=1e-10)


def test_orthonormal_closed_form():
    rng = np.random.default_rng(2)
    for _ in range(10):
        Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        g = rng.normal(size=5)
        r = sparse_code(g, Q, 0.3)
        expected = np.sign(Q.T @ g) * np.maximum(np.abs(Q.T @ g) - 0.3, 0.0)
        assert np.max(np.abs(r - expected)) <= 1e-6


def test_full_shrinkage_gives_zero():
    rng = np.random.default_rng(3)
    W = random_dictionary(rng, 4, 6)
    g = rng.normal(size=4)
    lam = np.max(np.abs(W.atoms.T @ g))
    assert np.array_equal(sparse_code(g, W, lam), np.zeros(6))


@pytest.mark.parametrize("seed", range(20))
def test_matches_coordinate_descent(seed):
    rng = np.random.default_rng(100 + seed)
    # m >= 2: with m = 1 every atom is +-1 and the lasso minimizer is not unique
    m = 2 if seed == 0 else int(rng.integers(2, 5))
    k = 3 if seed == 0 else int(rng.integers(1, 7))
    W = random_dictionary(rng, m, k)
    g = rng.normal(size=m)
    lam = float(rng.uniform(0.05, 0.5))
    r = sparse_code(g, W, lam, max_iter=200_000, tol=0.0)
    oracle = lasso_cd(g, W.atoms, lam)
    assert np.max(np.abs(r - oracle)) <= 1e-5
    assert dict_objective(g, W, r, lam) <= dict_objective(g, W, oracle, lam) + 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 5), st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_ista_objective_monotone(m, k, s, lam, seed):
    rng = np.random.default_rng(seed)
    W = random_dictionary(rng, m, k)
    G = rng.normal(size=(m, s))
    _, hist = sparse_code(G, W, lam, max_iter=300, tol=0.0, return_history=True)
    hist = np.array(hist)
    assert np.all(np.diff(hist) <= 1e-12 * np.abs(hist[:-1]))


def test_one_atom_update():
    g = np.array([3.0, 4.0, 0.0])
    W = Dictionary(np.array([[1.0], [0.0], [0.0]]))
    r = np.array([[1.0]])
    out = dict_update(W, r @ r.T, g[:, None] @ r.T)
    assert np.allclose(out.atoms[:, 0], g / 5.0, rtol=0, atol=1e-15)


def test_update_fixed_point():
    rng = np.random.default_rng(4)
    W = random_dictionary(rng, 6, 4)
    R = rng.normal(size=(4, 30))
    G = W.atoms @ R
    out = dict_update(W, R @ R.T, G @ R.T)
    assert np.max(np.abs(out.atoms - W.atoms)) <= 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_update_does_not_increase_objective(seed):
    rng = np.random.default_rng(seed)
    W = random_dictionary(rng, 5, 7)
    G = rng.normal(size=(5, 40))
    R = sparse_code(G, W, 0.1)
    out = dict_update(W, R @ R.T, G @ R.T)
    assert dict_objective(G, out, R, 0.1) <= dict_objective(G, W, R, 0.1) + 1e-12
    assert np.allclose(np.linalg.norm(out.atoms, axis=0), 1.0, rtol=0, atol=1e-6)


def test_degenerate_statistics():
    W = random_dictionary(np.random.default_rng(0), 3, 2)
    with pytest.raises(DegenerateStatisticsError):
        dict_update(W, np.zeros((2, 2)), np.zeros((3, 2)))


def test_dead_atom_reseeded_from_patch():
    rng = np.random.default_rng(5)
    W = random_dictionary(rng, 4, 2)
    A = np.diag([1.0, 0.0])
    B = np.zeros((4, 2))
    B[:, 0] = W.atoms[:, 0]
    patches = np.array([[0.0, 2.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    out = dict_update(W, A, B, rng=np.random.default_rng(0), patches=patches)
    assert np.array_equal(out.atoms[:, 1], [1.0, 0.0, 0.0, 0.0])


def planted_patches(seed=0, m=27, n=600, noise=0.01):
    """Each patch is a signed multiple of one of three orthonormal atoms, plus slight noise."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(m, 3)))
    which = rng.integers(0, 3, size=n)
    coef = rng.choice([-1.0, 1.0], size=n) * rng.uniform(1.0, 3.0, size=n)
    G = Q[:, which] * coef + noise * rng.normal(size=(m, n))
    return G, Q


def coded_objective(G, W, lam):
    return dict_objective(G, W, sparse_code(G, W, lam, max_iter=5000, tol=1e-12), lam)


def test_planted_dictionary_recovery():
    G, Q = planted_patches()
    # the floor of the ratio is about 2 * lam / |coefficient| even for the planted atoms
    lam = 0.01
    D = train_dictionary(G, 3, lam, epochs=5, seed=0, batch_size=100)
    random_init = random_dictionary(np.random.default_rng(77), G.shape[0], 3)
    ratio = coded_objective(G, D, lam) / coded_objective(G, random_init, lam)
    assert ratio <= 0.05
    assert np.all(np.abs(np.linalg.norm(D.atoms, axis=0) - 1.0) <= 1e-6)
    # one learned atom per planted direction
    assert np.all(np.max(np.abs(Q.T @ D.atoms), axis=1) > 0.999)


def test_zero_epochs_returns_initialization():
    G, _ = planted_patches(n=50)
    D = train_dictionary(G, 5, 0.1, epochs=0, seed=3)
    cols = G / np.linalg.norm(G, axis=0)
    for j in range(5):
        assert np.min(np.max(np.abs(cols - D.atoms[:, [j]]), axis=0)) == 0.0


def test_training_is_deterministic():
    G, _ = planted_patches(n=300)
    l1, l2 = DictionaryTrainLog(), DictionaryTrainLog()
    a = train_dictionary(G, 4, 0.1, epochs=2, seed=9, batch_size=64, log=l1)
    b = train_dictionary(G, 4, 0.1, epochs=2, seed=9, batch_size=64, log=l2)
    assert np.array_equal(a.atoms, b.atoms)
    assert l1.objectives == l2.objectives


def test_too_few_distinct_patches():
    # two columns, but one is the negation of the other
    G = np.array([[1.0, -2.0], [2.0, -4.0]])
    with pytest.raises(InitializationError):
        train_dictionary(G, 2, 0.1)


def test_full_scale_shape():
    rng = np.random.default_rng(6)
    D = train_dictionary(rng.uniform(-1, 1, size=(27, 400)), 100, 0.1, epochs=1, seed=0, batch_size=200, code_iters=20)
    assert D.shape == (27, 100)


def test_dictionary_file_roundtrip(tmp_path):
    D = random_dictionary(np.random.default_rng(7), 9, 5)
    D.save(tmp_path / "d.spgdict")
    assert (tmp_path / "d.spgdict").read_bytes()[:8] == b"SPGDICT1"
    assert np.array_equal(Dictionary.load(tmp_path / "d.spgdict").atoms, D.atoms)
