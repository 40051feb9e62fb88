import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from chemorepulsion.sparse import (AssemblyPattern, Factorization, LinearSolveError, bicgstab, coo_to_csr,
                                   relative_residual, solve_direct, solve_general, solve_spd,
                                   triplets_to_csr, write_matrix_market)


def dense_from_triplets(rows, cols, vals, shape):
    D = np.zeros(shape)
    for r, c, v in zip(rows, cols, vals):
        D[r, c] += v
    return D


def random_spd(rng, n, density=0.2):
    B = sp.random(n, n, density=density, random_state=rng)
    return (B @ B.T + n * sp.identity(n)).tocsr()


def test_duplicates_summed_against_dense(rng):
    rows = rng.integers(0, 7, 200)
    cols = rng.integers(0, 5, 200)
    vals = rng.normal(size=200)
    A = coo_to_csr(rows, cols, vals, (7, 5))
    np.testing.assert_allclose(A.toarray(), dense_from_triplets(rows, cols, vals, (7, 5)), atol=1e-13)
    assert A.has_canonical_format
    assert A.nnz == len(set(zip(rows.tolist(), cols.tolist())))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.floats(-1e3, 1e3)), min_size=1, max_size=60),
       st.randoms(use_true_random=False))
def test_order_invariance(triplets, rnd):
    shuffled = list(triplets)
    rnd.shuffle(shuffled)
    A = triplets_to_csr(triplets, (6, 6))
    B = triplets_to_csr(shuffled, (6, 6))
    # identical stored arrays, not just equal to rounding
    np.testing.assert_array_equal(A.indptr, B.indptr)
    np.testing.assert_array_equal(A.indices, B.indices)
    np.testing.assert_array_equal(A.data, B.data)


def test_empty_and_out_of_range():
    A = triplets_to_csr([], (3, 4))
    assert A.shape == (3, 4) and A.nnz == 0
    with pytest.raises(IndexError, match=r"\(3, 0"):
        coo_to_csr([0, 3], [0, 0], [1.0, 2.0], (3, 3))


def test_assembly_pattern_matches(rng):
    rows = rng.integers(0, 9, 300)
    cols = rng.integers(0, 9, 300)
    pat = AssemblyPattern(rows, cols, (9, 9))
    for _ in range(3):
        vals = rng.normal(size=300)
        np.testing.assert_allclose(pat.matrix(vals).toarray(), dense_from_triplets(rows, cols, vals, (9, 9)),
                                   atol=1e-13)


def test_cg_twenty_random_spd(rng):
    for n in rng.integers(5, 120, 20):
        A = random_spd(rng, int(n))
        b = rng.normal(size=n)
        x = solve_spd(A, b, tol=1e-10)
        assert relative_residual(A, x, b) <= 1e-10
        np.testing.assert_allclose(x, np.linalg.solve(A.toarray(), b), rtol=1e-7, atol=1e-9)


def test_cg_zero_rhs_and_identity():
    A = sp.identity(4, format="csr")
    np.testing.assert_array_equal(solve_spd(A, np.zeros(4)), np.zeros(4))
    np.testing.assert_allclose(solve_spd(A, np.arange(4.0)), np.arange(4.0))


def test_cg_detects_indefinite():
    A = sp.diags([1.0, -1.0, 2.0]).tocsr()
    with pytest.raises(LinearSolveError):
        solve_spd(A, np.ones(3), jacobi=False)


def test_cg_iteration_limit():
    A = sp.diags(np.linspace(1, 1e4, 200)).tocsr()
    with pytest.raises(LinearSolveError) as info:
        solve_spd(A, np.ones(200), max_iter=2, jacobi=False)
    assert info.value.iterations == 2


def test_bicgstab_nonsymmetric(rng):
    for _ in range(10):
        n = 60
        A = (sp.random(n, n, density=0.1, random_state=rng) + 4 * sp.identity(n)).tocsr()
        b = rng.normal(size=n)
        x = bicgstab(A, b, tol=1e-10)
        assert relative_residual(A, x, b) <= 1e-10


def test_direct_and_fallback(rng):
    A = (sp.random(30, 30, density=0.2, random_state=rng) + 3 * sp.identity(30)).tocsr()
    b = rng.normal(size=30)
    ref = np.linalg.solve(A.toarray(), b)
    np.testing.assert_allclose(solve_direct(A, b), ref, rtol=1e-10)
    np.testing.assert_allclose(solve_general(A, b, method="direct"), ref, rtol=1e-10)
    np.testing.assert_allclose(solve_general(A, b, max_iter=1), ref, rtol=1e-10)
    with pytest.raises(LinearSolveError):
        solve_general(A, b, max_iter=1, fallback=False)
    np.testing.assert_allclose(Factorization(A).solve(b), ref, rtol=1e-10)


def test_shape_checks():
    with pytest.raises(ValueError):
        solve_spd(sp.identity(3), np.ones(2))
    with pytest.raises(ValueError):
        solve_general(sp.identity(3), np.ones(3), method="gmres")


def test_matrix_market(tmp_path):
    A = sp.csr_matrix(np.array([[1.0, 0.0], [1 / 3, -2.5]]))
    path = tmp_path / "a.mtx"
    write_matrix_market(A, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "%%MatrixMarket matrix coordinate real general"
    assert lines[1] == "2 2 3"
    assert lines[3].split()[:2] == ["2", "1"]
    assert float(lines[3].split()[2]) == 1 / 3
    import scipy.io
    np.testing.assert_array_equal(scipy.io.mmread(str(path)).toarray(), A.toarray())


def test_duplicate_pair_and_empty_square():
    A = triplets_to_csr([(0, 0, 1.0), (0, 0, 2.0)], (1, 1))
    assert A.nnz == 1 and A[0, 0] == 3.0
    Z = triplets_to_csr([], (2, 2))
    assert Z.nnz == 0 and not Z.toarray().any()


def test_random_5x5_dense_reconstruction_exact(rng):
    rows, cols = rng.integers(0, 5, 40), rng.integers(0, 5, 40)
    vals = rng.integers(-9, 9, 40).astype(float)  # integer sums are exact
    np.testing.assert_array_equal(coo_to_csr(rows, cols, vals, (5, 5)).toarray(),
                                  dense_from_triplets(rows, cols, vals, (5, 5)))


def test_poisson_1d_cg():
    A = sp.diags([-np.ones(3), 2 * np.ones(4), -np.ones(3)], [-1, 0, 1]).tocsr()
    np.testing.assert_allclose(solve_spd(A, np.ones(4)), [2, 3, 3, 2], rtol=1e-10)


def test_general_small_systems(rng):
    A = sp.csr_matrix(np.array([[2.0, 1.0], [0.0, 1.0]]))
    np.testing.assert_allclose(solve_general(A, np.array([3.0, 1.0])), [1, 1], rtol=1e-10)
    b = rng.normal(size=7)
    np.testing.assert_allclose(solve_general(sp.identity(7, format="csr"), b), b)
    # upwinded 1D convection-diffusion
    n, peclet = 40, 20.0
    h = 1 / (n + 1)
    A = sp.diags([-(1 / h**2 + peclet / h) * np.ones(n - 1), (2 / h**2 + peclet / h) * np.ones(n),
                  -(1 / h**2) * np.ones(n - 1)], [-1, 0, 1]).tocsr()
    b = np.ones(n)
    np.testing.assert_allclose(solve_general(A, b, fallback=False), np.linalg.solve(A.toarray(), b),
                               rtol=1e-8)


def test_csr_column_indices_increasing(rng):
    A = coo_to_csr(rng.integers(0, 20, 500), rng.integers(0, 20, 500), rng.normal(size=500), (20, 20))
    for i in range(20):
        cols = A.indices[A.indptr[i]:A.indptr[i + 1]]
        assert np.all(np.diff(cols) > 0)
    assert A.nnz == A.indptr[-1]
