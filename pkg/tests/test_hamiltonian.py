import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import pauli_hamiltonian
from xymbl.hamiltonian import (CapacityError, DisorderRealization, SparseHamiltonian, apply, build_hamiltonian,
                               dump_binary, enumerate_sector, load_binary, mix_seed, sample_disorder)
from xymbl.lattice import build_chain, build_rectangle


@pytest.mark.parametrize("L,n,dim", [(21, 10, 352716), (2, 1, 2), (14, 7, 3432), (5, 0, 1), (5, 5, 1)])
def test_sector_dimension(L, n, dim):
    assert enumerate_sector(L, n).dim == dim == math.comb(L, n)


def test_two_site_states():
    assert enumerate_sector(2, 1).states.tolist() == [0b01, 0b10]


@given(st.integers(1, 16).flatmap(lambda L: st.tuples(st.just(L), st.integers(0, L))))
@settings(max_examples=40, deadline=None)
def test_sector_invariants(Ln):
    L, n = Ln
    b = enumerate_sector(L, n)
    s = b.states
    assert len(s) == math.comb(L, n)
    assert np.all(np.diff(s) > 0)
    assert all(bin(int(x)).count("1") == n for x in s[:200])
    assert np.array_equal(b.rank(s), np.arange(len(s)))


def test_rank_rejects_foreign_config():
    b = enumerate_sector(6, 3)
    with pytest.raises(KeyError):
        b.rank(0b1111)


def test_sector_errors():
    with pytest.raises(CapacityError):
        enumerate_sector(31, 3)
    with pytest.raises(ValueError):
        enumerate_sector(5, 6)
    with pytest.raises(ValueError):
        enumerate_sector(5, -1)


def test_zero_disorder_potentials():
    assert sample_disorder(5, 0.0, 99).potentials == (0.0,) * 5


def test_disorder_bounds_and_mean():
    vals = np.concatenate([sample_disorder(70, 50.0, mix_seed(3, k)).as_array() for k in range(200)])
    assert vals.size >= 10**4
    assert vals.min() >= -50.0 and vals.max() <= 50.0
    assert abs(vals.mean()) < 1.0


def test_disorder_deterministic():
    a = sample_disorder(21, 100.0, 12345)
    b = sample_disorder(21, 100.0, 12345)
    assert a.potentials == b.potentials
    assert a != sample_disorder(21, 100.0, 12346)


def test_disorder_validation():
    with pytest.raises(ValueError):
        sample_disorder(4, -1.0, 0)


def test_mix_seed_distinct_and_stable():
    seeds = {mix_seed(7, w, r) for w in range(5) for r in range(50)}
    assert len(seeds) == 250
    assert mix_seed(7, 1, 2) == mix_seed(7, 1, 2) != mix_seed(7, 2, 1)


def _two_site(h):
    g = build_chain(2, 3.0)
    return build_hamiltonian(g, DisorderRealization(0.0, tuple(h), 0), 1)


def test_two_site_hopping():
    assert np.array_equal(_two_site((0.0, 0.0)).toarray(), [[0.0, 3.0], [3.0, 0.0]])


def test_two_site_with_potentials():
    # states ascending: 0b01 (site 0 occupied) then 0b10
    assert np.array_equal(_two_site((10.0, -10.0)).toarray(), [[10.0, 3.0], [3.0, -10.0]])


@pytest.mark.parametrize("seed", [0, 1])
def test_matches_pauli_oracle_3x4(seed):
    g = build_rectangle(3, 4, 2.9, 1.1)
    real = sample_disorder(12, 50.0, seed)
    H = build_hamiltonian(g, real, 6)
    Hp = pauli_hamiltonian(g, real.potentials, 6)
    # entrywise identity implies the spectra agree
    assert np.max(np.abs(H.toarray() - Hp)) < 1e-12
    ev = np.linalg.eigvalsh(H.toarray())
    evp = np.linalg.eigvalsh(Hp)
    assert np.max(np.abs(ev - evp)) <= 1e-10 * np.max(np.abs(evp))


def test_hermitian_and_number_conserving():
    g = build_rectangle(3, 3, 2.9, 1.1)
    H = build_hamiltonian(g, sample_disorder(9, 30.0, 4), 4)
    M = H.matrix
    assert abs(M - M.T).max() == 0.0
    s = H.basis.states
    rows, cols = M.nonzero()
    pop = np.array([bin(int(x)).count("1") for x in s])
    assert np.all(pop[rows] == pop[cols])
    assert np.diff(M.indptr).max() <= 1 + len(g.bonds)


@given(st.integers(0, 2**32), st.integers(2, 3), st.integers(2, 4))
@settings(max_examples=15, deadline=None)
def test_trace_identity(seed, r, c):
    L = r * c
    n = L // 2
    g = build_rectangle(r, c, 2.9, 1.1)
    real = sample_disorder(L, 40.0, seed)
    H = build_hamiltonian(g, real, n)
    expect = math.comb(L - 1, n - 1) * sum(real.potentials)
    assert H.diagonal.sum() == pytest.approx(expect, rel=1e-12, abs=1e-9)


def test_zero_model_is_zero_matrix():
    g = build_rectangle(2, 3, 0.0, 0.0)
    H = build_hamiltonian(g, sample_disorder(6, 0.0, 0), 3)
    assert not H.toarray().any()


def test_apply_basic():
    H = _two_site((0.0, 0.0))
    assert np.array_equal(apply(H, np.array([1.0, 0.0])), [0.0, 3.0])
    with pytest.raises(ValueError):
        apply(H, np.ones(3))


def test_apply_columns_match_dense():
    g = build_rectangle(3, 3, 2.9, 1.1)
    H = build_hamiltonian(g, sample_disorder(9, 50.0, 8), 4)
    D = H.toarray()
    for k in range(H.dim):
        e = np.zeros(H.dim)
        e[k] = 1.0
        assert np.max(np.abs(apply(H, e) - D[:, k])) <= 1e-12


def test_expectation_real_for_complex_vectors(rng):
    g = build_rectangle(3, 3, 2.9, 1.1)
    H = build_hamiltonian(g, sample_disorder(9, 50.0, 8), 4)
    v = rng.standard_normal(H.dim) + 1j * rng.standard_normal(H.dim)
    assert abs(np.vdot(v, apply(H, v)).imag) < 1e-12 * np.vdot(v, v).real * 100
    blk = rng.standard_normal((H.dim, 3)) + 1j * rng.standard_normal((H.dim, 3))
    assert np.allclose(apply(H, blk), H.toarray() @ blk, atol=1e-12)


def test_apply_deterministic(rng):
    g = build_rectangle(3, 4, 2.9, 1.1)
    H = build_hamiltonian(g, sample_disorder(12, 50.0, 1), 6)
    v = rng.standard_normal(H.dim) + 1j * rng.standard_normal(H.dim)
    assert np.array_equal(apply(H, v), apply(H, v))


def test_binary_round_trip(tmp_path):
    g = build_rectangle(2, 3, 2.9, 1.1)
    H = build_hamiltonian(g, sample_disorder(6, 10.0, 2), 3)
    p = tmp_path / "h.bin"
    dump_binary(H, p)
    M = load_binary(p)
    assert (M != H.matrix).nnz == 0
    (tmp_path / "bad.bin").write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_binary(tmp_path / "bad.bin")


def test_realization_length_checked():
    g = build_rectangle(2, 3, 2.9, 1.1)
    with pytest.raises(ValueError):
        build_hamiltonian(g, sample_disorder(5, 1.0, 0), 3)


def test_from_matrix_wraps_dense():
    A = np.array([[1.0, 2.0], [2.0, -1.0]])
    H = SparseHamiltonian.from_matrix(A)
    assert np.array_equal(H.toarray(), A)
