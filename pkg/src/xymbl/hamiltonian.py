"""Fixed-excitation sector basis, disorder sampling and the sparse XY Hamiltonian.

Energies are linear frequencies in MHz. Configurations are integers whose
bit ``i`` is the occupation of site ``i``.

Seeding: every random stream is a Philox counter-based generator keyed by a
64-bit integer. Per-task keys come from :func:`mix_seed`, which hashes
``(seed_base, *indices)`` through :class:`numpy.random.SeedSequence`.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .lattice import CouplingGraph

__all__ = [
    "MAX_SITES",
    "SectorBasis",
    "DisorderRealization",
    "SparseHamiltonian",
    "enumerate_sector",
    "mix_seed",
    "make_rng",
    "sample_disorder",
    "hopping_matrix",
    "build_hamiltonian",
    "apply",
    "dump_binary",
    "load_binary",
]

MAX_SITES = 30


class CapacityError(ValueError):
    """Sector too large for the in-memory basis."""


@functools.lru_cache(maxsize=8)
def _sector_states(L: int, n: int) -> np.ndarray:
    # states(l, k) = states(l-1, k) ++ (states(l-1, k-1) | 1 << (l-1)); both halves
    # are ascending and every element of the second exceeds the first.
    prev = {0: np.zeros(1, dtype=np.int64)}
    for l in range(1, L + 1):
        cur = {}
        for k in range(max(0, n - (L - l)), min(l, n) + 1):
            parts = []
            if k <= l - 1 and k in prev:
                parts.append(prev[k])
            if k >= 1 and (k - 1) in prev:
                parts.append(prev[k - 1] | np.int64(1 << (l - 1)))
            cur[k] = np.concatenate(parts)
        prev = cur
    states = prev[n]
    states.setflags(write=False)
    return states


@dataclass(frozen=True, eq=False)
class SectorBasis:
    """Ascending list of ``L``-bit configurations with exactly ``n`` set bits."""

    n_sites: int
    n_excitations: int
    states: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.states)

    def __len__(self) -> int:
        return len(self.states)

    def rank(self, configs):
        """Position of each configuration in ``states``; ``KeyError`` if absent."""
        configs = np.asarray(configs, dtype=np.int64)
        pos = np.searchsorted(self.states, configs)
        pos_c = np.minimum(pos, self.dim - 1)
        if np.any(self.states[pos_c] != configs):
            raise KeyError("configuration outside the sector")
        return pos if pos.ndim else int(pos)

    def occupations(self) -> np.ndarray:
        """Boolean ``(dim, L)`` matrix of site occupations."""
        bits = (self.states[:, None] >> np.arange(self.n_sites, dtype=np.int64)) & 1
        return bits.astype(bool)

    def config_of(self, sites) -> int:
        return int(sum(1 << int(i) for i in sites))


def enumerate_sector(L: int, n: int) -> SectorBasis:
    if L > MAX_SITES:
        raise CapacityError(f"L={L} exceeds the supported maximum of {MAX_SITES} sites")
    if L < 0 or not (0 <= n <= L):
        raise ValueError(f"need 0 <= n <= L, got L={L}, n={n}")
    return SectorBasis(L, n, _sector_states(L, n))


def mix_seed(seed_base: int, *indices: int) -> int:
    """Deterministic 64-bit key for the task identified by ``indices``."""
    ss = np.random.SeedSequence([int(seed_base) & (2**64 - 1), *[int(i) for i in indices]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


@dataclass(frozen=True)
class DisorderRealization:
    w: float
    potentials: tuple[float, ...]
    seed: int

    @property
    def n_sites(self) -> int:
        return len(self.potentials)

    def as_array(self) -> np.ndarray:
        return np.array(self.potentials, dtype=np.float64)


def sample_disorder(L: int, w: float, seed: int) -> DisorderRealization:
    """Uniform on-site potentials in ``[-w, w]`` from a Philox stream keyed by ``seed``."""
    if not (w >= 0 and math.isfinite(w)):
        raise ValueError(f"disorder strength must be finite and non-negative, got {w}")
    if L < 1:
        raise ValueError(f"L must be positive, got {L}")
    u = make_rng(seed).random(L)
    h = w * (2.0 * u - 1.0)
    return DisorderRealization(float(w), tuple(float(x) for x in h), int(seed))


@functools.lru_cache(maxsize=2)
def hopping_matrix(graph: CouplingGraph, n: int) -> sp.csr_matrix:
    """Off-diagonal XY part in the ``n``-excitation sector (disorder independent).

    Cached because it dominates build time for large sectors and is shared
    by every disorder realization on the same graph.
    """
    basis = enumerate_sector(graph.n_sites, n)
    states = basis.states
    dim = basis.dim
    bonds = [(int(i), int(j), float(J)) for i, j, J in zip(*graph.bond_arrays()) if J != 0.0]
    # CSR arrays are filled in place (int32 indices): a COO detour triples peak memory
    counts = np.zeros(dim, dtype=np.int64)
    for i, j, _ in bonds:
        counts += ((states >> i) ^ (states >> j)) & 1
    indptr = np.zeros(dim + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    nnz = int(indptr[-1])
    idx_dtype = np.int32 if max(nnz, dim) < 2**31 else np.int64
    indices = np.empty(nnz, dtype=idx_dtype)
    data = np.empty(nnz, dtype=np.float64)
    fill = indptr[:-1].copy()
    for i, j, J in bonds:
        # exactly one of (i, j) occupied: hop to the swapped configuration
        src = np.flatnonzero(((states >> i) ^ (states >> j)) & 1)
        dst = np.searchsorted(states, states[src] ^ ((1 << i) | (1 << j)))
        pos = fill[src]
        indices[pos] = dst
        data[pos] = J
        fill[src] += 1
        del src, dst, pos
    mat = sp.csr_matrix((data, indices, indptr), shape=(dim, dim))
    mat.sort_indices()
    return mat


@dataclass(frozen=True, eq=False)
class SparseHamiltonian:
    """Sector-restricted real symmetric XY Hamiltonian, in MHz.

    Stored as a shared off-diagonal hopping matrix plus the realization's
    diagonal; :attr:`matrix` assembles the full CSR matrix on demand.
    """

    basis: SectorBasis
    hopping: sp.csr_matrix
    diagonal: np.ndarray
    graph: CouplingGraph | None = None
    realization: DisorderRealization | None = None

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def shape(self) -> tuple[int, int]:
        return (self.dim, self.dim)

    @property
    def dtype(self):
        return np.dtype(np.float64)

    @functools.cached_property
    def matrix(self) -> sp.csr_matrix:
        m = (self.hopping + sp.diags(self.diagonal)).tocsr()
        m.sort_indices()
        return m

    def toarray(self) -> np.ndarray:
        a = self.hopping.toarray()
        a[np.diag_indices(self.dim)] += self.diagonal
        return a

    def apply(self, v: np.ndarray) -> np.ndarray:
        return apply(self, v)

    def __matmul__(self, v):
        return apply(self, v)

    @classmethod
    def from_matrix(cls, matrix) -> "SparseHamiltonian":
        """Wrap an arbitrary real symmetric matrix (tests, toy problems)."""
        m = sp.csr_matrix(matrix, dtype=np.float64)
        diag = m.diagonal().copy()
        off = (m - sp.diags(diag)).tocsr()
        off.eliminate_zeros()
        dim = m.shape[0]
        basis = SectorBasis(0, 0, np.arange(dim, dtype=np.int64))
        return cls(basis, off, diag)


def build_hamiltonian(graph: CouplingGraph, realization: DisorderRealization, n: int) -> SparseHamiltonian:
    if realization.n_sites != graph.n_sites:
        raise ValueError(
            f"realization has {realization.n_sites} potentials, graph has {graph.n_sites} sites")
    basis = enumerate_sector(graph.n_sites, n)
    hop = hopping_matrix(graph, n)
    h = realization.as_array()
    diagonal = np.zeros(basis.dim)
    for i in range(graph.n_sites):
        diagonal += ((basis.states >> i) & 1) * h[i]
    return SparseHamiltonian(basis, hop, diagonal, graph, realization)


def apply(H: SparseHamiltonian, v: np.ndarray) -> np.ndarray:
    """``H @ v`` for real or complex vectors (or ``(dim, k)`` blocks).

    Real and imaginary parts go through the real CSR kernel separately; row
    traversal order is fixed, so results are deterministic.
    """
    v = np.asarray(v)
    if v.shape[0] != H.dim:
        raise ValueError(f"vector length {v.shape[0]} does not match dimension {H.dim}")
    diag = H.diagonal if v.ndim == 1 else H.diagonal[:, None]
    if np.iscomplexobj(v):
        out = np.empty(v.shape, dtype=np.result_type(v.dtype, np.complex128))
        out.real = H.hopping @ v.real
        out.imag = H.hopping @ v.imag
        out += diag * v
        return out
    return H.hopping @ v + diag * v


_MAGIC = b"XYMBLCSR"


def dump_binary(H: SparseHamiltonian, path) -> None:
    """Little-endian dump: magic, dim (u64), nnz (u64), indptr (i64[dim+1]),
    indices (i32[nnz]), values (f64[nnz])."""
    m = H.matrix
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ", m.shape[0], m.nnz))
        fh.write(m.indptr.astype("<i8").tobytes())
        fh.write(m.indices.astype("<i4").tobytes())
        fh.write(m.data.astype("<f8").tobytes())


def load_binary(path) -> sp.csr_matrix:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a sparse Hamiltonian dump")
    dim, nnz = struct.unpack_from("<QQ", data, 8)
    off = 24
    indptr = np.frombuffer(data, "<i8", dim + 1, off)
    off += 8 * (dim + 1)
    indices = np.frombuffer(data, "<i4", nnz, off)
    off += 4 * nnz
    values = np.frombuffer(data, "<f8", nnz, off)
    return sp.csr_matrix((values.copy(), indices.copy(), indptr.copy()), shape=(dim, dim))
