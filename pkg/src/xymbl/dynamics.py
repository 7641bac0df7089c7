"""Checkerboard quenches: Krylov propagation and the imbalance observable.

Time is in ns and energies in MHz, so a matrix element ``f`` accumulates the
phase ``2*pi*1e-3*f*t`` radians.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .hamiltonian import SparseHamiltonian, apply
from .lattice import CouplingGraph, SiteId

__all__ = [
    "PHASE_PER_MHZ_NS",
    "Parity",
    "InitialPattern",
    "ImbalanceTrace",
    "KrylovConvergenceError",
    "checkerboard",
    "initial_state",
    "krylov_step",
    "KrylovPropagator",
    "run_quench",
    "geometric_time_grid",
    "linear_time_grid",
]

PHASE_PER_MHZ_NS = 2.0 * math.pi * 1e-3

KRYLOV_TOL = 1e-14
M_MIN = 6
M_MAX = 30
MAX_HALVINGS = 20


class KrylovConvergenceError(ArithmeticError):
    pass


class Parity(str, enum.Enum):
    EVEN = "CheckerboardEven"
    ODD = "CheckerboardOdd"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class InitialPattern:
    excited: frozenset
    label: Parity = Parity.CUSTOM

    @property
    def n(self) -> int:
        return len(self.excited)

    def excited_indices(self) -> list[int]:
        return sorted(s.index if isinstance(s, SiteId) else int(s) for s in self.excited)


def checkerboard(graph: CouplingGraph, parity: Parity | str = Parity.EVEN) -> InitialPattern:
    """Sites with ``(row + col) % 2 == 0`` (even) or ``== 1`` (odd) are excited."""
    if graph.n_sites < 1:
        raise ValueError("graph has no sites")
    parity = _parse_parity(parity)
    if parity is Parity.CUSTOM:
        raise ValueError("checkerboard parity must be even or odd")
    want = 0 if parity is Parity.EVEN else 1
    excited = frozenset(s for s in graph.sites if (s.row + s.col) % 2 == want)
    return InitialPattern(excited, parity)


def _parse_parity(parity) -> Parity:
    if isinstance(parity, Parity):
        return parity
    key = str(parity).strip().lower()
    aliases = {"even": Parity.EVEN, "odd": Parity.ODD, "checkerboardeven": Parity.EVEN,
               "checkerboardodd": Parity.ODD, "custom": Parity.CUSTOM}
    if key not in aliases:
        raise ValueError(f"unknown parity {parity!r}")
    return aliases[key]


def initial_state(H: SparseHamiltonian, pattern: InitialPattern) -> np.ndarray:
    if pattern.n != H.basis.n_excitations:
        raise ValueError(
            f"pattern excites {pattern.n} sites but the Hamiltonian sector has n={H.basis.n_excitations}")
    psi = np.zeros(H.dim, dtype=np.complex128)
    psi[H.basis.rank(H.basis.config_of(pattern.excited_indices()))] = 1.0
    return psi


class _KrylovBasis:
    """Lanczos data for one starting vector, reusable for any step length."""

    def __init__(self, H, v: np.ndarray, m_max: int):
        self.H = H
        self.norm = np.linalg.norm(v)
        self.m_cap = min(m_max, len(v))
        self.V = np.empty((self.m_cap, len(v)), dtype=np.complex128)
        self.alpha = np.zeros(self.m_cap)
        self.beta = np.zeros(self.m_cap)
        self.V[0] = v / self.norm
        self.m = 0
        self.invariant = False

    def extend(self) -> None:
        """Add one Lanczos vector: classical Gram-Schmidt, applied twice."""
        k = self.m
        w = apply(self.H, self.V[k])
        Vk = self.V[: k + 1]
        for sweep in range(2):
            c = np.conj(np.dot(w.conj(), Vk.T))
            if sweep == 0:
                self.alpha[k] = c[k].real
            w -= np.dot(c, Vk)
        b = np.linalg.norm(w)
        self.beta[k] = b
        self.m = k + 1
        scale = max(1.0, float(np.max(np.abs(self.alpha[: self.m]))))
        self.invariant = b <= 1e-14 * scale
        if self.m < self.m_cap and not self.invariant:
            self.V[self.m] = w / b

    def solve(self, tau: float):
        """Return ``(vector, error)`` for ``exp(-i tau H) v`` in the current basis."""
        m = self.m
        c = _small_expm_e1(self.alpha[:m], self.beta[:m], tau)
        err = 0.0 if self.invariant else abs(tau) * self.beta[m - 1] * abs(c[-1])
        return self.norm * np.dot(c, self.V[:m]), err

    def error(self, tau: float) -> float:
        if self.invariant:
            return 0.0
        m = self.m
        c = _small_expm_e1(self.alpha[:m], self.beta[:m], tau)
        return abs(tau) * self.beta[m - 1] * abs(c[-1])

    @property
    def exhausted(self) -> bool:
        return self.invariant or self.m == self.m_cap


def _small_expm_e1(alpha: np.ndarray, beta: np.ndarray, tau: float) -> np.ndarray:
    """``exp(-i*tau*T) e_1`` for the symmetric tridiagonal ``T``."""
    m = len(alpha)
    if m == 1:
        return np.array([np.exp(-1j * tau * alpha[0])])
    evals, evecs = eigh_tridiagonal(alpha, beta[: m - 1])
    return evecs @ (np.exp(-1j * tau * evals) * evecs[0])


def _krylov_try(H, v, dt, tol, m_min, m_max, basis=None):
    """One attempt at a full step; returns ``(vector or None, basis)``."""
    tau = PHASE_PER_MHZ_NS * dt
    if basis is None:
        basis = _KrylovBasis(H, v, m_max)
        while basis.m < min(m_min, basis.m_cap) and not basis.invariant:
            basis.extend()
        while True:
            if basis.exhausted or basis.error(tau) <= tol:
                break
            basis.extend()
    out, err = basis.solve(tau)
    if err <= tol or basis.m == len(v):
        return out, basis
    return None, basis


def krylov_step(H, v: np.ndarray, dt: float, *, tol: float = KRYLOV_TOL,
                m_min: int = M_MIN, m_max: int = M_MAX) -> np.ndarray:
    """Approximate ``exp(-i*2pi*1e-3*H*dt) v`` (H in MHz, dt in ns).

    The Krylov dimension grows from ``m_min`` until the a-posteriori error
    ``tau * beta_m * |[exp(-i tau T_m) e_1]_m|`` drops below ``tol``, where
    ``tau * beta_m`` is the last sub-diagonal of the projected ``tau * H``. When ``m_max``
    is not enough the step is split into two halves, recursively; the first
    half reuses the basis already built from ``v``.
    """
    v = _check_state(H, v)
    if dt == 0.0 or not np.any(v):
        return v.copy()
    return _step(H, v, dt, tol, m_min, m_max, 0, None)


def _check_state(H, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.complex128)
    if v.shape != (H.dim,):
        raise ValueError(f"state has shape {v.shape}, expected ({H.dim},)")
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("state contains non-finite values")
    return v


def _step(H, v, dt, tol, m_min, m_max, depth, basis, stats=None):
    out, basis = _krylov_try(H, v, dt, tol, m_min, m_max, basis)
    if out is not None:
        if stats is not None:
            stats.append((depth, dt))
        return out
    if depth >= MAX_HALVINGS:
        raise KrylovConvergenceError(f"Krylov step did not converge after {MAX_HALVINGS} halvings")
    mid = _step(H, v, 0.5 * dt, tol, m_min, m_max, depth + 1, basis, stats)
    return _step(H, mid, 0.5 * dt, tol, m_min, m_max, depth + 1, None, stats)


@dataclass
class KrylovPropagator:
    """Repeated Krylov steps that remember a safe sub-step length.

    Long intervals are cut into equal sub-steps no longer than the current
    hint, so over-long attempts are not retried at every sample time.
    """

    H: SparseHamiltonian
    tol: float = KRYLOV_TOL
    m_min: int = M_MIN
    m_max: int = M_MAX
    step_hint: float = math.inf
    n_steps: int = field(default=0, init=False)

    def propagate(self, v: np.ndarray, dt: float) -> np.ndarray:
        v = _check_state(self.H, v)
        if dt == 0.0:
            return v.copy()
        n_sub = max(1, math.ceil(abs(dt) / self.step_hint - 1e-9)) if math.isfinite(self.step_hint) else 1
        h = dt / n_sub
        for _ in range(n_sub):
            stats: list = []
            v = _step(self.H, v, h, self.tol, self.m_min, self.m_max, 0, None, stats)
            self.n_steps += len(stats)
            deepest = max(d for d, _ in stats)
            # grow after a clean step, otherwise settle on the step that worked
            self.step_hint = 1.25 * abs(h) if deepest == 0 else abs(h) / 2**deepest
        return v


@dataclass(frozen=True)
class ImbalanceTrace:
    times: np.ndarray
    imbalance: np.ndarray
    per_site_occupations: np.ndarray | None = None
    realization_seed: int | None = None
    w: float | None = None
    parity: str | None = None
    norm_error: float = 0.0
    number_error: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        imb = np.asarray(self.imbalance, dtype=np.float64)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "imbalance", imb)
        if t.shape != imb.shape:
            raise ValueError("times and imbalance differ in length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")

    def to_csv(self, site_labels: Sequence[str] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["time_ns", "imbalance"]
        occ = self.per_site_occupations
        if occ is not None:
            labels = site_labels or [f"n_{j}" for j in range(occ.shape[1])]
            header += list(labels)
        writer.writerow(header)
        for k, t in enumerate(self.times):
            row = [repr(float(t)), repr(float(self.imbalance[k]))]
            if occ is not None:
                row += [repr(float(x)) for x in occ[k]]
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, source: str = "<csv>") -> "ImbalanceTrace":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{source}:1: empty file") from None
        if header[:2] != ["time_ns", "imbalance"]:
            raise ValueError(f"{source}:1: expected header time_ns,imbalance, got {header[:2]}")
        times, imb, occ = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{source}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(x) for x in row]
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
            times.append(vals[0])
            imb.append(vals[1])
            occ.append(vals[2:])
        per_site = np.array(occ) if len(header) > 2 else None
        try:
            return cls(np.array(times), np.array(imb), per_site)
        except ValueError as exc:
            raise ValueError(f"{source}: {exc}") from None


def geometric_time_grid(t_min: float = 10.0, t_max: float = 1000.0, n: int = 40) -> np.ndarray:
    """``[0] + n`` log-spaced points from ``t_min`` to ``t_max`` (ns)."""
    return np.concatenate([[0.0], np.geomspace(t_min, t_max, n)])


def linear_time_grid(t_max: float = 1000.0, n: int = 41) -> np.ndarray:
    return np.linspace(0.0, t_max, n)


def run_quench(H: SparseHamiltonian, pattern: InitialPattern, t_max: float | None = None,
               sample_times: Sequence[float] | None = None, *, keep_sites: bool = True,
               tol: float = KRYLOV_TOL, conservation_tol: float = 1e-9) -> ImbalanceTrace:
    """Evolve the pattern's product state and record the imbalance.

    Norm and total excitation number are checked at every sample against
    ``conservation_tol``; a violation raises ``ArithmeticError``.
    """
    if sample_times is None:
        sample_times = geometric_time_grid(t_max=1000.0 if t_max is None else t_max)
    times = np.asarray(sample_times, dtype=np.float64)
    if t_max is None:
        t_max = float(times[-1])
    if times[0] != 0.0 or np.any(np.diff(times) <= 0) or times[-1] > t_max or times[0] < 0:
        raise ValueError("sample_times must ascend strictly from 0 and stay within [0, t_max]")

    psi = initial_state(H, pattern)
    occ_mask = np.ascontiguousarray(H.basis.occupations().T)
    excited = np.zeros(H.basis.n_sites, dtype=bool)
    excited[pattern.excited_indices()] = True
    n_exc = pattern.n
    prop = KrylovPropagator(H, tol=tol)

    imbalance = np.empty(len(times))
    occupations = np.empty((len(times), H.basis.n_sites))
    norm_err = number_err = 0.0
    t_prev = 0.0
    for k, t in enumerate(times):
        psi = prop.propagate(psi, t - t_prev)
        t_prev = t
        prob = psi.real**2 + psi.imag**2
        nj = np.array([np.add.reduce(prob, where=occ_mask[j]) for j in range(len(occ_mask))])
        occupations[k] = nj
        norm_err = max(norm_err, abs(prob.sum() - 1.0))
        number_err = max(number_err, abs(nj.sum() - n_exc))
        if norm_err > conservation_tol or number_err > conservation_tol:
            raise ArithmeticError(
                f"conservation violated at t={t} ns: norm error {norm_err:.2e}, number error {number_err:.2e}")
        imbalance[k] = _imbalance(nj, excited)
    real = H.realization
    return ImbalanceTrace(times, imbalance, occupations if keep_sites else None,
                          real.seed if real is not None else None,
                          real.w if real is not None else None,
                          pattern.label.value, norm_err, number_err)


def _imbalance(nj: np.ndarray, excited: np.ndarray) -> float:
    n1 = nj[excited].mean() if excited.any() else 0.0
    n0 = nj[~excited].mean() if (~excited).any() else 0.0
    return float((n1 - n0) / (n1 + n0))
