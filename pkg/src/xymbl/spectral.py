"""Interior eigenvalues by polynomially filtered block Lanczos, and level statistics.

The pipeline maps ``H`` affinely onto ``[-1, 1]``, applies the Chebyshev
filter ``P(x) = (1/D) sum_n c_n T_n(x)`` with ``c_0 = 1`` and
``c_n = 2 cos(n arccos sigma)``, which peaks at ``P(sigma) = 1``, and runs
block Lanczos on ``P(H_R)``. Eigenvalues of ``H_R`` come back from a
Rayleigh-Ritz step on the span of the converged Ritz vectors.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .hamiltonian import SparseHamiltonian, build_hamiltonian, make_rng, mix_seed, sample_disorder
from .lattice import CouplingGraph

log = logging.getLogger(__name__)

__all__ = [
    "SpectralWindow",
    "SpectralResult",
    "PartialResultError",
    "GapRatioError",
    "extremal_eigenvalues",
    "RescaledOperator",
    "rescale",
    "chebyshev_coefficients",
    "filter_value",
    "chebyshev_filter_apply",
    "estimate_dos",
    "filter_halfwidths",
    "select_order",
    "block_lanczos_polfed",
    "polfed",
    "dense_window",
    "gap_ratios",
    "DisorderEnsemble",
    "GapRatioResult",
    "mean_gap_ratio",
    "R_GOE",
    "R_POISSON",
]

R_POISSON = 2.0 * math.log(2.0) - 1.0
R_GOE = 0.5307

DEFAULT_P = 0.16
DENSE_LIMIT = 4000


class PartialResultError(RuntimeError):
    """Fewer eigenpairs converged than requested; ``result`` holds what did."""

    def __init__(self, message: str, result: "SpectralResult"):
        super().__init__(message)
        self.result = result


class GapRatioError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralWindow:
    target: float = 0.0
    n_ev: int = 200
    order: int | None = None
    threshold: float = DEFAULT_P

    def __post_init__(self):
        if not -1.0 < self.target < 1.0:
            raise ValueError(f"target must lie in (-1, 1), got {self.target}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.n_ev < 2:
            raise ValueError(f"n_ev must be at least 2, got {self.n_ev}")
        if self.order is not None and self.order < 1:
            raise ValueError(f"order must be at least 1, got {self.order}")


@dataclass
class SpectralResult:
    eigenvalues: np.ndarray
    residuals: np.ndarray
    extremal: tuple[float, float]
    dos_estimate: float | None = None
    order_used: int | None = None
    rescaled: np.ndarray | None = None
    n_matvec: int = 0
    soft_restarts: int = 0
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------- step 1

def _is_diagonal(H) -> bool:
    return isinstance(H, SparseHamiltonian) and H.hopping.nnz == 0


def extremal_eigenvalues(H, *, rtol: float = 1e-9, margin: float = 1e-6, max_iter: int = 400,
                         seed: int = 0, widen: bool = True) -> tuple[float, float]:
    """Smallest and largest eigenvalue of ``H`` by Lanczos with full reorthogonalization.

    The interval is widened by ``margin * (e1 - e0)`` on each side (or an
    absolute ``margin`` for a degenerate spectrum) so the rescaled spectrum
    sits strictly inside ``[-1, 1]``.
    """
    if H.dim < 2:
        raise ValueError("need dim >= 2")
    if _is_diagonal(H):
        e0, e1 = float(H.diagonal.min()), float(H.diagonal.max())
    else:
        e0, e1 = _lanczos_extremes(H, rtol, max_iter, seed)
    if not widen:
        return e0, e1
    pad = margin * (e1 - e0)
    if pad <= 0.0:
        pad = margin * max(1.0, abs(e0))
    return e0 - pad, e1 + pad


def _lanczos_extremes(H, rtol, max_iter, seed, max_restarts: int = 5):
    rng = make_rng(seed)
    n = H.dim
    cap = min(n, max_iter)
    V = np.zeros((cap, n))
    alpha = np.zeros(cap)
    beta = np.zeros(cap)
    v = rng.standard_normal(n)
    V[0] = v / np.linalg.norm(v)
    restarts = 0
    prev = None
    for k in range(cap):
        w = H @ V[k]
        alpha[k] = V[k] @ w
        for _ in range(2):
            w -= V[: k + 1].T @ (V[: k + 1] @ w)
        b = np.linalg.norm(w)
        ritz = sla.eigh_tridiagonal(alpha[: k + 1], beta[:k], eigvals_only=True) if k else alpha[:1]
        lo, hi = float(ritz[0]), float(ritz[-1])
        scale = max(hi - lo, abs(lo), abs(hi), 1e-300)
        if k + 1 == n:
            return lo, hi
        if prev is not None and k >= 8:
            if abs(lo - prev[0]) <= rtol * scale and abs(hi - prev[1]) <= rtol * scale:
                return lo, hi
        prev = (lo, hi)
        if k + 1 == cap:
            break
        if b <= 1e-12 * scale:
            # invariant subspace: continue from a fresh random direction
            restarts += 1
            if restarts > max_restarts:
                raise ArithmeticError("Lanczos broke down repeatedly; cannot bound the spectrum")
            w = rng.standard_normal(n)
            for _ in range(2):
                w -= V[: k + 1].T @ (V[: k + 1] @ w)
            b_new = np.linalg.norm(w)
            beta[k] = 0.0
            V[k + 1] = w / b_new
            continue
        beta[k] = b
        V[k + 1] = w / b
    raise ArithmeticError(f"extremal eigenvalues not converged in {cap} Lanczos steps")


# ---------------------------------------------------------------- step 1b

class RescaledOperator:
    """Lazy view ``H_R = (2 H - e0 - e1) / (e1 - e0)``."""

    def __init__(self, H, e0: float, e1: float):
        if not e1 > e0:
            raise ValueError(f"need e1 > e0, got e0={e0}, e1={e1}")
        self.H = H
        self.e0 = float(e0)
        self.e1 = float(e1)
        self.scale = 2.0 / (self.e1 - self.e0)
        self.shift = (self.e0 + self.e1) / (self.e1 - self.e0)
        self.n_matvec = 0

    @property
    def dim(self) -> int:
        return self.H.dim

    def apply(self, v: np.ndarray) -> np.ndarray:
        self.n_matvec += 1 if v.ndim == 1 else v.shape[1]
        return self.scale * (self.H @ v) - self.shift * v

    __matmul__ = apply

    def to_rescaled(self, energies):
        return (2.0 * np.asarray(energies) - self.e0 - self.e1) / (self.e1 - self.e0)

    def to_original(self, x):
        return 0.5 * ((self.e1 - self.e0) * np.asarray(x) + self.e0 + self.e1)


def rescale(H, e0: float, e1: float) -> RescaledOperator:
    return RescaledOperator(H, e0, e1)


# ---------------------------------------------------------------- step 2

def _check_sigma(sigma: float) -> None:
    if not -1.0 < sigma < 1.0:
        raise ValueError(f"sigma must lie strictly inside (-1, 1), got {sigma}")


def chebyshev_coefficients(sigma: float, K: int) -> np.ndarray:
    """``c_n = sqrt(4 - 3 delta_{n0}) cos(n arccos sigma)`` for ``n = 0..K``."""
    n = np.arange(K + 1)
    c = 2.0 * np.cos(n * math.acos(sigma))
    c[0] = 1.0
    return c


def _filter_theta(theta, theta_s: float, K: int):
    """Unnormalized filter at ``x = cos(theta)`` in closed form.

    ``sum_n c_n T_n(cos t) = [D_K(t - t_s) + D_K(t + t_s)] / 2`` with the
    Dirichlet kernel ``D_K(u) = sin((K + 1/2) u) / sin(u / 2)``.
    """
    theta = np.asarray(theta, dtype=np.float64)

    def dk(u):
        s = np.sin(0.5 * u)
        small = np.abs(s) < 1e-12
        out = np.empty_like(u)
        out[~small] = np.sin((K + 0.5) * u[~small]) / s[~small]
        # limit at u = 2 pi j: (2K + 1) * cos(j pi (2K+1)) / cos(j pi)
        j = np.round(u[small] / (2 * np.pi))
        out[small] = (2 * K + 1) * np.cos(np.pi * j * (2 * K + 1)) / np.cos(np.pi * j)
        return out

    t = np.atleast_1d(theta)
    val = 0.5 * (dk(t - theta_s) + dk(t + theta_s))
    return val if theta.ndim else float(val[0])


def _norm_constant(sigma: float, K: int) -> float:
    ts = math.acos(sigma)
    return float(_filter_theta(np.array([ts]), ts, K)[0])


def filter_value(x, sigma: float, K: int):
    """Scalar filter ``P_sigma^K(x)`` for ``x`` in ``[-1, 1]``."""
    _check_sigma(sigma)
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    ts = math.acos(sigma)
    val = _filter_theta(np.arccos(x), ts, K) / _norm_constant(sigma, K)
    return val


def chebyshev_filter_apply(op, v: np.ndarray, sigma: float, K: int) -> np.ndarray:
    """``P_sigma^K(H_R) v`` by the three-term Chebyshev recurrence (K matvecs).

    ``v`` may be a vector or a ``(dim, s)`` block.
    """
    _check_sigma(sigma)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    c = chebyshev_coefficients(sigma, K)
    D = _norm_constant(sigma, K)
    t_prev = np.array(v, dtype=np.float64)
    t_cur = op @ t_prev
    acc = c[0] * t_prev + c[1] * t_cur
    for n in range(2, K + 1):
        t_next = op @ t_cur
        t_next *= 2.0
        t_next -= t_prev
        acc += c[n] * t_next
        t_prev, t_cur = t_cur, t_next
    acc /= D
    return acc


def _jackson(N: int) -> np.ndarray:
    n = np.arange(N)
    q = np.pi / (N + 1)
    return ((N - n + 1) * np.cos(q * n) + np.sin(q * n) / np.tan(q)) / (N + 1)


def chebyshev_moments(op, n_moments: int = 200, n_probe: int = 20, seed: int = 0) -> np.ndarray:
    """Stochastic moments ``mu_n = E[<r|T_n(H_R)|r>] / dim`` with Rademacher probes."""
    if n_probe < 1:
        raise ValueError("n_probe must be >= 1")
    rng = make_rng(seed)
    r = rng.choice(np.array([-1.0, 1.0]), size=(op.dim, n_probe))
    mu = np.zeros(n_moments)
    t_prev = r
    t_cur = op @ r
    mu[0] = np.sum(r * r)
    if n_moments > 1:
        mu[1] = np.sum(r * t_cur)
    for n in range(2, n_moments):
        t_next = 2.0 * (op @ t_cur) - t_prev
        mu[n] = np.sum(r * t_next)
        t_prev, t_cur = t_cur, t_next
    return mu / (n_probe * op.dim)


def kpm_density(mu: np.ndarray, x) -> np.ndarray:
    """Jackson-damped Chebyshev reconstruction of the normalized density at ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    g = _jackson(len(mu))
    n = np.arange(len(mu))
    T = np.cos(np.outer(np.arccos(np.clip(x, -1, 1)), n))
    coef = g * mu
    coef[1:] *= 2.0
    return (T @ coef) / (np.pi * np.sqrt(1.0 - x**2))


def estimate_dos(op, sigma: float, n_probe: int = 20, *, n_moments: int = 200,
                 seed: int = 0, floor: float = 1e-12) -> float:
    """Kernel-polynomial estimate of the normalized eigenvalue density of ``H_R`` at ``sigma``."""
    _check_sigma(sigma)
    mu = chebyshev_moments(op, n_moments, n_probe, seed)
    rho = float(kpm_density(mu, sigma)[0])
    if rho < floor:
        warnings.warn(f"non-positive DOS estimate {rho:.3g} at sigma={sigma}; clamping", stacklevel=2)
        rho = floor
    return rho


def _edge(sigma: float, K: int, p: float, direction: int) -> float:
    """Distance from ``sigma`` to the first point where the filter falls to ``p``."""
    ts = math.acos(sigma)
    D = _norm_constant(sigma, K)

    def g(t):
        return _filter_theta(np.array([t]), ts, K)[0] / D - p

    # x increasing means theta decreasing
    bound = 0.0 if direction > 0 else math.pi
    step = math.pi / (4.0 * (2 * K + 1))
    t0 = ts
    while True:
        t1 = t0 - step if direction > 0 else t0 + step
        if (direction > 0 and t1 <= bound) or (direction < 0 and t1 >= bound):
            t1 = bound
        if g(t1) <= 0.0:
            root = brentq(g, min(t0, t1), max(t0, t1), xtol=1e-15, rtol=1e-13)
            return abs(math.cos(root) - sigma)
        if t1 == bound:
            return abs(math.cos(bound) - sigma)
        t0 = t1


def filter_halfwidths(sigma: float, K: int, p: float = DEFAULT_P) -> tuple[float, float]:
    """``(eps_minus, eps_plus)``: pass-band extent below and above ``sigma``."""
    _check_sigma(sigma)
    return _edge(sigma, K, p, -1), _edge(sigma, K, p, +1)


def select_order(rho: float, n_ev: int, dim: int, p: float = DEFAULT_P, sigma: float = 0.0,
                 k_min: int = 8, k_max: int = 2**16) -> int:
    """Smallest order ``K`` whose pass band ``P >= p`` holds at most ``n_ev`` states.

    The expected count is ``(eps_minus + eps_plus) * rho * dim``; bisection
    over integer ``K`` in ``[k_min, k_max]``.
    """
    if not rho > 0:
        raise ValueError(f"density must be positive, got {rho}")
    if n_ev > dim:
        raise ValueError(f"n_ev={n_ev} exceeds dimension {dim}")
    if n_ev < 2:
        raise ValueError("n_ev must be >= 2")

    def count(K):
        lo, hi = filter_halfwidths(sigma, K, p)
        return (lo + hi) * rho * dim

    if count(k_min) <= n_ev:
        return k_min
    if count(k_max) > n_ev:
        raise ArithmeticError(f"no order up to {k_max} narrows the window to {n_ev} states")
    lo, hi = k_min, k_max
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(mid) <= n_ev:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------- step 3/4

def _next_block(R, basis_blocks, rng, width: int, tol: float = 1e-10):
    """Orthonormal block spanning ``R`` after projecting out ``basis_blocks``.

    Numerically dependent columns are replaced with fresh random directions
    (a soft restart). Returns ``(Q, n_replaced)``; ``R`` is modified in place.
    """
    scale = max(float(np.linalg.norm(R, axis=0).max(initial=0.0)), 1.0)
    for _ in range(2):
        for Qb in basis_blocks:
            R -= Qb @ (Qb.T @ R)
    if width < R.shape[1]:
        Q, _, _ = sla.qr(R, mode="economic", pivoting=True)
        return Q[:, :width], 0
    Q, B = np.linalg.qr(R)
    dep = np.abs(np.diag(B)) < tol * scale
    if not dep.any():
        return Q, 0
    cols = np.flatnonzero(dep)
    fresh = rng.standard_normal((R.shape[0], len(cols)))
    keep = [Q[:, ~dep]] if (~dep).any() else []
    for _ in range(2):
        for Qb in list(basis_blocks) + keep:
            fresh -= Qb @ (Qb.T @ fresh)
    Q[:, cols] = np.linalg.qr(fresh)[0]
    Q = np.linalg.qr(Q)[0]
    return Q, len(cols)


def block_lanczos_polfed(op: RescaledOperator, sigma: float, K: int, n_ev: int,
                         block_size: int = 4, max_blocks: int | None = None, *,
                         tol_filter: float = 1e-8, tol_residual: float = 1e-6,
                         margin: int | None = None, seed: int = 0,
                         check_every: int | None = None, debug: bool = False) -> SpectralResult:
    """Block Lanczos on ``P_sigma^K(H_R)`` with full reorthogonalization.

    Iterates until the ``n_ev + margin`` largest Ritz values of the filtered
    operator have residual below ``tol_filter``; their Ritz vectors give
    eigenvalues of ``H_R`` by Rayleigh-Ritz on their span, kept when
    ``||H_R u - eps u|| <= tol_residual``. Returns the ``n_ev`` eigenvalues
    nearest ``sigma`` (original units in ``eigenvalues``).
    """
    _check_sigma(sigma)
    dim = op.dim
    s = int(block_size)
    if s < 1:
        raise ValueError("block size must be >= 1")
    if n_ev > dim:
        raise ValueError(f"n_ev={n_ev} exceeds dimension {dim}")
    if margin is None:
        margin = max(2, int(math.ceil(0.05 * n_ev)))
    n_want = min(n_ev + margin, dim)
    if max_blocks is None:
        max_blocks = int(math.ceil(3.0 * n_ev / s)) + 4
        if 2 * max_blocks * s >= dim:  # small problem: allow the whole space
            max_blocks = int(math.ceil(dim / s))
    max_blocks = min(max_blocks, int(math.ceil(dim / s)))
    if max_blocks * s < min(n_ev + 1, dim) and max_blocks * s < dim:
        raise ValueError("max_blocks * block_size too small for n_ev")
    if check_every is None:
        check_every = max(1, int(math.ceil(0.05 * n_ev / s)))
    rng = make_rng(seed)
    matvec_start = op.n_matvec

    def F(X):
        return chebyshev_filter_apply(op, X, sigma, K)

    Q0, _ = _next_block(rng.standard_normal((dim, min(s, dim))), [], rng, min(s, dim))
    blocks = [Q0]
    A_blocks: list[np.ndarray] = []
    B_blocks: list[np.ndarray] = []  # B_blocks[j] couples block j+1 to block j
    soft_restarts = 0
    converged = None
    theta = T_vecs = None
    for j in range(max_blocks):
        Qj = blocks[j]
        U = F(Qj)
        if j > 0:
            U -= blocks[j - 1] @ B_blocks[j - 1].T
        Aj = Qj.T @ U
        Aj = 0.5 * (Aj + Aj.T)
        A_blocks.append(Aj)
        R = U - Qj @ Aj
        basis_dim = sum(b.shape[1] for b in blocks)
        full = basis_dim >= dim
        if not full:
            Qn, rep = _next_block(R, blocks, rng, min(s, dim - basis_dim))
            soft_restarts += rep
            B_blocks.append(Qn.T @ R)
            blocks.append(Qn)
            if debug:
                Qall = np.hstack(blocks)
                drift = np.abs(Qall.T @ Qall - np.eye(Qall.shape[1])).max()
                if drift > 1e-10:
                    log.warning("block Lanczos orthogonality drift %.2e at block %d", drift, j)
        last = (j + 1) % check_every == 0 or j == max_blocks - 1 or full
        if not last or (j + 1) * s < n_want:
            continue
        T = _assemble_block_tridiagonal(A_blocks, B_blocks)
        theta, T_vecs = np.linalg.eigh(T)
        order = np.argsort(theta)[::-1]
        theta, T_vecs = theta[order], T_vecs[:, order]
        if full:
            res = np.zeros(len(theta))
        else:
            Bnext = B_blocks[len(A_blocks) - 1]
            res = np.linalg.norm(Bnext @ T_vecs[-Bnext.shape[1]:, :], axis=0)
        top = min(n_want, len(theta))
        if np.all(res[:top] <= tol_filter):
            converged = res
            break
        converged = res
        if full:
            break

    if theta is None:
        raise PartialResultError("block Lanczos produced no Ritz values",
                                 SpectralResult(np.array([]), np.array([]), (op.e0, op.e1)))
    Qall = np.hstack(blocks[: len(A_blocks)])
    ok = converged <= tol_filter
    cand = np.flatnonzero(ok)
    U = Qall @ T_vecs[:, cand]
    HU = op @ U
    # filtered values pair up around sigma, so resolve H_R inside the converged span
    G = U.T @ HU
    eps, Y = np.linalg.eigh(0.5 * (G + G.T))
    U, HU = U @ Y, HU @ Y
    resid = np.linalg.norm(HU - U * eps, axis=0)
    good = resid <= tol_residual
    eps, resid = eps[good], resid[good]
    nearest = np.argsort(np.abs(eps - sigma), kind="stable")[:n_ev]
    sel = nearest[np.argsort(eps[nearest], kind="stable")]
    x, r = eps[sel], resid[sel]
    n_mv = op.n_matvec - matvec_start
    result = SpectralResult(op.to_original(x), r * (op.e1 - op.e0) / 2.0, (op.e0, op.e1),
                            order_used=K, rescaled=x, n_matvec=n_mv, soft_restarts=soft_restarts,
                            info={"blocks": len(A_blocks), "ritz_converged": int(ok.sum())})
    top = min(n_want, len(converged))
    if len(x) < n_ev or not np.all(converged[:top] <= tol_filter):
        raise PartialResultError(
            f"only {len(x)} of {n_ev} eigenpairs converged after {len(A_blocks)} blocks", result)
    return result


def _assemble_block_tridiagonal(A_blocks, B_blocks) -> np.ndarray:
    sizes = [a.shape[0] for a in A_blocks]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    T = np.zeros((offs[-1], offs[-1]))
    for j, a in enumerate(A_blocks):
        T[offs[j]:offs[j + 1], offs[j]:offs[j + 1]] = a
        if j + 1 < len(A_blocks):
            b = B_blocks[j]  # rows: block j+1, cols: block j
            T[offs[j + 1]:offs[j + 2], offs[j]:offs[j + 1]] = b
            T[offs[j]:offs[j + 1], offs[j + 1]:offs[j + 2]] = b.T
    return T


def polfed(H, n_ev: int = 200, sigma: float = 0.0, *, p: float = DEFAULT_P, order: int | None = None,
           block_size: int = 4, max_blocks: int | None = None, window_factor: float = 1.3,
           n_probe: int = 20, n_moments: int = 200, seed: int = 0, **kwargs) -> SpectralResult:
    """Full interior-eigenvalue pipeline: extremes, rescale, DOS, order, block Lanczos.

    ``window_factor`` scales the number of states the order selection aims
    to place above ``p``. At 1.0 the states nearest the window edge sit at
    ``P ~ p`` and converge slowly; 1.3 roughly halves the Lanczos blocks
    needed for a 1e-8 filtered residual.
    """
    if n_ev > H.dim:
        raise ValueError(f"n_ev={n_ev} exceeds dimension {H.dim}")
    e0, e1 = extremal_eigenvalues(H, seed=seed)
    op = rescale(H, e0, e1)
    rho = None
    if order is None:
        rho = estimate_dos(op, sigma, n_probe, n_moments=n_moments, seed=mix_seed(seed, 1))
        target = min(H.dim, max(2, int(round(window_factor * n_ev))))
        order = select_order(rho, target, H.dim, p, sigma)
    res = block_lanczos_polfed(op, sigma, order, n_ev, block_size, max_blocks,
                               seed=mix_seed(seed, 2), **kwargs)
    res.dos_estimate = rho
    res.n_matvec = op.n_matvec
    return res


def dense_window(H, n_ev: int, sigma: float = 0.0, extremal: tuple[float, float] | None = None) -> np.ndarray:
    """The ``n_ev`` eigenvalues nearest ``sigma`` (rescaled units) by dense diagonalization."""
    evals = np.linalg.eigvalsh(H.toarray() if hasattr(H, "toarray") else np.asarray(H))
    e0, e1 = extremal if extremal is not None else (evals[0], evals[-1])
    x = (2.0 * evals - e0 - e1) / (e1 - e0)
    idx = np.sort(np.argsort(np.abs(x - sigma), kind="stable")[:n_ev])
    return evals[idx]


# ---------------------------------------------------------------- statistics

def gap_ratios(eigenvalues: Sequence[float], min_spacing: float = 1e-12) -> np.ndarray:
    """``r_n = min(d_n, d_{n-1}) / max(d_n, d_{n-1})`` for ascending eigenvalues."""
    E = np.asarray(eigenvalues, dtype=np.float64)
    if E.ndim != 1 or len(E) < 3:
        raise GapRatioError("need at least three eigenvalues")
    d = np.diff(E)
    bad = np.flatnonzero(d <= min_spacing)
    if bad.size:
        pairs = ", ".join(f"({i}, {i + 1})" for i in bad[:10])
        raise GapRatioError(f"degenerate or unsorted levels at indices {pairs}")
    return np.minimum(d[1:], d[:-1]) / np.maximum(d[1:], d[:-1])


@dataclass(frozen=True)
class DisorderEnsemble:
    """Graph, disorder strength and sector; realization ``k`` is seeded by
    ``mix_seed(seed_base, k)`` unless ``seeds`` is given explicitly."""

    graph: CouplingGraph
    w: float
    n: int
    seed_base: int = 0
    seeds: tuple[int, ...] | None = None

    def seed(self, k: int) -> int:
        if self.seeds is not None:
            return self.seeds[k]
        return mix_seed(self.seed_base, k)

    def hamiltonian(self, k: int) -> SparseHamiltonian:
        real = sample_disorder(self.graph.n_sites, self.w, self.seed(k))
        return build_hamiltonian(self.graph, real, self.n)


@dataclass
class GapRatioResult:
    mean_r: float
    stderr: float
    per_realization: list
    seeds: list
    failures: dict

    def __iter__(self):
        return iter((self.mean_r, self.stderr))


def window_gap_ratio(H, window: SpectralWindow, seed: int = 0, dense_limit: int = DENSE_LIMIT,
                     **polfed_kwargs) -> float:
    """Mean gap ratio of one Hamiltonian's window eigenvalues."""
    if window.n_ev > H.dim:
        raise ValueError(f"n_ev={window.n_ev} exceeds dimension {H.dim}")
    if H.dim <= dense_limit:
        evals = dense_window(H, window.n_ev, window.target)
    else:
        evals = polfed(H, window.n_ev, window.target, p=window.threshold, order=window.order,
                       seed=seed, **polfed_kwargs).eigenvalues
    return float(gap_ratios(evals).mean())


def mean_gap_ratio(ensemble: DisorderEnsemble, window: SpectralWindow, realizations: int,
                   *, dense_limit: int = DENSE_LIMIT,
                   progress: Callable[[int, float], None] | None = None,
                   **polfed_kwargs) -> GapRatioResult:
    """Average the per-realization window mean of ``r``; stderr across realizations.

    Failed realizations are recorded in ``failures`` and excluded from the
    average rather than silently dropped.
    """
    if realizations < 2:
        raise ValueError("need at least two realizations")
    values, seeds, failures = [], [], {}
    for k in range(realizations):
        seed = ensemble.seed(k)
        seeds.append(seed)
        try:
            r = window_gap_ratio(ensemble.hamiltonian(k), window, seed=seed,
                                 dense_limit=dense_limit, **polfed_kwargs)
        except (PartialResultError, GapRatioError, ArithmeticError) as exc:
            failures[k] = f"{type(exc).__name__}: {exc}"
            log.warning("realization %d failed: %s", k, exc)
            continue
        values.append(r)
        if progress is not None:
            progress(k, r)
    if len(values) < 2:
        raise RuntimeError(f"fewer than two realizations succeeded: {failures}")
    v = np.array(values)
    return GapRatioResult(float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))),
                          values, seeds, failures)
