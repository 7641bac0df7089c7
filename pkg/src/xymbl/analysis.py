"""Fitting chain for imbalance traces and gap-ratio curves.

All regressions are ordinary (or weighted) least squares on straight lines;
power laws are fitted in log-log space so that reported errors are the
standard errors of the fitted slopes.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .dynamics import ImbalanceTrace
from .hamiltonian import make_rng

__all__ = [
    "InsufficientDataError",
    "RankError",
    "NoCrossingError",
    "LineFit",
    "PowerLawFit",
    "DecayLawFit",
    "ThresholdCrossing",
    "BoundaryEstimate",
    "fit_line",
    "fit_power_law",
    "fit_beta_vs_size",
    "fit_decay_law",
    "fit_exponential_law",
    "extract_w_star",
    "ergodic_boundary",
    "curve_crossing",
    "ensemble_average",
    "beta_per_realization",
    "inputs_digest",
]

DEFAULT_WINDOW = (250.0, 1000.0)


class InsufficientDataError(ValueError):
    pass


class RankError(ValueError):
    pass


class NoCrossingError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LineFit:
    """``y = intercept + slope * x`` with the covariance of ``(intercept, slope)``."""

    intercept: float
    slope: float
    covariance: np.ndarray
    rss: float
    n: int

    @property
    def intercept_stderr(self) -> float:
        return math.sqrt(max(self.covariance[0, 0], 0.0))

    @property
    def slope_stderr(self) -> float:
        return math.sqrt(max(self.covariance[1, 1], 0.0))


def fit_line(x, y, sigma=None) -> LineFit:
    """Least-squares straight line.

    Without ``sigma`` the covariance is ``s^2 (X^T X)^-1`` with
    ``s^2 = RSS / (n - 2)`` (NaN for two points). With ``sigma`` the fit is
    weighted by ``1 / sigma^2`` and the covariance is ``(X^T W X)^-1``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise InsufficientDataError("need at least two points for a line")
    w = np.ones(n) if sigma is None else 1.0 / np.asarray(sigma, dtype=np.float64) ** 2
    sw = w.sum()
    xm = (w * x).sum() / sw
    ym = (w * y).sum() / sw
    dx = x - xm
    sxx = (w * dx * dx).sum()
    if sxx <= 0.0 or np.ptp(x) == 0.0:
        raise RankError("all x values coincide; slope is undetermined")
    slope = (w * dx * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    rss = float((w * resid * resid).sum())
    if sigma is None:
        s2 = rss / (n - 2) if n > 2 else float("nan")
    else:
        s2 = 1.0
    cov = s2 * np.array([[1.0 / sw + xm * xm / sxx, -xm / sxx],
                         [-xm / sxx, 1.0 / sxx]])
    return LineFit(float(intercept), float(slope), cov, rss, n)


def inputs_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=np.float64)).tobytes())
    return h.hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    return obj


class _Report:
    def to_dict(self) -> dict:
        return {k: _jsonable(v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


@dataclass(frozen=True)
class PowerLawFit(_Report):
    beta: float
    amplitude: float
    beta_stderr: float
    fit_window: tuple[float, float]
    covariance: np.ndarray
    n_points: int = 0
    digest: str = ""


@dataclass(frozen=True)
class DecayLawFit(_Report):
    c: float
    gamma: float
    c_stderr: float
    gamma_stderr: float
    covariance: np.ndarray
    rss: float = 0.0
    n_points: int = 0
    digest: str = ""

    @property
    def ln_c(self) -> float:
        return math.log(self.c)


@dataclass(frozen=True)
class ThresholdCrossing(_Report):
    w_star: float
    w_star_std: float
    threshold: float
    n_rep: int
    rejected_fraction: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class BoundaryEstimate(_Report):
    w: float | None
    flag: str


def fit_power_law(trace: ImbalanceTrace, t_lo: float = DEFAULT_WINDOW[0],
                  t_hi: float = DEFAULT_WINDOW[1], min_points: int = 4) -> PowerLawFit:
    """Fit ``I(t) = A t^-beta`` by OLS of ``ln I`` on ``ln t`` over ``[t_lo, t_hi]``."""
    if not t_lo < t_hi:
        raise ValueError(f"empty fit window ({t_lo}, {t_hi})")
    t = np.asarray(trace.times)
    y = np.asarray(trace.imbalance)
    inside = (t >= t_lo) & (t <= t_hi)
    pos = inside & (y > 0)
    if pos.sum() < inside.sum():
        warnings.warn(f"{inside.sum() - pos.sum()} non-positive imbalance values excluded from fit",
                      stacklevel=2)
    if pos.sum() < min_points:
        raise InsufficientDataError(
            f"only {pos.sum()} usable samples in [{t_lo}, {t_hi}] ns, need {min_points}")
    fit = fit_line(np.log(t[pos]), np.log(y[pos]))
    return PowerLawFit(-fit.slope, math.exp(fit.intercept), fit.slope_stderr, (float(t_lo), float(t_hi)),
                       fit.covariance, int(pos.sum()), inputs_digest(t[pos], y[pos]))


def fit_beta_vs_size(points: Iterable[Sequence[float]]) -> tuple[float, float, float]:
    """Linear trend of ``beta`` in ``L``; returns ``(slope, intercept, slope_stderr)``.

    Weighted by ``1 / stderr^2`` when every stderr is positive.
    """
    arr = np.asarray(list(points), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("points must be (L, beta, stderr) triples")
    L, beta, err = arr.T
    if len(np.unique(L)) < 2:
        raise RankError("need at least two distinct system sizes")
    fit = fit_line(L, beta, err if np.all(err > 0) else None)
    return fit.slope, fit.intercept, fit.slope_stderr


def _positive_points(points, label: str):
    arr = np.asarray(list(points), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"points must be (W, {label}[, stderr]) rows")
    W, y = arr[:, 0], arr[:, 1]
    if np.any(W <= 0):
        raise ValueError("disorder strengths must be positive")
    keep = y > 0
    if not keep.all():
        warnings.warn(f"{(~keep).sum()} non-positive {label} values excluded", stacklevel=3)
    if keep.sum() < 3:
        raise InsufficientDataError(f"need at least three positive {label} values")
    return W[keep], y[keep]


def fit_decay_law(points: Iterable[Sequence[float]]) -> DecayLawFit:
    """Fit ``beta = C W^-gamma`` by OLS of ``ln beta`` on ``ln W``.

    The stored covariance is that of ``(ln C, gamma)``.
    """
    W, beta = _positive_points(points, "beta")
    fit = fit_line(np.log(W), np.log(beta))
    cov = fit.covariance.copy()
    cov[0, 1] = cov[1, 0] = -cov[0, 1]
    c = math.exp(fit.intercept)
    return DecayLawFit(c, -fit.slope, c * fit.intercept_stderr, fit.slope_stderr, cov,
                       fit.rss, len(W), inputs_digest(W, beta))


def fit_exponential_law(points: Iterable[Sequence[float]]) -> LineFit:
    """Competing model ``ln beta = a - b W``; compare ``rss`` with :func:`fit_decay_law`."""
    W, beta = _positive_points(points, "beta")
    return fit_line(W, np.log(beta))


def _factor(cov: np.ndarray) -> np.ndarray:
    """Lower factor ``L`` with ``L L^T = cov``: Cholesky, or eigen-square-root if singular."""
    cov = np.asarray(cov, dtype=np.float64)
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-14 * max(1.0, np.abs(cov).max())):
        raise FloatingPointError("covariance is not symmetric")
    lam, U = np.linalg.eigh(cov)
    if lam.min() < -1e-12 * max(1.0, abs(lam).max()):
        raise FloatingPointError(f"covariance is not positive semidefinite (eigenvalue {lam.min():.3g})")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return U * np.sqrt(np.clip(lam, 0.0, None))


def extract_w_star(fit: DecayLawFit, threshold: float = 1e-2, n_rep: int = 5000,
                   seed: int = 0) -> ThresholdCrossing:
    """Disorder at which ``C W^-gamma`` falls to ``threshold``, with resampled spread.

    ``ln W* = (ln C - ln threshold) / gamma``. The spread is the standard
    deviation of ``W*`` over ``n_rep`` draws of ``(ln C, gamma)`` from the
    fit's bivariate normal (Philox stream keyed by ``seed``, Cholesky
    factor); draws with ``gamma <= 0`` are rejected and replaced.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if n_rep < 1:
        raise ValueError("n_rep must be >= 1")
    if not fit.gamma > 0:
        raise NoCrossingError(f"gamma = {fit.gamma} <= 0: beta never falls to the threshold")
    ln_thr = math.log(threshold)
    mean = np.array([math.log(fit.c), fit.gamma])
    w_star = math.exp((mean[0] - ln_thr) / mean[1])
    Lf = _factor(fit.covariance)
    rng = make_rng(seed)
    accepted = []
    n_acc = n_drawn = 0
    while n_acc < n_rep:
        batch = max(n_rep - n_acc, 16)
        z = rng.standard_normal((batch, 2))
        draws = mean + z @ Lf.T
        ok = draws[draws[:, 1] > 0]
        n_drawn += batch
        take = ok[: n_rep - n_acc]
        accepted.append(take)
        n_acc += len(take)
        if n_drawn > 1000 * n_rep:
            raise NoCrossingError("almost every resampled gamma is non-positive")
    draws = np.concatenate(accepted)
    with np.errstate(over="ignore", invalid="ignore"):
        samples = np.exp((draws[:, 0] - ln_thr) / draws[:, 1])
        # gamma draws near zero send W* to overflow: the spread is then unbounded
        std = float(samples.std(ddof=1)) if n_rep > 1 else 0.0
    if not np.all(np.isfinite(samples)):
        std = math.inf
    rejected = 1.0 - n_rep / n_drawn if n_drawn else 0.0
    return ThresholdCrossing(w_star, std, float(threshold), int(n_rep), rejected, int(seed))


def _sorted_curve(curve, name: str = "curve"):
    arr = np.asarray(list(curve), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 2:
        raise ValueError(f"{name} must hold at least two (W, value) points")
    if np.any(np.diff(arr[:, 0]) <= 0):
        raise ValueError(f"{name} must be sorted by strictly increasing W")
    return arr[:, 0], arr[:, 1]


def ergodic_boundary(curve, threshold_r: float = 0.525) -> BoundaryEstimate:
    """Largest ``W`` with ``<r> >= threshold``, interpolated to the next point.

    Flags: ``interpolated``, ``above-range`` (whole curve at or above the
    threshold; returns max W) or ``below-range`` (whole curve below; returns
    min W).
    """
    W, r = _sorted_curve(curve)
    above = np.flatnonzero(r >= threshold_r)
    if above.size == 0:
        return BoundaryEstimate(float(W[0]), "below-range")
    i = int(above[-1])
    if i == len(W) - 1:
        return BoundaryEstimate(float(W[-1]), "above-range")
    w = W[i] + (r[i] - threshold_r) * (W[i + 1] - W[i]) / (r[i] - r[i + 1])
    return BoundaryEstimate(float(w), "interpolated")


def curve_crossing(curve_a, curve_b) -> float | None:
    """Smallest ``W`` where two piecewise-linear curves cross, or ``None``."""
    Wa, ra = _sorted_curve(curve_a, "curve_a")
    Wb, rb = _sorted_curve(curve_b, "curve_b")
    lo, hi = max(Wa[0], Wb[0]), min(Wa[-1], Wb[-1])
    if lo > hi:
        raise ValueError("curves have disjoint W ranges")
    grid = np.unique(np.concatenate([Wa, Wb]))
    grid = grid[(grid >= lo) & (grid <= hi)]
    d = np.interp(grid, Wa, ra) - np.interp(grid, Wb, rb)
    last = None  # index of the last non-zero difference
    for k in range(len(grid)):
        if d[k] == 0.0:
            continue
        if last is not None and np.sign(d[k]) != np.sign(d[last]):
            if last == k - 1:
                return float(grid[last] - d[last] * (grid[k] - grid[last]) / (d[k] - d[last]))
            return float(grid[last + 1])
        last = k
    return None


def ensemble_average(traces: Sequence[ImbalanceTrace]) -> tuple[ImbalanceTrace, ImbalanceTrace]:
    """Pointwise mean and standard error (``ddof=1``; zero for one trace)."""
    if not traces:
        raise ValueError("no traces to average")
    t0 = traces[0].times
    for k, tr in enumerate(traces[1:], start=1):
        if not np.array_equal(tr.times, t0):
            raise ValueError(f"trace {k} has a different time grid")
    Y = np.vstack([tr.imbalance for tr in traces])
    mean = Y.mean(axis=0)
    if len(traces) > 1:
        se = Y.std(axis=0, ddof=1) / math.sqrt(len(traces))
    else:
        se = np.zeros_like(mean)
    return ImbalanceTrace(t0.copy(), mean), ImbalanceTrace(t0.copy(), se)


def beta_per_realization(traces: Sequence[ImbalanceTrace], t_lo: float = DEFAULT_WINDOW[0],
                         t_hi: float = DEFAULT_WINDOW[1]) -> tuple[float, float, np.ndarray]:
    """Fit each trace separately; returns ``(mean beta, stderr across realizations, betas)``."""
    betas = np.array([fit_power_law(tr, t_lo, t_hi).beta for tr in traces])
    se = betas.std(ddof=1) / math.sqrt(len(betas)) if len(betas) > 1 else 0.0
    return float(betas.mean()), float(se), betas
