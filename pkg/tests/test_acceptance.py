"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints ``criterion N: PASS|FAIL ...`` and the lines are repeated
in the pytest terminal summary. Criterion 6 keeps its quench ensembles in a
resumable cache (``$XYMBL_ACCEPT_CACHE``, default ``.acceptance_cache`` in the
repository root) because the 3x6 and 3x8 legs take far longer than the rest.
The 3x8 leg is only computed when ``XYMBL_ACCEPT_FULL=1``.
"""

import math
import os
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg as sla

from xymbl.analysis import extract_w_star, fit_decay_law
from xymbl.dynamics import PHASE_PER_MHZ_NS, ImbalanceTrace, KrylovPropagator, checkerboard, initial_state, run_quench
from xymbl.experiment import ExperimentSpec, RunManifest, default_workers, run_experiment
from xymbl.hamiltonian import build_hamiltonian, enumerate_sector, mix_seed, sample_disorder
from xymbl.lattice import build_rectangle
from xymbl.spectral import dense_window, polfed

ROOT = Path(__file__).resolve().parent.parent
CACHE = Path(os.environ.get("XYMBL_ACCEPT_CACHE", ROOT / ".acceptance_cache"))
FULL = os.environ.get("XYMBL_ACCEPT_FULL") == "1"


def read_csv(path: Path) -> dict[str, np.ndarray]:
    lines = path.read_text().splitlines()
    head = lines[0].split(",")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]], ndmin=2)
    return {h: data[:, i] for i, h in enumerate(head)}


# ---------------------------------------------------------------- 1

def test_c1_sector_dimension(verdict):
    dim = enumerate_sector(21, 10).dim
    ok = verdict(1, dim == 352716, f"enumerate_sector(21, 10).dim = {dim} (want 352716)")
    assert ok


# ---------------------------------------------------------------- 2

def _random_instances(count_per_w: int, seed: int):
    rng = np.random.default_rng(seed)
    shapes = [(1, 6), (1, 8), (1, 10), (1, 12), (2, 3), (2, 4), (3, 3), (2, 5), (2, 6), (3, 4)]
    for w in (0.0, 50.0, 100.0):
        for k in range(count_per_w):
            rows, cols = shapes[rng.integers(len(shapes))]
            spread = float(rng.choice([0.0, 0.2]))
            g = build_rectangle(rows, cols, 2.9, 1.1 if rows > 1 else 0.0, spread=spread,
                                seed=int(rng.integers(2**31)))
            pat = checkerboard(g, "even")
            H = build_hamiltonian(g, sample_disorder(rows * cols, w, mix_seed(2, int(w), k)), pat.n)
            if k % 2 == 0:
                v = initial_state(H, pat).astype(complex)
            else:
                v = rng.standard_normal(H.dim) + 1j * rng.standard_normal(H.dim)
                v /= np.linalg.norm(v)
            yield f"{rows}x{cols} W={w:g}", H, v


def test_c2_krylov_matches_dense_expm(verdict):
    times = (10.0, 100.0, 1000.0)
    worst, n = 0.0, 0
    for _, H, v in _random_instances(8, seed=20):
        Hd = H.toarray()
        prop = KrylovPropagator(H)
        psi, t_prev = v, 0.0
        for t in times:
            psi = prop.propagate(psi, t - t_prev)
            t_prev = t
            exact = sla.expm(-1j * PHASE_PER_MHZ_NS * t * Hd) @ v
            worst = max(worst, float(np.linalg.norm(psi - exact)))
        n += 1
    ok = n >= 20 and worst <= 1e-10
    verdict(2, ok, f"{n} instances, max ||psi_krylov - psi_expm|| = {worst:.2e} (tol 1e-10)")
    assert ok


# ---------------------------------------------------------------- 3

@pytest.mark.slow
def test_c3_polfed_matches_dense(verdict):
    g = build_rectangle(2, 7, 2.9, 1.1)
    worst, counts = 0.0, []
    for k in range(10):
        H = build_hamiltonian(g, sample_disorder(14, 50.0, mix_seed(3, k)), 7)
        res = polfed(H, 200, 0.0, seed=k)
        e0, e1 = res.extremal
        want = (2.0 * dense_window(H, 200, 0.0, res.extremal) - e0 - e1) / (e1 - e0)
        counts.append(len(res.rescaled))
        worst = max(worst, float(np.max(np.abs(np.sort(res.rescaled) - want))))
    ok = all(c == 200 for c in counts) and worst <= 1e-8
    verdict(3, ok, f"10 ladder realizations, n_ev=200, "
                   f"max |eps_polfed - eps_dense| = {worst:.2e} rescaled (tol 1e-8)")
    assert ok


# ---------------------------------------------------------------- 4

@pytest.mark.slow
def test_c4_level_statistics_limits(verdict, tmp_path):
    spec = ExperimentSpec(mode="GapRatio", geometry={"rows": 2, "cols": 7}, w_list=(10.0, 100.0),
                          realizations=100, n_ev=200, seed_base=4)
    run_experiment(spec, tmp_path / "c4", workers=default_workers())
    c = read_csv(tmp_path / "c4" / "gapratio.csv")
    r_lo, r_hi = c["mean_r"]
    n = c["n_realizations"]
    ok = 0.515 <= r_lo <= 0.545 and 0.375 <= r_hi <= 0.405 and np.all(n == 100)
    verdict(4, ok, f"<r>(W=10) = {r_lo:.4f} in [0.515, 0.545], <r>(W=100) = {r_hi:.4f} in [0.375, 0.405], "
                   f"{int(n.min())} realizations")
    assert ok


# ---------------------------------------------------------------- 5

@pytest.fixture(scope="module")
def chain_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("c5")
    spec = ExperimentSpec(mode="Quench", geometry={"chain": 12}, w_list=(50.0,), realizations=50,
                          j_nnn=0.0, seed_base=5)
    run_experiment(spec, out, workers=default_workers())
    return out


def test_c5_anderson_chain_flat(verdict, chain_run):
    b = read_csv(chain_run / "beta.csv")
    beta, se = float(b["beta"][0]), float(b["beta_stderr"][0])
    n = int(b["n_realizations"][0])
    ok = n >= 50 and abs(beta) <= 0.03
    verdict(5, ok, f"12-site chain W=50, {n} realizations: beta = {beta:+.4f} +- {se:.4f}, "
                   f"|beta| <= 0.03 (per-realization mean {float(b['beta_realization_mean'][0]):+.4f})")
    assert ok


# ---------------------------------------------------------------- 6

def _c6_spec(cols: int) -> ExperimentSpec:
    return ExperimentSpec(mode="Quench", geometry={"rows": 3, "cols": cols}, w_list=(50.0,), realizations=30,
                          pattern="even", seed_base=6)


def _c6_ensemble(cols: int, compute: bool):
    """(beta, stderr, n_done) for the 3 x cols ensemble; computes or resumes when ``compute``."""
    out = CACHE / f"c6_3x{cols}"
    spec = _c6_spec(cols)
    if compute:
        resume = (out / "manifest.json").exists()
        run_experiment(spec, out, workers=default_workers(), resume=resume)
    if not (out / "manifest.json").exists():
        return None, None, 0
    manifest = RunManifest.load(out / "manifest.json")
    if manifest.compute_digest != spec.compute_digest():
        return None, None, 0
    done = sum(1 for t in manifest.tasks.values() if t["status"] == "done")
    if done < spec.realizations or not (out / "beta.csv").exists():
        return None, None, done
    b = read_csv(out / "beta.csv")
    # conservative: the larger of the time-fit and the disorder-sampling error
    se = max(float(b["beta_stderr"][0]), float(b["beta_realization_stderr"][0]))
    return float(b["beta"][0]), se, done


@pytest.mark.slow
def test_c6_size_trend(verdict):
    sizes = {4: _c6_ensemble(4, True), 6: _c6_ensemble(6, True), 8: _c6_ensemble(8, FULL)}
    parts, ok = [], True
    for cols, (beta, se, done) in sizes.items():
        if beta is None:
            parts.append(f"3x{cols}: {done}/30 realizations")
            ok = False
        else:
            parts.append(f"3x{cols}: beta = {beta:+.4f} +- {se:.4f}")
    for a, b in ((4, 6), (6, 8)):
        ba, sa, _ = sizes[a]
        bb, sb, _ = sizes[b]
        if ba is None or bb is None:
            continue
        diff, comb = bb - ba, math.hypot(sa, sb)
        parts.append(f"beta(3x{b}) - beta(3x{a}) = {diff:+.4f} vs combined stderr {comb:.4f}")
        ok = ok and diff > comb
    verdict(6, ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- 7

def _oracle_w_star_std(W, beta, threshold, n_draw, seed):
    # independent OLS covariance and a plain numpy Monte Carlo
    X = np.column_stack([np.ones_like(W), np.log(W)])
    y = np.log(beta)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    s2 = resid @ resid / (len(W) - 2)
    cov = s2 * np.linalg.inv(X.T @ X)
    J = np.diag([1.0, -1.0])  # (a, b) -> (ln C, gamma)
    mean, cov = J @ coef, J @ cov @ J.T
    rng = np.random.default_rng(seed)
    d = rng.multivariate_normal(mean, cov, size=n_draw)
    d = d[d[:, 1] > 0]
    return float(np.std(np.exp((d[:, 0] - math.log(threshold)) / d[:, 1]), ddof=1))


def test_c7_fit_chain_exactness(verdict):
    C, gamma, thr = 3.7, 1.8, 1e-2
    W = np.array([20.0, 30.0, 45.0, 70.0, 100.0, 150.0])
    fit = fit_decay_law(np.column_stack([W, C * W**-gamma]))
    ws = extract_w_star(fit, thr)
    closed = (C / thr) ** (1.0 / gamma)
    err_c, err_g = abs(fit.c - C) / C, abs(fit.gamma - gamma)
    err_w = abs(ws.w_star - closed) / closed

    noisy = C * W**-gamma * np.exp(np.random.default_rng(77).normal(0.0, 0.05, W.size))
    spread = extract_w_star(fit_decay_law(np.column_stack([W, noisy])), thr, n_rep=5000, seed=1)
    oracle = _oracle_w_star_std(W, noisy, thr, 10**6, seed=2)
    rel = abs(spread.w_star_std / oracle - 1.0)

    ok = max(err_c, err_g, err_w) <= 1e-10 and rel <= 0.05
    verdict(7, ok, f"rel err C {err_c:.1e}, abs err gamma {err_g:.1e}, rel err W* {err_w:.1e} (tol 1e-10); "
                   f"W* std {spread.w_star_std:.4g} vs 1e6-draw oracle {oracle:.4g} ({100 * rel:.2f}% <= 5%)")
    assert ok


# ---------------------------------------------------------------- 8

def _check_task_csvs(root: Path, n_exc: int):
    """(files, worst norm-like error, every I(0) == 1) over stored quench traces."""
    files, worst, first_ok = 0, 0.0, True
    for p in sorted(root.glob("tasks/*.csv")):
        tr = ImbalanceTrace.from_csv(p.read_text(), str(p))
        files += 1
        first_ok &= tr.imbalance[0] == 1.0
        worst = max(worst, float(np.max(np.abs(tr.per_site_occupations.sum(axis=1) - n_exc))))
    return files, worst, first_ok


def test_c8_conservation(verdict, chain_run):
    norm = number = 0.0
    first_ok, runs = True, 0
    for rows, cols in ((2, 6), (3, 4), (1, 12)):
        g = build_rectangle(rows, cols, 2.9, 1.1 if rows > 1 else 0.0)
        for w in (0.0, 50.0, 100.0):
            for parity in ("even", "odd"):
                pat = checkerboard(g, parity)
                H = build_hamiltonian(g, sample_disorder(rows * cols, w, mix_seed(8, runs)), pat.n)
                tr = run_quench(H, pat, 1000.0)
                norm, number = max(norm, tr.norm_error), max(number, tr.number_error)
                first_ok &= tr.imbalance[0] == 1.0
                runs += 1
    files, stored, stored_first = _check_task_csvs(chain_run, 6)
    for cols in (4, 6, 8):
        if (CACHE / f"c6_3x{cols}" / "tasks").exists():
            f, s, sf = _check_task_csvs(CACHE / f"c6_3x{cols}", 3 * cols // 2)
            files, stored, stored_first = files + f, max(stored, s), stored_first and sf
    ok = max(norm, number, stored) <= 1e-9 and first_ok and stored_first
    verdict(8, ok, f"{runs} direct runs: max norm err {norm:.1e}, max number err {number:.1e}; "
                   f"{files} stored traces: max number err {stored:.1e}; I(0) == 1 everywhere: "
                   f"{first_ok and stored_first}")
    assert ok


# ---------------------------------------------------------------- 9

def _all_csv(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_c9_determinism(verdict, tmp_path):
    specs = [ExperimentSpec(mode="Quench", geometry={"rows": 3, "cols": 4}, w_list=(20.0, 60.0), realizations=3,
                            pattern="both", seed_base=9),
             ExperimentSpec(mode="Spectrum", geometry={"rows": 2, "cols": 5}, w_list=(10.0, 80.0), realizations=3,
                            n_ev=100, seed_base=9)]
    same, n_files = True, 0
    for i, spec in enumerate(specs):
        runs = []
        for tag, workers in (("a", 1), ("b", 1), ("p", 3)):
            out = tmp_path / f"{i}{tag}"
            run_experiment(spec, out, workers=workers)
            runs.append(_all_csv(out))
        same &= runs[0] == runs[1] == runs[2]
        n_files += len(runs[0])
    ok = same and n_files > 0
    verdict(9, ok, f"{n_files} CSV files byte-identical across two serial runs and a 3-worker run: {same}")
    assert ok
