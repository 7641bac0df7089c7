"""Configuration-driven ensemble runs with a resumable manifest.

An experiment is a JSON document (see :class:`ExperimentSpec`). Running it
expands into independent realization tasks, one per
``(W index, realization index, parity)``. Each task writes one output file;
the manifest records seeds and per-task status so an interrupted run can be
resumed. Aggregation reads the task files back in a fixed order, so serial
and parallel runs produce the same bytes.

Seeds: task ``(w_idx, r_idx)`` uses ``mix_seed(seed_base, w_idx, r_idx)``;
with the ``both`` parity policy the parity index is appended as a third
component so the two patterns see independent disorder.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .analysis import (BoundaryEstimate, InsufficientDataError, NoCrossingError, beta_per_realization,
                       ensemble_average, ergodic_boundary, extract_w_star, fit_decay_law, fit_power_law)
from .dynamics import ImbalanceTrace, checkerboard, geometric_time_grid, linear_time_grid, run_quench
from .hamiltonian import build_hamiltonian, enumerate_sector, mix_seed, sample_disorder
from .lattice import CouplingGraph, build_chain, build_rectangle
from .spectral import DENSE_LIMIT, gap_ratios, polfed

log = logging.getLogger(__name__)

__all__ = ["SpecError", "ExperimentSpec", "RunManifest", "TaskFailure", "run_experiment", "load_spec"]

MODES = ("Quench", "Spectrum", "GapRatio", "FitOnly")
PARITY_POLICIES = {"even": ("even",), "odd": ("odd",), "both": ("even", "odd")}
_FIT_STREAM = 7919  # extra mix_seed component for the W* resampling stream


class SpecError(ValueError):
    """Invalid experiment configuration (raised before any compute)."""


class TaskFailure(RuntimeError):
    def __init__(self, failed: dict[str, str]):
        super().__init__(f"{len(failed)} task(s) failed: " + "; ".join(f"{k}: {v}" for k, v in failed.items()))
        self.failed = failed


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment. Frequencies in MHz, times in ns.

    ``geometry`` is ``{"rows": R, "cols": C}`` or ``{"chain": N}``. ``times``
    is ``{"kind": "geometric", "t_min", "t_max", "n"}``,
    ``{"kind": "linear", "t_max", "n"}`` or ``{"kind": "explicit", "values": [...]}``.
    ``fit_source`` names the mode whose stored outputs a ``FitOnly`` run re-fits.
    """

    mode: str
    geometry: dict
    w_list: tuple[float, ...]
    realizations: int
    j_nn: float = 2.9
    j_nnn: float = 1.1
    pattern: str = "even"
    times: dict = field(default_factory=lambda: {"kind": "geometric", "t_min": 10.0, "t_max": 1000.0, "n": 40})
    fit_window: tuple[float, float] = (250.0, 1000.0)
    seed_base: int = 0
    n_ev: int = 200
    sigma: float = 0.0
    output: str = "results"
    beta_threshold: float = 1e-2
    n_rep: int = 5000
    r_threshold: float = 0.525
    fit_source: str = "Quench"

    def __post_init__(self):
        object.__setattr__(self, "w_list", tuple(float(w) for w in self.w_list))
        object.__setattr__(self, "fit_window", tuple(float(t) for t in self.fit_window))
        self.validate()

    # ------------------------------------------------------------ validation
    def validate(self) -> None:
        if self.mode not in MODES:
            raise SpecError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fit_source not in MODES[:3]:
            raise SpecError(f"fit_source must be one of {MODES[:3]}, got {self.fit_source!r}")
        if int(self.realizations) != self.realizations or self.realizations < 1:
            raise SpecError(f"realizations must be an integer >= 1, got {self.realizations!r}")
        if not self.w_list:
            raise SpecError("w_list must not be empty")
        if any(not (math.isfinite(w) and w >= 0) for w in self.w_list):
            raise SpecError("disorder strengths must be finite and non-negative")
        if len(set(self.w_list)) != len(self.w_list):
            raise SpecError("w_list contains duplicates")
        if self.pattern not in PARITY_POLICIES:
            raise SpecError(f"pattern must be one of {sorted(PARITY_POLICIES)}, got {self.pattern!r}")
        if not (0 <= int(self.seed_base) < 2**64):
            raise SpecError("seed_base must fit in an unsigned 64-bit integer")
        try:
            graph = self.graph()
        except (ValueError, KeyError, TypeError) as exc:
            raise SpecError(f"invalid geometry {self.geometry!r}: {exc}") from None
        grid = self.time_grid()
        lo, hi = self.fit_window
        if not lo < hi:
            raise SpecError(f"fit window {self.fit_window} is empty")
        if self.effective_mode == "Quench" and not (grid[0] <= lo and hi <= grid[-1]):
            raise SpecError(f"fit window {self.fit_window} outside the time grid [{grid[0]}, {grid[-1]}]")
        if self.effective_mode in ("Spectrum", "GapRatio"):
            dims = {p: enumerate_sector(graph.n_sites, checkerboard(graph, p).n).dim for p in self.parities}
            for p, dim in dims.items():
                if not 3 <= self.n_ev <= dim:
                    raise SpecError(f"n_ev={self.n_ev} must lie in [3, {dim}] (sector dimension, {p} pattern)")
            if not -1.0 < self.sigma < 1.0:
                raise SpecError("sigma is a rescaled energy and must lie in (-1, 1)")
        if not self.beta_threshold > 0 or self.n_rep < 1:
            raise SpecError("beta_threshold must be positive and n_rep >= 1")

    @property
    def effective_mode(self) -> str:
        return self.fit_source if self.mode == "FitOnly" else self.mode

    @property
    def parities(self) -> tuple[str, ...]:
        return PARITY_POLICIES[self.pattern]

    def graph(self) -> CouplingGraph:
        g = dict(self.geometry)
        if "chain" in g:
            if set(g) != {"chain"}:
                raise ValueError("chain geometry takes only the 'chain' key")
            return build_chain(int(g["chain"]), self.j_nn)
        if set(g) != {"rows", "cols"}:
            raise ValueError("expected keys rows and cols, or chain")
        return build_rectangle(int(g["rows"]), int(g["cols"]), self.j_nn, self.j_nnn)

    def time_grid(self) -> np.ndarray:
        t = dict(self.times)
        kind = t.pop("kind", "geometric")
        try:
            if kind == "geometric":
                grid = geometric_time_grid(float(t.get("t_min", 10.0)), float(t.get("t_max", 1000.0)),
                                           int(t.get("n", 40)))
            elif kind == "linear":
                grid = linear_time_grid(float(t.get("t_max", 1000.0)), int(t.get("n", 41)))
            elif kind == "explicit":
                grid = np.asarray(t["values"], dtype=np.float64)
            else:
                raise SpecError(f"unknown time grid kind {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"invalid time grid {self.times!r}: {exc}") from None
        if len(grid) < 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
            raise SpecError("time grid must start at 0 and increase strictly")
        return grid

    # ---------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["w_list"] = list(self.w_list)
        d["fit_window"] = list(self.fit_window)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown configuration keys: {sorted(unknown)}")
        missing = {"mode", "geometry", "w_list", "realizations"} - set(data)
        if missing:
            raise SpecError(f"missing configuration keys: {sorted(missing)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise SpecError(str(exc)) from None

    def replace(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, **changes)

    def compute_digest(self) -> str:
        """Hash of every field that affects task outputs."""
        d = self.to_dict()
        keep = ["geometry", "j_nn", "j_nnn", "w_list", "realizations", "pattern", "seed_base"]
        keep += ["times"] if self.effective_mode == "Quench" else ["n_ev", "sigma"]
        payload = {k: d[k] for k in keep}
        payload["mode"] = self.effective_mode
        return hashlib.sha256(_canonical(payload).encode()).hexdigest()[:16]

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(_canonical(d).encode()).hexdigest()[:16]


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(f"{path}: cannot read configuration: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise SpecError(f"{path}:1: configuration must be a JSON object")
    return ExperimentSpec.from_dict(data)


# ------------------------------------------------------------------ tasks

def _task_list(spec: ExperimentSpec) -> list[dict]:
    tasks = []
    both = len(spec.parities) > 1
    ext = "csv" if spec.effective_mode in ("Quench", "Spectrum") else "json"
    for wi, w in enumerate(spec.w_list):
        for pi, parity in enumerate(spec.parities):
            for ri in range(spec.realizations):
                idx = (wi, ri, pi) if both else (wi, ri)
                tid = f"w{wi:02d}_{parity}_r{ri:04d}"
                tasks.append({"id": tid, "w_idx": wi, "w": w, "r_idx": ri, "parity": parity,
                              "seed": mix_seed(spec.seed_base, *idx), "output": f"tasks/{tid}.{ext}"})
    return tasks


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dense_window_with_residuals(H, n_ev: int, sigma: float):
    evals, vecs = np.linalg.eigh(H.toarray())
    e0, e1 = evals[0], evals[-1]
    x = (2.0 * evals - e0 - e1) / (e1 - e0)
    idx = np.sort(np.argsort(np.abs(x - sigma), kind="stable")[:n_ev])
    V = vecs[:, idx]
    res = np.linalg.norm(H @ V - V * evals[idx], axis=0)
    return evals[idx], res


def _window(spec: ExperimentSpec, H, seed: int):
    if H.dim <= DENSE_LIMIT:
        return _dense_window_with_residuals(H, spec.n_ev, spec.sigma)
    res = polfed(H, spec.n_ev, spec.sigma, seed=seed)
    return res.eigenvalues, res.residuals


def _run_task(spec_dict: dict, task: dict, out_dir: str) -> tuple[str, str | None]:
    """Compute one realization and write its output file; returns (id, error or None)."""
    try:
        spec = ExperimentSpec.from_dict(spec_dict)
        graph = spec.graph()
        pattern = checkerboard(graph, task["parity"])
        real = sample_disorder(graph.n_sites, task["w"], task["seed"])
        H = build_hamiltonian(graph, real, pattern.n)
        mode = spec.effective_mode
        if mode == "Quench":
            trace = run_quench(H, pattern, sample_times=spec.time_grid())
            if trace.imbalance[0] != 1.0:
                raise ArithmeticError(f"imbalance at t=0 is {trace.imbalance[0]!r}, expected 1")
            text = trace.to_csv()
        else:
            evals, residuals = _window(spec, H, task["seed"])
            if mode == "Spectrum":
                buf = io.StringIO()
                wr = csv.writer(buf, lineterminator="\n")
                wr.writerow(["index", "energy_MHz", "residual"])
                for k, (e, r) in enumerate(zip(evals, residuals)):
                    wr.writerow([k, repr(float(e)), repr(float(r))])
                text = buf.getvalue()
            else:
                text = json.dumps({"mean_r": float(gap_ratios(evals).mean()), "n_levels": int(len(evals)),
                                   "max_residual": float(np.max(residuals))}, sort_keys=True) + "\n"
        _atomic_write(Path(out_dir) / task["output"], text)
        return task["id"], None
    except Exception as exc:  # recorded per task; the run continues
        return task["id"], f"{type(exc).__name__}: {exc}"


# --------------------------------------------------------------- manifest

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    spec_digest: str
    compute_digest: str
    seed_base: int
    software_version: str
    tasks: dict[str, dict]
    status: str = "running"
    created: str = ""
    updated: str = ""
    finished: str | None = None
    path: Path | None = None

    @classmethod
    def new(cls, spec: ExperimentSpec, path: Path) -> "RunManifest":
        tasks = {t["id"]: {**t, "status": "pending"} for t in _task_list(spec)}
        now = _now()
        return cls(spec.digest(), spec.compute_digest(), int(spec.seed_base), __version__, tasks,
                   "running", now, now, None, path)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        return cls(**data, path=Path(path))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("path")
        return d

    def save(self) -> None:
        self.updated = _now()
        _atomic_write(self.path, json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def pending(self) -> list[dict]:
        return [t for t in self.tasks.values() if t["status"] != "done"]

    def failed(self) -> dict[str, str]:
        return {k: t.get("error", "") for k, t in self.tasks.items() if t["status"] == "failed"}


# -------------------------------------------------------------- execution

def default_workers() -> int:
    env = os.environ.get("XYMBL_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise SpecError(f"XYMBL_WORKERS must be an integer, got {env!r}") from None
        if n < 1:
            raise SpecError("XYMBL_WORKERS must be >= 1")
        return n
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def run_experiment(spec: ExperimentSpec, out_dir=None, *, workers: int | None = None,
                   resume: bool = False) -> RunManifest:
    """Run (or resume) every task, then aggregate and fit.

    Raises :class:`TaskFailure` after aggregation if any task failed; the
    manifest marks those tasks so ``resume=True`` retries only them.
    """
    out = Path(out_dir if out_dir is not None else spec.output)
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise SpecError("workers must be >= 1")
    (out / "tasks").mkdir(parents=True, exist_ok=True)
    mpath = out / "manifest.json"

    if spec.mode == "FitOnly" or resume:
        if not mpath.exists():
            raise SpecError(f"{mpath}: no manifest to {'re-fit' if spec.mode == 'FitOnly' else 'resume'}")
        manifest = RunManifest.load(mpath)
        if manifest.compute_digest != spec.compute_digest():
            raise SpecError(f"{mpath}: stored run was produced by a different configuration")
        for t in manifest.tasks.values():
            if t["status"] == "done" and not (out / t["output"]).exists():
                t["status"] = "pending"
        manifest.spec_digest = spec.digest()
        manifest.status = "running"
        manifest.finished = None
    else:
        manifest = RunManifest.new(spec, mpath)
    stored = spec.to_dict()
    stored.pop("output")
    _atomic_write(out / "spec.json", json.dumps(stored, indent=1, sort_keys=True) + "\n")
    manifest.save()

    todo = manifest.pending()
    if spec.mode == "FitOnly" and todo:
        raise SpecError(f"{len(todo)} task outputs missing; run the {spec.fit_source} stage first")

    spec_dict = spec.to_dict()

    def record(tid: str, err: str | None) -> None:
        t = manifest.tasks[tid]
        t["status"] = "failed" if err else "done"
        if err:
            t["error"] = err
            log.warning("task %s failed: %s", tid, err)
        else:
            t.pop("error", None)
        manifest.save()

    if todo:
        log.info("%d task(s) to run on %d worker(s)", len(todo), workers)
        if workers == 1 or len(todo) == 1:
            for t in todo:
                record(*_run_task(spec_dict, t, str(out)))
        else:
            with cf.ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_task, spec_dict, t, str(out)) for t in todo]
                for fut in cf.as_completed(futures):
                    record(*fut.result())

    aggregate(spec, out, manifest)
    failed = manifest.failed()
    manifest.status = "failed" if failed else "complete"
    manifest.finished = _now()
    manifest.save()
    if failed:
        raise TaskFailure(failed)
    return manifest


# ------------------------------------------------------------- aggregation

def _w_tag(wi: int, w: float) -> str:
    return f"W{wi:02d}_{w:g}MHz"


def _done_tasks(manifest: RunManifest, wi: int) -> list[dict]:
    ts = [t for t in manifest.tasks.values() if t["w_idx"] == wi and t["status"] == "done"]
    return sorted(ts, key=lambda t: t["id"])


def _write_csv(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    _atomic_write(path, buf.getvalue())


def _finite_or_none(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    return obj


def _summary_write(out: Path, summary: dict) -> None:
    # strict JSON: NaN/inf (undefined fits, divergent spreads) become null
    summary["warnings"] = list(dict.fromkeys(summary["warnings"]))
    text = json.dumps(_finite_or_none(summary), indent=1, sort_keys=True, allow_nan=False)
    _atomic_write(out / "summary.json", text + "\n")


def aggregate(spec: ExperimentSpec, out: Path, manifest: RunManifest) -> dict:
    """Single-threaded reduction over finished task files in task-id order."""
    mode = spec.effective_mode
    summary: dict[str, Any] = {"spec_digest": spec.digest(), "mode": mode, "software_version": __version__,
                               "warnings": []}
    if mode == "Quench":
        _aggregate_quench(spec, out, manifest, summary)
    else:
        _aggregate_spectral(spec, out, manifest, summary)
    _summary_write(out, summary)
    return summary


def _aggregate_quench(spec, out, manifest, summary) -> None:
    t_lo, t_hi = spec.fit_window
    rows, per_w, points = [], [], []
    for wi, w in enumerate(spec.w_list):
        tasks = _done_tasks(manifest, wi)
        entry: dict[str, Any] = {"W_MHz": w, "n_realizations": len(tasks),
                                 "n_failed": sum(1 for t in manifest.tasks.values()
                                                 if t["w_idx"] == wi and t["status"] == "failed")}
        per_w.append(entry)
        if not tasks:
            summary["warnings"].append(f"W={w:g}: no finished realizations")
            continue
        traces = []
        for t in tasks:
            p = out / t["output"]
            traces.append(ImbalanceTrace.from_csv(p.read_text(), str(p)))
        mean, se = ensemble_average(traces)
        tag = _w_tag(wi, w)
        _atomic_write(out / f"ensemble_{tag}.csv", mean.to_csv())
        _atomic_write(out / f"ensemble_{tag}_stderr.csv", se.to_csv())
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                fit = fit_power_law(mean, t_lo, t_hi)
            except InsufficientDataError as exc:
                summary["warnings"].append(f"W={w:g}: {exc}")
                fit = None
            try:
                b_mean, b_se, _ = beta_per_realization(traces, t_lo, t_hi)
            except InsufficientDataError as exc:
                summary["warnings"].append(f"W={w:g} per-realization fits: {exc}")
                b_mean = b_se = float("nan")
        summary["warnings"].extend(f"W={w:g}: {c.message}" for c in caught)
        entry["fit"] = fit.to_dict() if fit is not None else None
        entry["beta_realization_mean"] = b_mean
        entry["beta_realization_stderr"] = b_se
        if fit is not None:
            rows.append([w, fit.beta, fit.beta_stderr, b_mean, b_se, len(tasks)])
            points.append((w, fit.beta, fit.beta_stderr))
    _write_csv(out / "beta.csv", ["W_MHz", "beta", "beta_stderr", "beta_realization_mean",
                                  "beta_realization_stderr", "n_realizations"], rows)
    summary["per_w"] = per_w

    betas = [p[1] for p in points]
    if any(b2 > b1 for b1, b2 in zip(betas, betas[1:])) and list(spec.w_list) == sorted(spec.w_list):
        msg = "beta is not monotonically non-increasing in W: " + ", ".join(f"{b:.4g}" for b in betas)
        summary["warnings"].append(msg)
        log.warning(msg)

    summary["decay_fit"] = summary["w_star"] = None
    if sum(1 for p in points if p[1] > 0 and p[0] > 0) >= 3:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            decay = fit_decay_law([p for p in points if p[0] > 0])
        summary["warnings"].extend(str(c.message) for c in caught)
        summary["decay_fit"] = decay.to_dict()
        try:
            ws = extract_w_star(decay, spec.beta_threshold, spec.n_rep, mix_seed(spec.seed_base, _FIT_STREAM))
            summary["w_star"] = ws.to_dict()
        except NoCrossingError as exc:
            summary["warnings"].append(str(exc))


def _aggregate_spectral(spec, out, manifest, summary) -> None:
    rows, curve = [], []
    for wi, w in enumerate(spec.w_list):
        tasks = _done_tasks(manifest, wi)
        values = []
        for t in tasks:
            p = out / t["output"]
            if spec.effective_mode == "GapRatio":
                values.append(json.loads(p.read_text())["mean_r"])
            else:
                energies = []
                with open(p, newline="") as fh:
                    for k, row in enumerate(csv.DictReader(fh), start=2):
                        try:
                            energies.append(float(row["energy_MHz"]))
                        except (KeyError, TypeError, ValueError) as exc:
                            raise ValueError(f"{p}:{k}: {exc}") from None
                values.append(float(gap_ratios(energies).mean()))
        if not values:
            summary["warnings"].append(f"W={w:g}: no finished realizations")
            continue
        v = np.array(values)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        rows.append([w, float(v.mean()), se, len(v), [t["seed"] for t in tasks]])
        curve.append((w, float(v.mean())))
    _write_csv(out / "gapratio.csv", ["W_MHz", "mean_r", "stderr", "n_realizations"], [r[:4] for r in rows])
    n_sites = spec.graph().n_sites
    summary["gap_ratio"] = [{"W_MHz": r[0], "L": n_sites, "n_ev": spec.n_ev, "mean_r": r[1], "stderr": r[2],
                             "n_realizations": r[3], "seeds": r[4]} for r in rows]
    boundary: BoundaryEstimate | None = None
    if len(curve) >= 2 and [c[0] for c in curve] == sorted(c[0] for c in curve):
        boundary = ergodic_boundary(curve, spec.r_threshold)
    summary["ergodic_boundary"] = boundary.to_dict() if boundary is not None else None
