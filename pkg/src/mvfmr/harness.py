"""Monte Carlo runs: replicate execution, caching, aggregation and output files.

A run fits MV-FMR and U-FMR to every replicate of a scenario and writes

* ``replicates.csv``: one row per replicate, method and exposure
* ``summary.csv``: mean and SD of the ISE per method and exposure
* ``curves.csv``: truth, mean estimate, estimate quantiles and coverage per grid point
* ``manifest.json``: configuration snapshot, seed, version, counts and failures

Column orders are fixed by the ``*_COLUMNS`` constants below. Numbers are
written with 17 significant digits, and rows are written in replicate order
after all workers finish, so reruns give byte-identical files regardless of
``threads``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import inspect
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .exceptions import ConfigError, MvfmrError
from .io import fmt, write_csv
from .metrics import CurveComparison, ise
from .model import ModelConfig, fit_with_univariable
from .simulate import ScenarioConfig, simulate_replicate

__all__ = [
    "RunOptions",
    "RunManifest",
    "REPLICATE_COLUMNS",
    "SUMMARY_COLUMNS",
    "CURVE_COLUMNS",
    "SWEEP_PARAMETERS",
    "run_replicate",
    "run_scenario",
    "run_sweep",
    "summarize",
    "curve_rows",
    "read_replicates",
]

log = logging.getLogger(__name__)

METHODS = ("mvfmr", "ufmr")
REPLICATE_COLUMNS = (
    "scenario", "replicate", "method", "exposure", "status", "converged",
    "k", "components", "ise", "ise_raw", "conditional_f", "error",
)
SUMMARY_COLUMNS = (
    "scenario", "method", "exposure", "n_ok", "n_failed", "mean_ise", "sd_ise",
    "mean_ise_raw", "sd_ise_raw", "convergence_rate", "formatted",
)
CURVE_COLUMNS = (
    "method", "exposure", "time", "truth", "mean_estimate", "sd_estimate",
    "q_lower", "q_upper", "mean_lower", "mean_upper", "coverage",
)
# sweepable parameter name -> ScenarioConfig field
SWEEP_PARAMETERS = {"p12": "p12_fraction", "gamma": "gamma", "n_sparse": "n_sparse"}
# modules whose code determines replicate results; part of the cache key
_RESULT_MODULES = ("estimators", "fpca", "metrics", "model", "simulate", "smoothing",
                   "validation")


@dataclass(frozen=True)
class RunOptions:
    threads: Optional[int] = None
    convergence_threshold: float = 0.95
    cache_dir: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.convergence_threshold <= 1.0:
            raise ConfigError("field 'convergence_threshold': must lie in [0, 1]")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("field 'threads': must be a positive integer")


@dataclass
class RunManifest:
    """What a run did: configuration, outcome counts and aggregate rows."""

    scenario: dict
    model: dict
    seed: int
    version: str
    replicates: int
    n_ok: int
    n_failed: int
    n_converged: int
    convergence_threshold: float
    failures: list
    summary: list
    out_dir: Optional[str] = None
    files: dict = field(default_factory=dict)
    elapsed_seconds: float = 0.0
    rows: list = field(default_factory=list, repr=False)
    results: list = field(default_factory=list, repr=False)

    @property
    def convergence_rate(self) -> float:
        return self.n_converged / self.replicates if self.replicates else 0.0

    @property
    def passed(self) -> bool:
        return self.n_ok + self.n_failed == self.replicates and \
            self.convergence_rate >= self.convergence_threshold

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("rows")
        out.pop("results")
        out["convergence_rate"] = self.convergence_rate
        out["passed"] = self.passed
        return out


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if dataclasses.is_dataclass(value):
        return _jsonable(dataclasses.asdict(value))
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def _source_digest() -> str:
    h = hashlib.sha256(__version__.encode())
    here = Path(__file__).parent
    for name in _RESULT_MODULES:
        h.update((here / f"{name}.py").read_bytes())
    for fn in (run_replicate, _method_entries):
        h.update(inspect.getsource(fn).encode())
    return h.hexdigest()


def _cache_key(scenario: ScenarioConfig, model: ModelConfig, replicate: int, digest: str) -> str:
    snap = _jsonable(scenario.to_dict())
    snap.pop("replicates", None)
    payload = json.dumps({"scenario": snap, "model": _jsonable(model), "replicate": replicate,
                          "code": digest}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:32]


def _method_entries(method, fits, truth, grid):
    entries = []
    for fit in fits:
        bands_all = fit.pointwise_bands or [(None, None)] * len(fit.exposure_index)
        for j, k, beta, bands, f_values in zip(fit.exposure_index, fit.component_counts,
                                               fit.beta_functions, bands_all,
                                               fit.diagnostics["conditional_f"]):
            cmp = CurveComparison(grid, beta, truth[j - 1])
            entries.append({
                "method": method,
                "exposure": int(j),
                "converged": bool(fit.converged),
                "k": int(k),
                "components": [int(c) for c in fit.component_counts],
                "ise": ise(cmp),
                "ise_raw": ise(cmp, normalize=False),
                "conditional_f": [float(f) for f in f_values],
                "estimate": np.asarray(beta).tolist(),
                "lower": None if bands[0] is None else np.asarray(bands[0]).tolist(),
                "upper": None if bands[1] is None else np.asarray(bands[1]).tolist(),
            })
    return entries


def run_replicate(scenario: ScenarioConfig, model: ModelConfig, replicate: int) -> dict:
    """Simulate and fit one replicate; failures are caught and reported.

    ``model.domain_end`` should match the scenario (``run_scenario`` sets it).
    """
    start = time.perf_counter()
    result = {"replicate": int(replicate), "status": "ok", "error": "", "entries": []}
    try:
        data = simulate_replicate(scenario, replicate)
        mv, uv = fit_with_univariable(data.sparse_samples, data.outcome, data.genotypes, model)
        grid = mv.grid
        truth = scenario.true_effects(grid)
        result["grid"] = grid.tolist()
        result["truth"] = [t.tolist() for t in truth]
        result["entries"] = (_method_entries("mvfmr", [mv], truth, grid)
                             + _method_entries("ufmr", uv, truth, grid))
    except (MvfmrError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        result["status"] = "failed"
        result["error"] = f"{type(exc).__name__}: {exc}"
        result["entries"] = []
    # wall time; kept out of the CSV outputs so they stay byte-identical
    result["seconds"] = time.perf_counter() - start
    return result


def _run_cached(replicate: int, scenario: ScenarioConfig, model: ModelConfig,
                cache_dir: Optional[str], digest: str) -> dict:
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{_cache_key(scenario, model, replicate, digest)}.json"
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
    result = run_replicate(scenario, model, replicate)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(result, fh)
        os.replace(tmp, path)
    return result


def _execute(scenario, model, indices, options: RunOptions) -> List[dict]:
    digest = _source_digest()
    job = partial(_run_cached, scenario=scenario, model=model,
                  cache_dir=options.cache_dir, digest=digest)
    threads = options.threads or os.cpu_count() or 1
    if threads == 1 or len(indices) == 1:
        return [job(i) for i in indices]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        # map keeps replicate order whatever the completion order
        return list(pool.map(job, indices))


def _rows(scenario_name: str, results: Sequence[dict], n_exposures: int = 2) -> list:
    rows = []
    for res in results:
        if res["status"] != "ok":
            for method in METHODS:
                for j in range(1, n_exposures + 1):
                    rows.append([scenario_name, res["replicate"], method, j, "failed",
                                 False, None, None, None, None, None, res["error"]])
            continue
        for e in res["entries"]:
            rows.append([
                scenario_name, res["replicate"], e["method"], e["exposure"], "ok",
                e["converged"], e["k"], ";".join(str(c) for c in e["components"]),
                e["ise"], e["ise_raw"], ";".join(fmt(f) for f in e["conditional_f"]), "",
            ])
    return rows


def _sd(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else float("nan")


def summarize(rows: Sequence[Sequence]) -> list:
    """Summary rows (``SUMMARY_COLUMNS``) from replicate rows.

    Failed rows are counted but excluded from every mean and SD.
    """
    col = {c: i for i, c in enumerate(REPLICATE_COLUMNS)}
    groups = {}
    for r in rows:
        key = (r[col["scenario"]], r[col["method"]], int(r[col["exposure"]]))
        groups.setdefault(key, []).append(r)
    out = []
    for (scen, method, j), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], METHODS.index(kv[0][1]), kv[0][2])):
        ok = [r for r in rs if r[col["status"]] == "ok"]
        ises = [float(r[col["ise"]]) for r in ok]
        raws = [float(r[col["ise_raw"]]) for r in ok]
        conv = [r for r in ok if r[col["converged"]] in (True, "true")]
        mean = float(np.mean(ises)) if ises else float("nan")
        sd = _sd(ises)
        out.append([
            scen, method, j, len(ok), len(rs) - len(ok), mean, sd,
            float(np.mean(raws)) if raws else float("nan"), _sd(raws),
            len(conv) / len(rs), f"{mean:.3f} ({sd:.3f})",
        ])
    return out


def curve_rows(results: Sequence[dict], level: float = 0.95) -> list:
    """``CURVE_COLUMNS`` rows: per method, exposure and grid point across replicates."""
    ok = [r for r in results if r["status"] == "ok"]
    if not ok:
        return []
    grid = np.asarray(ok[0]["grid"])
    alpha = 1.0 - level
    out = []
    keys = sorted({(e["method"], e["exposure"]) for r in ok for e in r["entries"]},
                  key=lambda k: (METHODS.index(k[0]), k[1]))
    for method, j in keys:
        picked = [(r, e) for r in ok for e in r["entries"]
                  if e["method"] == method and e["exposure"] == j]
        est = np.array([e["estimate"] for _, e in picked])
        truth = np.asarray(picked[0][0]["truth"][j - 1])
        has_bands = all(e["lower"] is not None for _, e in picked)
        if has_bands:
            lo = np.array([e["lower"] for _, e in picked])
            up = np.array([e["upper"] for _, e in picked])
            mean_lo, mean_up = lo.mean(0), up.mean(0)
            cover = np.mean((lo <= truth) & (truth <= up), axis=0)
        else:
            mean_lo = mean_up = cover = np.full(grid.size, np.nan)
        q_lo, q_up = np.quantile(est, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
        sd = est.std(axis=0, ddof=1) if len(est) > 1 else np.full(grid.size, np.nan)
        for g in range(grid.size):
            out.append([method, j, grid[g], truth[g], est[:, g].mean(), sd[g], q_lo[g], q_up[g],
                        mean_lo[g], mean_up[g], cover[g]])
    return out


def read_replicates(path) -> list:
    """Rows of a ``replicates.csv`` with numeric fields parsed back."""
    import csv
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPLICATE_COLUMNS:
            raise ValueError(f"unexpected replicates.csv header {header}")
        for r in reader:
            rows.append([
                r[0], int(r[1]), r[2], int(r[3]), r[4], r[5] == "true",
                int(r[6]) if r[6] else None, r[7] or None,
                float(r[8]) if r[8] else None, float(r[9]) if r[9] else None,
                r[10] or None, r[11],
            ])
    return rows


def run_scenario(scenario: ScenarioConfig, model: Optional[ModelConfig] = None,
                 out_dir=None, options: Optional[RunOptions] = None,
                 replicates: Optional[Sequence[int]] = None) -> RunManifest:
    """Run every replicate of ``scenario`` and write the output files.

    ``out_dir=None`` skips writing. ``replicates`` restricts the run to the
    given replicate indices (default ``range(scenario.replicates)``).
    """
    scenario.validate()
    options = options or RunOptions()
    if model is None:
        model = ModelConfig(outcome_type=scenario.outcome_type)
    if model.outcome_type != scenario.outcome_type:
        model = dataclasses.replace(model, outcome_type=scenario.outcome_type)
    model = dataclasses.replace(model, domain_end=scenario.domain_end)
    indices = list(range(scenario.replicates)) if replicates is None else [int(i) for i in replicates]
    start = time.perf_counter()
    results = _execute(scenario, model, indices, options)
    for res in results:
        if res["status"] != "ok":
            log.warning("replicate %d failed: %s", res["replicate"], res["error"])
    rows = _rows(scenario.scenario, results)
    summary = summarize(rows)
    ok = [r for r in results if r["status"] == "ok"]
    n_conv = sum(1 for r in ok if all(e["converged"] for e in r["entries"]))
    manifest = RunManifest(
        scenario=_jsonable(scenario.to_dict()),
        model=_jsonable(model),
        seed=int(scenario.seed),
        version=__version__,
        replicates=len(indices),
        n_ok=len(ok),
        n_failed=len(results) - len(ok),
        n_converged=n_conv,
        convergence_threshold=options.convergence_threshold,
        failures=[{"replicate": r["replicate"], "error": r["error"]} for r in results if r["status"] != "ok"],
        summary=[dict(zip(SUMMARY_COLUMNS, _jsonable(s))) for s in summary],
        elapsed_seconds=time.perf_counter() - start,
        rows=rows,
        results=results,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {name: str(out / name) for name in
                 ("replicates.csv", "summary.csv", "curves.csv", "manifest.json")}
        write_csv(files["replicates.csv"], REPLICATE_COLUMNS, rows)
        write_csv(files["summary.csv"], SUMMARY_COLUMNS, summary)
        write_csv(files["curves.csv"], CURVE_COLUMNS, curve_rows(results, model.level))
        manifest.out_dir = str(out)
        manifest.files = files
        with open(files["manifest.json"], "w", encoding="utf-8") as fh:
            json.dump(_nan_to_none(manifest.to_dict()), fh, indent=2)
            fh.write("\n")
    return manifest


def _nan_to_none(value):
    if isinstance(value, dict):
        return {k: _nan_to_none(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_nan_to_none(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def run_sweep(scenario: ScenarioConfig, parameter: str, values: Sequence,
              model: Optional[ModelConfig] = None, out_dir=None,
              options: Optional[RunOptions] = None) -> List[RunManifest]:
    """One :func:`run_scenario` per value of ``parameter``.

    Each value writes into ``<out_dir>/<parameter>=<value>/``; a combined
    ``sweep_summary.csv`` with leading ``parameter, value`` columns goes
    into ``out_dir``.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"field 'sweep.parameter': expected one of {sorted(SWEEP_PARAMETERS)}, got {parameter!r}")
    values = list(values)
    if not values:
        raise ConfigError("field 'sweep.values': at least one value is required")
    target = SWEEP_PARAMETERS[parameter]
    configs = []
    for v in values:
        try:
            configs.append(scenario.replace(**{target: v}))
        except ConfigError as exc:
            raise ConfigError(f"sweep value {v!r}: {exc}") from None
    manifests = []
    combined = []
    for v, cfg in zip(values, configs):
        sub = None if out_dir is None else Path(out_dir) / f"{parameter}={fmt(v)}"
        m = run_scenario(cfg, model, sub, options)
        manifests.append(m)
        combined.extend([parameter, v, *[row[c] for c in SUMMARY_COLUMNS]] for row in m.summary)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out_dir) / "sweep_summary.csv", ("parameter", "value", *SUMMARY_COLUMNS), combined)
        with open(Path(out_dir) / "sweep_manifest.json", "w", encoding="utf-8") as fh:
            json.dump(_nan_to_none({
                "parameter": parameter,
                "values": _jsonable(values),
                "runs": [m.out_dir for m in manifests],
                "passed": all(m.passed for m in manifests),
            }), fh, indent=2)
            fh.write("\n")
    return manifests
