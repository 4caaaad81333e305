"""Command-line interface: ``mvfmr {simulate,sweep,fit,fpca}``.

Run configuration is one YAML file. Top-level keys mirror
:class:`~mvfmr.simulate.ScenarioConfig`; optional sections ``model``
(:class:`~mvfmr.model.ModelConfig` fields, with nested ``smoothing``,
``gmm`` and ``logistic``), ``harness`` (``convergence_threshold``,
``cache_dir``) and ``sweep`` (``parameter``, ``values``). ``--set key=value``
overrides any key, with dots for sections (``--set model.folds=3``); values
are parsed as YAML.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .estimators import GmmOptions, InstrumentMatrix, LogisticOptions
from .exceptions import ConfigError, MvfmrError
from .fpca import fit_fpca
from .harness import RunOptions, run_scenario, run_sweep
from .io import (align_subjects, fmt, read_exposures, read_genotypes, read_outcome,
                 write_csv)
from .model import ModelConfig, fit_with_univariable
from .simulate import ScenarioConfig, dump_replicate, simulate_replicate
from .smoothing import SmoothingConfig

__all__ = ["RunConfig", "load_config", "fit_data", "fpca_data", "main"]

log = logging.getLogger("mvfmr")

_SCENARIO_FIELDS = {f.name for f in dataclasses.fields(ScenarioConfig)}
_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)} - {"outcome_type"}
_NESTED = {"smoothing": SmoothingConfig, "gmm": GmmOptions, "logistic": LogisticOptions}
_HARNESS_FIELDS = {"convergence_threshold", "cache_dir"}
_SWEEP_FIELDS = {"parameter", "values"}
_SECTIONS = {"model": _MODEL_FIELDS, "harness": _HARNESS_FIELDS, "sweep": _SWEEP_FIELDS}


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    model: ModelConfig
    options: RunOptions
    sweep: dict = field(default_factory=dict)
    # top-level keys given explicitly (file or --set)
    explicit: frozenset = frozenset()
    raw: dict = field(default_factory=dict)


def _key_lines(text: str) -> dict:
    """Line number of every mapping key, keyed by dotted path."""
    lines = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                lines[path] = k.start_mark.line + 1
                walk(v, path + ".")

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return lines


def _where(lines, key):
    return f"line {lines[key]}: " if key in lines else ""


def _parse_set(item: str):
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, text = item.split("=", 1)
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"--set {key}: cannot parse value {text!r}: {exc}") from None
    return key.strip(), value


def _apply(raw: dict, key: str, value):
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: '{p}' is not a section")
    node[parts[-1]] = value


def _check_keys(raw: dict, lines: dict):
    allowed = _SCENARIO_FIELDS | set(_SECTIONS)
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"{_where(lines, key)}unknown field '{key}'")
        if key in _SECTIONS:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{_where(lines, key)}section '{key}' must be a mapping")
            for sub, subval in value.items():
                path = f"{key}.{sub}"
                if sub not in _SECTIONS[key]:
                    raise ConfigError(f"{_where(lines, path)}unknown field '{path}'")
                if key == "model" and sub in _NESTED and subval is not None:
                    if not isinstance(subval, dict):
                        raise ConfigError(f"{_where(lines, path)}'{path}' must be a mapping")
                    names = {f.name for f in dataclasses.fields(_NESTED[sub])}
                    for leaf in subval:
                        if leaf not in names:
                            raise ConfigError(f"{_where(lines, path + '.' + leaf)}unknown field '{path}.{leaf}'")


def _build_model(section: dict, outcome_type: str, lines: dict) -> ModelConfig:
    kwargs = {}
    for key, value in (section or {}).items():
        if key in _NESTED:
            try:
                value = _NESTED[key](**(value or {}))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{_where(lines, 'model.' + key)}field 'model.{key}': {exc}") from None
        elif key in ("components", "candidates") and value is not None:
            value = tuple(tuple(v) for v in value) if key == "candidates" else tuple(value)
        kwargs[key] = value
    try:
        return ModelConfig(outcome_type=outcome_type, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'model': {exc}") from None


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                seed: Optional[int] = None, threads: Optional[int] = None) -> RunConfig:
    """Parse and validate a run configuration; errors name the line and field."""
    text = ""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"line {mark.line + 1}: " if mark is not None else ""
            raise ConfigError(f"{path}: {where}invalid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    lines = _key_lines(text)
    for item in overrides:
        _apply(raw, *_parse_set(item))
    if seed is not None:
        raw["seed"] = int(seed)
    _check_keys(raw, lines)
    scen_kwargs = {k: v for k, v in raw.items() if k in _SCENARIO_FIELDS}
    try:
        scenario = ScenarioConfig(**scen_kwargs)
    except ConfigError as exc:
        msg = str(exc)
        name = msg.split("'")[1] if msg.startswith("field '") else ""
        raise ConfigError(f"{_where(lines, name)}{msg}") from None
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    model = _build_model(raw.get("model") or {}, scenario.outcome_type, lines)
    harness = raw.get("harness") or {}
    options = RunOptions(threads=threads, **harness)
    return RunConfig(scenario, model, options, dict(raw.get("sweep") or {}),
                     frozenset(raw), raw)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _load_inputs(exposure_file, genotype_file, outcome_file, outcome_type):
    exposures = read_exposures(exposure_file)
    gids, names, gvals = read_genotypes(genotype_file)
    oids, y = read_outcome(outcome_file, outcome_type)
    ids = align_subjects([[s.subject_id for s in samples] for samples in exposures.values()],
                         gids, oids)
    grow = {int(s): i for i, s in enumerate(gids)}
    orow = {int(s): i for i, s in enumerate(oids)}
    G = InstrumentMatrix(gvals[[grow[i] for i in ids]], column_names=tuple(names))
    y = y[[orow[i] for i in ids]]
    sample_sets = [exposures[e] for e in sorted(exposures)]
    return sorted(exposures), sample_sets, G, y, ids


def _fit_model_config(cfg: RunConfig) -> ModelConfig:
    model = cfg.model
    section = cfg.raw.get("model") or {}
    changes = {}
    if "band_method" not in section:
        changes["band_method"] = "bootstrap"
    if model.domain_end is None and "domain_end" in cfg.explicit:
        changes["domain_end"] = cfg.scenario.domain_end
    return dataclasses.replace(model, **changes) if changes else model


def fit_data(exposure_file, genotype_file, outcome_file, config: RunConfig, out_dir) -> dict:
    """Fit MV-FMR (and U-FMR per exposure) to data files; write fit.json and curves.csv.

    Bands default to the bootstrap here unless ``model.band_method`` is set.
    The FPCA domain end comes from ``model.domain_end``, else from an explicit
    top-level ``domain_end``, else the largest observed time.
    """
    model = _fit_model_config(config)
    exposure_ids, sets, G, y, ids = _load_inputs(exposure_file, genotype_file, outcome_file,
                                                 model.outcome_type)
    if len(sets) > 2:
        raise ConfigError(f"at most two exposures are supported, found {len(sets)}")
    mv, uv = fit_with_univariable(sets, y, G, model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = {
        "exposure_ids": exposure_ids,
        "n_subjects": int(len(ids)),
        "mvfmr": mv.to_dict(),
        "ufmr": [u.to_dict() for u in uv],
    }
    _write_json(out / "fit.json", result)
    rows = []
    for method, fits in (("mvfmr", [mv]), ("ufmr", uv)):
        for fit in fits:
            bands = fit.pointwise_bands or [(None, None)] * len(fit.beta_functions)
            for j, beta, (lo, up) in zip(fit.exposure_index, fit.beta_functions, bands):
                for g, t in enumerate(fit.grid):
                    rows.append([method, exposure_ids[j - 1], t, beta[g],
                                 None if lo is None else lo[g], None if up is None else up[g]])
    write_csv(out / "curves.csv", ("method", "exposure", "time", "estimate", "lower", "upper"), rows)
    return {"fit": mv, "ufmr": uv, "files": {"fit": str(out / "fit.json"),
                                             "curves": str(out / "curves.csv")}}


def fpca_data(exposure_file, config: RunConfig, out_dir) -> dict:
    """FPCA per exposure; writes ``fpca_<exposure>.json`` and ``scores.csv``."""
    model = _fit_model_config(config)
    exposures = read_exposures(exposure_file)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, files = [], {}
    for eid, samples in exposures.items():
        m = fit_fpca(samples, grid_size=model.grid_size, max_components=model.max_components,
                     smoothing=model.smoothing, domain_end=model.domain_end,
                     min_subjects=model.min_subjects)
        path = out / f"fpca_{eid}.json"
        _write_json(path, m.to_dict())
        files[eid] = str(path)
        for sid, sc in zip(m.subject_ids, m.scores):
            rows.extend([int(sid), eid, k + 1, float(v)] for k, v in enumerate(sc))
    write_csv(out / "scores.csv", ("subject_id", "exposure_id", "component", "score"), rows)
    files["scores"] = str(out / "scores.csv")
    return files


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--threads", type=int, help="worker processes (default: all cores)")
    p.add_argument("--out-dir", default="mvfmr_out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. model.folds=3")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvfmr", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run every replicate of one scenario")
    _common(p)
    p.add_argument("--dump-data", type=int, default=0, metavar="N",
                   help="also write the data files of the first N replicates")

    p = sub.add_parser("sweep", help="run a scenario over a grid of one parameter")
    _common(p)
    p.add_argument("--parameter", choices=("p12", "gamma", "n_sparse"))
    p.add_argument("--values", nargs="+", type=yaml.safe_load)

    p = sub.add_parser("fit", help="fit MV-FMR and U-FMR to data files")
    _common(p)
    p.add_argument("--exposures", required=True, help="long-format exposure CSV")
    p.add_argument("--genotypes", required=True, help="genotype CSV")
    p.add_argument("--outcome", required=True, help="outcome CSV")

    p = sub.add_parser("fpca", help="FPCA diagnostics for an exposure file")
    _common(p)
    p.add_argument("--exposures", required=True, help="long-format exposure CSV")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed, args.threads)
        if args.command == "simulate":
            manifest = run_scenario(cfg.scenario, cfg.model, args.out_dir, cfg.options)
            for i in range(min(args.dump_data, cfg.scenario.replicates)):
                dump_replicate(simulate_replicate(cfg.scenario, i),
                               Path(args.out_dir) / "data" / f"replicate_{i:04d}")
            print(f"{manifest.n_ok}/{manifest.replicates} replicates ok, "
                  f"{manifest.convergence_rate:.3f} converged -> {args.out_dir}")
            return manifest.exit_code
        if args.command == "sweep":
            parameter = args.parameter or cfg.sweep.get("parameter")
            values = args.values if args.values is not None else cfg.sweep.get("values")
            if parameter is None:
                raise ConfigError("sweep needs --parameter or sweep.parameter in the config")
            manifests = run_sweep(cfg.scenario, parameter, values or [], cfg.model,
                                  args.out_dir, cfg.options)
            print(f"{len(manifests)} runs -> {args.out_dir}")
            return 0 if all(m.passed for m in manifests) else 1
        if args.command == "fit":
            res = fit_data(args.exposures, args.genotypes, args.outcome, cfg, args.out_dir)
            print(f"components {list(res['fit'].component_counts)} -> {res['files']['fit']}")
            return 0
        files = fpca_data(args.exposures, cfg, args.out_dir)
        print(f"{len(files) - 1} exposure(s) -> {args.out_dir}")
        return 0
    except MvfmrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
