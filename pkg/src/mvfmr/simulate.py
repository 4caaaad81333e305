"""Synthetic data for the pleiotropy, null-control and mediation scenarios.

Each exposure is generated on a dense regular grid as

    X_j(t) = sum_l (a_l + b_l t) G_l + U_0j + U_j(t) + e_j(t)

with Binomial(2, 0.3) genotypes, Uniform genetic effects, a N(0, 1) random
intercept and independent discretized Wiener processes for ``U_j`` and
``e_j`` (by default scaled to unit variance at the domain end). In the
mediation scenario ``X_2`` additionally receives ``gamma * X_1(t)``. Sparse
observations are exact evaluations of the dense path at ``n_sparse``
distinct grid nodes drawn per subject and exposure.

The outcome is ``b0 + int b_1 X_1 + int b_2 X_2 + g_Y`` (trapezoidal rule on
the dense grid) with ``g_Y = c * sum_j (U_0j + mean_t U_j) + e_Y``. Binary
outcomes drop ``e_Y``, multiply eta by ``binary_scale`` and draw
``Y ~ Bernoulli(expit(eta))``, with the intercept set by bisection so that
the expected prevalence hits a target. Binary truth curves carry the same
factor, so they are log-odds effects.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .estimators import InstrumentMatrix
from .exceptions import ConfigError, DimensionMismatchError
from .fpca import SparseFunctionalSample

__all__ = [
    "ScenarioConfig",
    "ReplicateData",
    "effect_curve",
    "gen_genotypes",
    "gen_genetic_effects",
    "gen_wiener",
    "gen_exposures",
    "gen_outcome",
    "simulate_replicate",
    "replicate_seed",
    "dump_replicate",
]

SCENARIOS = ("pleiotropy", "null_control", "mediation")
SHAPES = ("null", "linear", "quadratic")
SCENARIO_ALIASES = {1: "pleiotropy", 2: "null_control", 3: "mediation",
                    "1": "pleiotropy", "2": "null_control", "3": "mediation"}


@dataclass
class ScenarioConfig:
    """Full description of one simulation scenario.

    Effect shapes are ``'null'``, ``'linear'`` (``0.02 t``), ``'quadratic'``
    (``0.002 t^2 - 0.11 t + 0.5``) or a custom curve given as a mapping
    ``{"times": [...], "values": [...]}`` (linearly interpolated).
    """

    scenario: str = "pleiotropy"
    n: int = 5000
    p_total: int = 100
    p12_fraction: float = 0.15
    gamma: float = 0.3
    n_sparse: int = 10
    domain_end: float = 50.0
    effect_shape_1: object = "linear"
    effect_shape_2: object = "linear"
    outcome_type: str = "continuous"
    replicates: int = 500
    seed: int = 0
    # data-generating choices the model leaves open
    confounder_loading: float = 0.5
    # Wiener scales; None gives unit variance at the domain end (1/sqrt(T))
    confounder_scale: Optional[float] = None
    noise_scale: Optional[float] = None
    intercept: float = 0.0
    prevalence: float = 0.3
    # binary linear predictor multiplier; gives SD(eta) near 2.7 at the defaults
    binary_scale: float = 0.05
    sim_grid_size: int = 201
    redraw_shared_effects: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.scenario = SCENARIO_ALIASES.get(self.scenario, self.scenario)
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"field 'scenario': expected one of {SCENARIOS}, got {self.scenario!r}")
        if self.outcome_type not in ("continuous", "binary"):
            raise ConfigError(f"field 'outcome_type': expected 'continuous' or 'binary', got {self.outcome_type!r}")
        for name in ("n", "p_total", "n_sparse", "replicates", "sim_grid_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"field '{name}': expected a positive integer, got {value!r}")
        if not 0.0 <= self.p12_fraction < 1.0:
            raise ConfigError(f"field 'p12_fraction': must lie in [0, 1), got {self.p12_fraction!r}")
        if self.domain_end <= 0:
            raise ConfigError("field 'domain_end': must be positive")
        if self.n_sparse > self.sim_grid_size:
            raise ConfigError("field 'n_sparse': cannot exceed sim_grid_size")
        for name in ("confounder_scale", "noise_scale"):
            value = getattr(self, name)
            if value is not None and not value >= 0:
                raise ConfigError(f"field '{name}': must be nonnegative")
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigError("field 'prevalence': must lie in (0, 1)")
        for name in ("effect_shape_1", "effect_shape_2"):
            _check_shape(getattr(self, name), name)
        return self

    @property
    def p12(self) -> int:
        return int(round(self.p12_fraction * self.p_total))

    @property
    def p_specific(self) -> int:
        return self.p_total - self.p12

    @property
    def sim_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.domain_end, self.sim_grid_size)

    @property
    def wiener_scales(self) -> tuple:
        unit = 1.0 / np.sqrt(self.domain_end)
        return (unit if self.confounder_scale is None else float(self.confounder_scale),
                unit if self.noise_scale is None else float(self.noise_scale))

    def shapes(self) -> tuple:
        shape2 = "null" if self.scenario == "null_control" else self.effect_shape_2
        return self.effect_shape_1, shape2

    def true_effects(self, t) -> list:
        """Effect curves on the outcome's scale (log-odds for binary outcomes)."""
        scale = self.binary_scale if self.outcome_type == "binary" else 1.0
        return [scale * effect_curve(shape, t) for shape in self.shapes()]

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_shape(shape, name):
    if isinstance(shape, str):
        if shape not in SHAPES:
            raise ConfigError(f"field '{name}': expected one of {SHAPES} or a custom curve, got {shape!r}")
        return
    if isinstance(shape, dict) and {"times", "values"} <= set(shape):
        t = np.asarray(shape["times"], float)
        v = np.asarray(shape["values"], float)
        if t.shape != v.shape or t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
            raise ConfigError(f"field '{name}': custom curve needs increasing 'times' and matching 'values'")
        return
    raise ConfigError(f"field '{name}': unrecognized effect shape {shape!r}")


def effect_curve(shape, t) -> np.ndarray:
    """True effect function evaluated at times ``t``."""
    t = np.asarray(t, dtype=float)
    if isinstance(shape, str):
        if shape == "null":
            return np.zeros_like(t)
        if shape == "linear":
            return 0.02 * t
        if shape == "quadratic":
            return 0.002 * t**2 - 0.11 * t + 0.5
        raise ConfigError(f"unknown effect shape {shape!r}")
    return np.interp(t, np.asarray(shape["times"], float), np.asarray(shape["values"], float))


@dataclass
class ReplicateData:
    """One simulated data set plus the latent quantities behind it."""

    genotypes: InstrumentMatrix
    sim_grid: np.ndarray
    dense_trajectories: list
    sparse_samples: list
    sparse_indices: list
    outcome: np.ndarray
    truth: list
    effects: tuple = ()
    confounders: dict = field(default_factory=dict)


def replicate_seed(seed: int, replicate: int) -> np.random.SeedSequence:
    """Seed sequence for one replicate; depends only on ``(seed, replicate)``."""
    return np.random.SeedSequence([int(seed), int(replicate)])


def gen_genotypes(n: int, p_total: int, rng: np.random.Generator,
                  p12_fraction: float = 0.0) -> InstrumentMatrix:
    """Binomial(2, 0.3) genotypes laid out as ``[G_1, G_2, G_12]``.

    ``P_12 = round(p12_fraction * p_total)`` shared columns and
    ``P_1 = P_2 = p_total - P_12`` exposure-specific ones.
    """
    if n < 1 or p_total < 1:
        raise ValueError("n and p_total must be positive")
    p12 = int(round(p12_fraction * p_total))
    p1 = p_total - p12
    labels = ("exposure1",) * p1 + ("exposure2",) * p1 + ("shared",) * p12
    values = rng.binomial(2, 0.3, size=(n, len(labels))).astype(float)
    return InstrumentMatrix(values, labels)


def gen_genetic_effects(p: int, rng: np.random.Generator):
    """Per-variant intercepts ``a ~ U(-0.1, 0.1)`` and slopes ``b ~ U(-0.004, 0.004)``.

    The time-varying effect of variant ``l`` is ``a[l] + b[l] * t``.
    """
    a = rng.uniform(-0.1, 0.1, size=p)
    b = rng.uniform(-0.004, 0.004, size=p)
    return a, b


def gen_wiener(grid, scale: float, rng: np.random.Generator, size: Optional[int] = None):
    """Discretized Wiener paths on ``grid`` (which must start at 0).

    Returns a vector, or an ``(size, len(grid))`` array when ``size`` is given.
    """
    grid = np.asarray(grid, dtype=float)
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be increasing and start at 0")
    shape = (grid.size - 1,) if size is None else (size, grid.size - 1)
    steps = rng.standard_normal(shape)
    steps *= scale * np.sqrt(np.diff(grid))
    paths = np.cumsum(steps, axis=-1)
    pad = [(0, 0)] * (paths.ndim - 1) + [(1, 0)]
    return np.pad(paths, pad)


def gen_exposures(config: ScenarioConfig, genotypes: InstrumentMatrix, effects,
                  rng: np.random.Generator):
    """Dense trajectories, sparse samples and sparsification indices.

    Returns ``(dense, samples, indices, confounders)`` with one entry per
    exposure in the first three.
    """
    grid = config.sim_grid
    n = genotypes.shape[0]
    G = genotypes.values
    a, b = effects
    dense, samples, indices = [], [], []
    confounders = {"u0": [], "u_mean": []}
    u_scale, e_scale = config.wiener_scales
    for j in (1, 2):
        mask = genotypes.columns_for(j)
        # a tuple holds per-exposure draws (shared variants redrawn)
        aj = (a[j - 1] if isinstance(a, tuple) else a)[mask]
        bj = (b[j - 1] if isinstance(b, tuple) else b)[mask]
        genetic = (G[:, mask] @ aj)[:, None] + (G[:, mask] @ bj)[:, None] * grid[None, :]
        u0 = rng.standard_normal(n)
        u_t = gen_wiener(grid, u_scale, rng, size=n)
        e_t = gen_wiener(grid, e_scale, rng, size=n)
        x = genetic + u0[:, None] + u_t + e_t
        if j == 2 and config.scenario == "mediation":
            x = x + config.gamma * dense[0]
        keys = rng.random((n, grid.size))
        idx = np.sort(np.argpartition(keys, config.n_sparse - 1, axis=1)[:, :config.n_sparse], axis=1)
        dense.append(x)
        indices.append(idx)
        rows = np.arange(n)[:, None]
        obs = x[rows, idx]
        samples.append([SparseFunctionalSample(i, grid[idx[i]], obs[i]) for i in range(n)])
        confounders["u0"].append(u0)
        confounders["u_mean"].append(np.trapezoid(u_t, grid, axis=1) / config.domain_end)
    return dense, samples, indices, confounders


def gen_outcome(config: ScenarioConfig, dense_trajectories, truth, rng: np.random.Generator,
                confounders: Optional[dict] = None) -> np.ndarray:
    """Outcome from dense trajectories and true effect curves on the same grid."""
    grid = config.sim_grid
    n = dense_trajectories[0].shape[0]
    eta = np.zeros(n)
    for x, beta in zip(dense_trajectories, truth):
        x = np.asarray(x)
        beta = np.asarray(beta)
        if x.shape[1] != grid.size or beta.shape != grid.shape:
            raise DimensionMismatchError("trajectories and truth curves must share the simulation grid")
        eta += np.trapezoid(x * beta[None, :], grid, axis=1)
    if confounders is not None:
        u = sum(u0 + um for u0, um in zip(confounders["u0"], confounders["u_mean"]))
        eta += config.confounder_loading * u
    if config.outcome_type == "continuous":
        return config.intercept + eta + rng.standard_normal(n)
    eta = config.binary_scale * eta
    target = config.prevalence
    width = 1.0 + np.max(np.abs(eta))
    b0 = brentq(lambda c: expit(c + eta).mean() - target, -width - 50, width + 50, xtol=1e-12)
    return (rng.random(n) < expit(b0 + eta)).astype(float)


def simulate_replicate(config: ScenarioConfig, replicate: int = 0,
                       rng: Optional[np.random.Generator] = None) -> ReplicateData:
    """Generate one replicate; seeded from ``(config.seed, replicate)`` by default."""
    config.validate()
    if rng is None:
        rng = np.random.default_rng(replicate_seed(config.seed, replicate))
    geno = gen_genotypes(config.n, config.p_total, rng, config.p12_fraction)
    a, b = gen_genetic_effects(geno.shape[1], rng)
    if config.redraw_shared_effects:
        a2, b2 = gen_genetic_effects(geno.shape[1], rng)
        shared = np.array([lab == "shared" for lab in geno.column_labels])
        a = (a, np.where(shared, a2, a))
        b = (b, np.where(shared, b2, b))
    dense, samples, indices, conf = gen_exposures(config, geno, (a, b), rng)
    grid = config.sim_grid
    truth = [effect_curve(shape, grid) for shape in config.shapes()]
    y = gen_outcome(config, dense, truth, rng, conf)
    truth = config.true_effects(grid)
    return ReplicateData(
        genotypes=geno,
        sim_grid=grid,
        dense_trajectories=dense,
        sparse_samples=samples,
        sparse_indices=indices,
        outcome=y,
        truth=truth,
        effects=(a, b),
        confounders=conf,
    )


def dump_replicate(data: ReplicateData, out_dir) -> dict:
    """Write a replicate as exposure, genotype, outcome and truth CSV files."""
    from .io import write_exposures, write_genotypes, write_outcome

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "exposures": out / "exposures.csv",
        "genotypes": out / "genotypes.csv",
        "outcome": out / "outcome.csv",
        "truth": out / "truth.csv",
    }
    write_exposures(paths["exposures"], data.sparse_samples)
    write_genotypes(paths["genotypes"], data.genotypes,
                    subject_ids=[s.subject_id for s in data.sparse_samples[0]])
    write_outcome(paths["outcome"], [s.subject_id for s in data.sparse_samples[0]], data.outcome)
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        fh.write("time,beta1,beta2\n")
        for t, b1, b2 in zip(data.sim_grid, data.truth[0], data.truth[1]):
            fh.write(f"{t!r},{b1!r},{b2!r}\n")
    return {k: str(v) for k, v in paths.items()}
