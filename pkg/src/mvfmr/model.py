"""Functional MR pipelines: FPCA per exposure, component selection, joint
estimation and reconstruction of the time-varying effect curves.

The multivariable fit stacks the score blocks of all exposures into one
pseudo-exposure design with the full instrument matrix; the univariable fit
is the same machinery with a single block.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .estimators import (
    GmmFit,
    GmmOptions,
    InstrumentMatrix,
    LogisticOptions,
    MomentTables,
    PseudoExposureDesign,
    TsriFit,
    conditional_f,
    cu_gmm,
    cu_gmm_from_tables,
    two_sri,
)
from .exceptions import (
    DimensionMismatchError,
    InsufficientComponentsError,
    InsufficientRepsError,
    MvfmrError,
    SingleClassError,
    SubjectMismatchError,
)
from .fpca import FpcaModel, SparseFunctionalSample, fit_fpca
from .metrics import auc, mse
from .smoothing import SmoothingConfig
from .validation import check_outcome

__all__ = [
    "ModelConfig",
    "CvReport",
    "MvfmrFit",
    "fold_labels",
    "select_components",
    "cross_validate_scores",
    "fit_mvfmr",
    "fit_ufmr",
    "fit_with_univariable",
    "FoldTables",
    "fit_from_scores",
    "reconstruct_beta",
    "pointwise_bands",
    "MVFMR",
    "UFMR",
]


@dataclass(frozen=True)
class ModelConfig:
    """Settings for :func:`fit_mvfmr` and :func:`fit_ufmr`.

    ``components`` fixes ``(K1, K2)`` (or ``(K,)`` for one exposure) and
    skips cross-validation; a zero entry drops that exposure's block.
    ``candidates`` defaults to every pair with ``1 <= K_j <= max_components``.
    """

    outcome_type: str = "continuous"
    components: Optional[tuple] = None
    max_components: int = 5
    candidates: Optional[tuple] = None
    folds: int = 5
    cv_seed: int = 0
    refit_fpca_per_fold: bool = False
    band_method: str = "asymptotic"
    level: float = 0.95
    bootstrap_reps: int = 200
    bootstrap_seed: int = 0
    grid_size: int = 51
    domain_end: Optional[float] = None
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    gmm: GmmOptions = field(default_factory=GmmOptions)
    logistic: LogisticOptions = field(default_factory=LogisticOptions)
    min_subjects: int = 50
    n_jobs: int = 1

    def __post_init__(self):
        if self.outcome_type not in ("continuous", "binary"):
            raise ValueError(f"outcome_type must be 'continuous' or 'binary', got {self.outcome_type!r}")
        if self.band_method not in ("asymptotic", "bootstrap", "none"):
            raise ValueError(f"band_method must be 'asymptotic', 'bootstrap' or 'none'")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.max_components < 1:
            raise ValueError("max_components must be at least 1")

    def candidate_set(self, n_blocks: int) -> list:
        if self.candidates is not None:
            cands = [tuple(int(k) for k in c) for c in self.candidates]
            if not cands:
                raise ValueError("candidates must not be empty")
            for c in cands:
                if len(c) != n_blocks or min(c) < 1:
                    raise ValueError(f"candidate {c} does not match {n_blocks} exposure blocks")
            return cands
        ks = range(1, self.max_components + 1)
        if n_blocks == 1:
            return [(k,) for k in ks]
        return [(k1, k2) for k1 in ks for k2 in ks]


@dataclass(frozen=True)
class CvReport:
    """Out-of-fold losses per candidate and the selected component counts."""

    candidates: tuple
    losses: np.ndarray
    selected: tuple
    folds: int
    loss_name: str
    fold_losses: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "candidates": [list(c) for c in self.candidates],
            "losses": [float(x) for x in self.losses],
            "selected": list(self.selected),
            "folds": self.folds,
            "loss": self.loss_name,
        }


@dataclass(frozen=True)
class MvfmrFit:
    """Fitted functional MR model.

    ``beta_functions[j]`` is ``eigenfunctions_j @ beta_star_j`` on ``grid``
    and ``pointwise_bands[j]`` the matching ``(lower, upper)`` pair.
    """

    component_counts: tuple
    estimator_fit: object
    beta_functions: list
    pointwise_bands: list
    fpca_models: list
    diagnostics: dict
    grid: np.ndarray
    outcome_type: str
    level: float
    band_method: str
    cv_report: Optional[CvReport] = None
    design: Optional[PseudoExposureDesign] = field(default=None, repr=False)
    exposure_index: tuple = ()

    @property
    def gmm_or_tsri(self):
        return self.estimator_fit

    @property
    def beta_star(self) -> np.ndarray:
        return self.estimator_fit.beta_star

    @property
    def beta_star_blocks(self) -> list:
        return _split(self.beta_star, self.component_counts)

    @property
    def covariance(self) -> np.ndarray:
        return self.estimator_fit.covariance

    @property
    def converged(self) -> bool:
        return bool(self.estimator_fit.converged)

    def predict(self, scores, instruments=None) -> np.ndarray:
        """Outcome predictions (continuous) or probabilities (binary) from scores."""
        if self.outcome_type == "continuous":
            return self.estimator_fit.predict(scores)
        if instruments is None:
            raise ValueError("binary predictions need the instruments for the control function")
        return self.estimator_fit.predict_proba(scores, instruments)

    def to_dict(self) -> dict:
        est = self.estimator_fit
        out = {
            "outcome_type": self.outcome_type,
            "component_counts": list(self.component_counts),
            "exposures": [int(j) for j in self.exposure_index],
            "beta_star": est.beta_star.tolist(),
            "covariance": est.covariance.tolist(),
            "converged": self.converged,
            "level": self.level,
            "band_method": self.band_method,
            "grid": self.grid.tolist(),
            "beta_functions": [b.tolist() for b in self.beta_functions],
            "bands": [
                {"lower": lo.tolist(), "upper": up.tolist()} for lo, up in self.pointwise_bands
            ],
            "diagnostics": self.diagnostics,
            "fpca": [m.to_dict() for m in self.fpca_models],
        }
        if isinstance(est, GmmFit):
            out["objective_value"] = est.objective_value
            out["j_statistic"] = est.j_statistic
            out["j_df"] = est.j_df
            out["iterations"] = est.iterations
        if self.cv_report is not None:
            out["cv"] = self.cv_report.to_dict()
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _split(vec, counts) -> list:
    edges = np.cumsum([0] + list(counts))
    return [vec[edges[j]:edges[j + 1]] for j in range(len(counts))]


def reconstruct_beta(beta_star_block, eigenfunctions) -> np.ndarray:
    """Effect curve ``sum_k beta*_k phi_k(t)`` on the eigenfunction grid."""
    b = np.atleast_1d(np.asarray(beta_star_block, dtype=float))
    phi = np.asarray(eigenfunctions, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    if b.ndim != 1 or phi.shape[1] != b.size:
        raise DimensionMismatchError(
            f"{b.size} coefficients for {phi.shape[1]} eigenfunctions"
        )
    return phi @ b


def fold_labels(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold index per subject; balanced sizes, seeded random assignment."""
    if folds < 2 or folds > n:
        raise ValueError(f"folds must lie in [2, {n}], got {folds}")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.intp)
    labels[perm] = np.arange(n) % folds
    return labels


def _pick(candidates, losses):
    losses = np.asarray(losses, dtype=float)
    finite = np.isfinite(losses)
    if not finite.any():
        # nothing fit; fall back to the most parsimonious candidate
        order = sorted(range(len(candidates)), key=lambda i: (sum(candidates[i]), candidates[i]))
        return candidates[order[0]]
    best = np.min(losses[finite])
    tol = 1e-12 * max(abs(best), 1e-300)
    tied = [i for i in range(len(candidates)) if finite[i] and losses[i] - best <= tol]
    tied.sort(key=lambda i: (sum(candidates[i]), candidates[i]))
    return candidates[tied[0]]


def _columns(pair, max_counts):
    offsets = np.concatenate([[0], np.cumsum(max_counts)[:-1]])
    return np.concatenate([off + np.arange(k) for off, k in zip(offsets, pair)]).astype(np.intp)


def _map(fn, items, n_jobs):
    if n_jobs == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


class FoldTables:
    """Per-fold CU-GMM moment tables over a fixed set of score columns.

    Built once per data set; training tables for fold ``f`` are the total
    minus the fold's own tables. Several selections (for example the
    multivariable model and each univariable model) can share one instance
    when their score blocks are column subsets of ``blocks``.
    """

    def __init__(self, blocks: Sequence, outcome, instruments, labels: np.ndarray):
        self.blocks = [np.asarray(b, dtype=float).reshape(len(outcome), -1) for b in blocks]
        self.max_counts = [b.shape[1] for b in self.blocks]
        self.labels = np.asarray(labels)
        self.folds = int(self.labels.max()) + 1
        G = _instrument_array(instruments)
        y = np.asarray(outcome, dtype=float)
        X = np.column_stack(self.blocks)
        self.parts = [MomentTables.build(G[self.labels == f], y[self.labels == f],
                                         X[self.labels == f]) for f in range(self.folds)]
        total = self.parts[0]
        for t in self.parts[1:]:
            total = total + t
        self.total = total
        self._centered_total = None

    def train(self, f: int) -> MomentTables:
        return (self.total - self.parts[f]).center()

    def full(self) -> MomentTables:
        if self._centered_total is None:
            self._centered_total = self.total.center()
        return self._centered_total

    def columns(self, counts) -> np.ndarray:
        return _columns(counts, self.max_counts)


def _instrument_array(instruments) -> np.ndarray:
    if isinstance(instruments, InstrumentMatrix):
        return instruments.values
    return np.asarray(instruments, dtype=float)


def _check_candidates(candidates, max_counts):
    candidates = [tuple(int(k) for k in c) for c in candidates]
    if not candidates:
        raise ValueError("candidates must not be empty")
    for c in candidates:
        if len(c) != len(max_counts):
            raise ValueError(f"candidate {c} does not match {len(max_counts)} score blocks")
        if min(c) < 0 or sum(c) == 0:
            raise ValueError(f"candidate {c} needs nonnegative counts with a positive total")
        for k, kmax in zip(c, max_counts):
            if k > kmax:
                raise InsufficientComponentsError(
                    f"candidate {c} asks for {k} components but only {kmax} are available"
                )
    return candidates


def cross_validate_scores(score_blocks: Sequence, outcome, instruments, candidates,
                          folds: int = 5, outcome_type: str = "continuous", seed: int = 0,
                          gmm: Optional[GmmOptions] = None,
                          logistic: Optional[LogisticOptions] = None,
                          n_jobs: int = 1, fold_scores: Optional[Sequence] = None,
                          labels: Optional[np.ndarray] = None,
                          tables: Optional[FoldTables] = None) -> CvReport:
    """K-fold selection of component counts from precomputed score blocks.

    ``score_blocks[j]`` holds the leading scores of exposure ``j``; a
    candidate ``(K_1, K_2)`` takes the first ``K_j`` columns of each block
    (a zero count leaves the block out). Continuous outcomes use the
    held-out mean squared error of ``xi_test @ beta*`` and binary outcomes
    ``1 - AUC`` of the 2SRI probabilities; failed fits score ``inf``.

    ``fold_scores`` may instead supply, per fold, a ``(train_blocks,
    test_blocks)`` pair, used when the FPCA is refit within each fold.
    ``tables`` reuses precomputed :class:`FoldTables` (continuous only).
    """
    gmm = gmm or GmmOptions()
    logistic = logistic or LogisticOptions()
    G = _instrument_array(instruments)
    y = check_outcome(outcome, outcome_type, G.shape[0])
    n = y.size
    if tables is not None:
        blocks, labels, folds = tables.blocks, tables.labels, tables.folds
        max_counts = tables.max_counts
    elif fold_scores is None:
        blocks = [np.asarray(b, dtype=float).reshape(n, -1) for b in score_blocks]
        max_counts = [b.shape[1] for b in blocks]
    else:
        max_counts = [np.asarray(b).shape[1] for b in fold_scores[0][0]]
    candidates = _check_candidates(candidates, max_counts)
    if labels is None:
        labels = fold_labels(n, folds, seed)
    fold_loss = np.full((len(candidates), folds), np.inf)

    def fold_data(f):
        test = labels == f
        train = ~test
        if fold_scores is None:
            X = np.column_stack(blocks)
            return train, test, X[train], X[test]
        tr, te = fold_scores[f]
        return train, test, np.column_stack(tr), np.column_stack(te)

    if outcome_type == "continuous":
        if tables is None and fold_scores is None:
            tables = FoldTables(blocks, y, G, labels)
        for f in range(folds):
            train, test, Xtr, Xte = fold_data(f)
            if tables is not None:
                train_tables = tables.train(f)
            else:
                train_tables = MomentTables.build(G[train], y[train], Xtr).center()

            def one(i, train_tables=train_tables, Xte=Xte, test=test):
                cols = _columns(candidates[i], max_counts)
                try:
                    fit = cu_gmm_from_tables(train_tables.select(cols), gmm)
                except MvfmrError:
                    return np.inf
                loss = mse(fit.predict(Xte[:, cols]), y[test])
                return loss if np.isfinite(loss) else np.inf

            fold_loss[:, f] = _map(one, list(range(len(candidates))), n_jobs)
        loss_name = "mse"
    else:
        for f in range(folds):
            train, test, Xtr, Xte = fold_data(f)

            def one(i, train=train, test=test, Xtr=Xtr, Xte=Xte):
                cols = _columns(candidates[i], max_counts)
                try:
                    design = PseudoExposureDesign(Xtr[:, cols], y[train], G[train])
                    fit = two_sri(design, logistic)
                    prob = fit.predict_proba(Xte[:, cols], G[test])
                    return 1.0 - auc(prob, y[test])
                except SingleClassError:
                    return np.nan
                except MvfmrError:
                    return np.inf

            fold_loss[:, f] = _map(one, list(range(len(candidates))), n_jobs)
        loss_name = "1-auc"
    usable = ~np.isnan(fold_loss)
    with np.errstate(invalid="ignore"):
        losses = np.where(usable.any(axis=1),
                          np.nansum(fold_loss, axis=1) / np.maximum(usable.sum(axis=1), 1),
                          np.inf)
    return CvReport(
        candidates=tuple(candidates),
        losses=losses,
        selected=_pick(candidates, losses),
        folds=folds,
        loss_name=loss_name,
        fold_losses=fold_loss,
    )


def _check_subjects(sample_sets, n_outcome, n_instruments):
    ids = [np.array([s.subject_id for s in samples]) for samples in sample_sets]
    for j, other in enumerate(ids[1:], start=2):
        if other.shape != ids[0].shape or not np.array_equal(other, ids[0]):
            missing = np.setdiff1d(ids[0], other).size + np.setdiff1d(other, ids[0]).size
            raise SubjectMismatchError(
                f"exposure {j} subjects differ from exposure 1 ({missing} unmatched ids)"
                if missing else f"exposure {j} lists the same subjects in a different order"
            )
    n = ids[0].size
    if n_outcome != n or n_instruments != n:
        raise SubjectMismatchError(
            f"{n} subjects with exposures, {n_outcome} outcomes, {n_instruments} genotype rows"
        )


def _fit_models(sample_sets, config: ModelConfig, subjects=None) -> list:
    models = []
    for samples in sample_sets:
        if subjects is not None:
            samples = [samples[i] for i in subjects]
        models.append(fit_fpca(
            samples,
            grid_size=config.grid_size,
            max_components=config.max_components,
            smoothing=config.smoothing,
            domain_end=config.domain_end,
            min_subjects=config.min_subjects,
        ))
    return models


def select_components(samples_1, samples_2, outcome, instruments, candidates=None,
                      folds: int = 5, config: Optional[ModelConfig] = None,
                      fpca_models: Optional[list] = None) -> CvReport:
    """Cross-validated choice of ``(K1, K2)``.

    ``samples_2`` may be ``None`` for a single exposure. The FPCA is fit
    once on all subjects (or taken from ``fpca_models``) unless
    ``config.refit_fpca_per_fold`` is set.
    """
    config = config or ModelConfig()
    sets = [s for s in (samples_1, samples_2) if s is not None]
    G = instruments.values if isinstance(instruments, InstrumentMatrix) else np.asarray(instruments, float)
    y = np.asarray(outcome, dtype=float).ravel()
    _check_subjects(sets, y.size, G.shape[0])
    if candidates is None:
        candidates = config.candidate_set(len(sets))
    candidates = [tuple(int(k) for k in c) for c in candidates]
    kmax = [max(c[j] for c in candidates) for j in range(len(sets))]
    if not config.refit_fpca_per_fold:
        models = fpca_models or _fit_models(sets, config)
        for j, (m, k) in enumerate(zip(models, kmax), start=1):
            if k > m.n_components:
                raise InsufficientComponentsError(
                    f"exposure {j}: candidates need {k} components, FPCA found {m.n_components}"
                )
        blocks = [m.scores[:, :k] for m, k in zip(models, kmax)]
        return cross_validate_scores(
            blocks, y, G, candidates, folds, config.outcome_type, config.cv_seed,
            config.gmm, config.logistic, config.n_jobs,
        )
    labels = fold_labels(y.size, folds, config.cv_seed)
    per_fold = []
    for f in range(folds):
        train = np.flatnonzero(labels != f)
        test = np.flatnonzero(labels == f)
        models = _fit_models(sets, config, train)
        tr, te = [], []
        for j, (m, k) in enumerate(zip(models, kmax)):
            if k > m.n_components:
                raise InsufficientComponentsError(
                    f"exposure {j + 1}, fold {f}: FPCA found {m.n_components} < {k} components"
                )
            tr.append(m.scores[:, :k])
            te.append(m.predict_scores([sets[j][i] for i in test])[:, :k])
        per_fold.append((tr, te))
    return cross_validate_scores(
        None, y, G, candidates, folds, config.outcome_type, config.cv_seed,
        config.gmm, config.logistic, config.n_jobs, fold_scores=per_fold, labels=labels,
    )


def _estimate(design: PseudoExposureDesign, config: ModelConfig):
    if config.outcome_type == "continuous":
        return cu_gmm(design, config.gmm)
    return two_sri(design, config.logistic)


def _diagnostics(design: PseudoExposureDesign, counts) -> dict:
    f_values = []
    for c in range(design.n_scores):
        try:
            f_values.append(float(conditional_f(design, c)))
        except MvfmrError:
            f_values.append(float("nan"))
    return {"conditional_f": [list(b) for b in _split(np.array(f_values), counts)]}


def _lift(counts, table_blocks, n_blocks) -> tuple:
    out = [0] * n_blocks
    for j, k in zip(table_blocks, counts):
        out[j] = int(k)
    return tuple(out)


def fit_from_scores(fpca_models: Sequence[FpcaModel], outcome, instruments,
                    config: Optional[ModelConfig] = None,
                    exposure_index: Optional[tuple] = None,
                    tables: Optional[FoldTables] = None,
                    table_blocks: Optional[tuple] = None) -> MvfmrFit:
    """Pipeline from fitted FPCA models onward (selection, estimation, bands).

    ``tables`` shares precomputed :class:`FoldTables` across fits on the same
    data (continuous outcomes); ``table_blocks[j]`` names the block of
    ``tables`` holding the scores of ``fpca_models[j]``.
    """
    config = config or ModelConfig()
    models = list(fpca_models)
    exposure_index = tuple(exposure_index or range(1, len(models) + 1))
    y = check_outcome(outcome, config.outcome_type)
    G = instruments if isinstance(instruments, InstrumentMatrix) else np.asarray(instruments, float)
    if tables is not None:
        if config.outcome_type != "continuous":
            tables = None
        else:
            table_blocks = tuple(table_blocks or range(len(models)))
            if len(table_blocks) != len(models):
                raise DimensionMismatchError("table_blocks must name one block per model")
            for m, j in zip(models, table_blocks):
                k = min(m.n_components, tables.max_counts[j])
                if not np.array_equal(tables.blocks[j][:, :k], m.scores[:, :k]):
                    raise ValueError("shared tables were built from different scores")
    cv = None
    if config.components is not None:
        counts = tuple(int(k) for k in config.components)
        if len(counts) != len(models):
            raise DimensionMismatchError(
                f"components {counts} given for {len(models)} exposures"
            )
        keep = [j for j, k in enumerate(counts) if k > 0]
        if not keep:
            raise ValueError("at least one exposure needs a positive component count")
        models = [models[j] for j in keep]
        exposure_index = tuple(exposure_index[j] for j in keep)
        counts = tuple(counts[j] for j in keep)
        if tables is not None:
            table_blocks = tuple(table_blocks[j] for j in keep)
    else:
        candidates = config.candidate_set(len(models))
        kmax = [max(c[j] for c in candidates) for j in range(len(models))]
        for j, (m, k) in enumerate(zip(models, kmax), start=1):
            if k > m.n_components:
                raise InsufficientComponentsError(
                    f"exposure {j}: candidates need {k} components, FPCA found {m.n_components}"
                )
        Gv = _instrument_array(G)
        if tables is None:
            cv = cross_validate_scores(
                [m.scores[:, :k] for m, k in zip(models, kmax)], y, Gv, candidates,
                config.folds, config.outcome_type, config.cv_seed, config.gmm,
                config.logistic, config.n_jobs,
            )
        else:
            nb = len(tables.max_counts)
            shared = cross_validate_scores(
                None, y, Gv, [_lift(c, table_blocks, nb) for c in candidates],
                gmm=config.gmm, n_jobs=config.n_jobs, tables=tables,
            )
            cv = CvReport(tuple(candidates), shared.losses, _pick(candidates, shared.losses),
                          shared.folds, shared.loss_name, shared.fold_losses)
        counts = cv.selected
    for m, k in zip(models, counts):
        if k > m.n_components:
            raise InsufficientComponentsError(
                f"requested {k} components but the FPCA has {m.n_components}"
            )
    models = [m.truncate(k) for m, k in zip(models, counts)]
    scores = np.column_stack([m.scores for m in models])
    design = PseudoExposureDesign(scores, y, G, counts)
    if tables is not None:
        cols = tables.columns(_lift(counts, table_blocks, len(tables.max_counts)))
        est = cu_gmm_from_tables(tables.full().select(cols), config.gmm)
    else:
        est = _estimate(design, config)
    betas = [reconstruct_beta(b, m.eigenfunctions) for b, m in zip(_split(est.beta_star, counts), models)]
    fit = MvfmrFit(
        component_counts=counts,
        estimator_fit=est,
        beta_functions=betas,
        pointwise_bands=[],
        fpca_models=models,
        diagnostics=_diagnostics(design, counts),
        grid=models[0].grid,
        outcome_type=config.outcome_type,
        level=config.level,
        band_method=config.band_method,
        cv_report=cv,
        design=design,
        exposure_index=exposure_index,
    )
    if config.band_method == "none":
        return fit
    bands = pointwise_bands(fit, config.level, config.band_method, config.bootstrap_reps,
                            seed=config.bootstrap_seed, config=config)
    return _with_bands(fit, bands)


def _with_bands(fit: MvfmrFit, bands) -> MvfmrFit:
    from dataclasses import replace
    return replace(fit, pointwise_bands=bands)


def fit_mvfmr(samples_1, samples_2, outcome, instruments,
              config: Optional[ModelConfig] = None,
              fpca_models: Optional[list] = None) -> MvfmrFit:
    """Multivariable functional MR fit for one or two sparse exposures.

    Runs FPCA per exposure (unless ``fpca_models`` is given), selects the
    component counts by cross-validation unless ``config.components`` fixes
    them, estimates the pseudo-exposure coefficients jointly (CU-GMM or
    2SRI) and reconstructs each effect curve with pointwise bands.
    """
    config = config or ModelConfig()
    sets = [s for s in (samples_1, samples_2) if s is not None]
    if not sets:
        raise ValueError("at least one exposure is required")
    G = instruments.values if isinstance(instruments, InstrumentMatrix) else np.asarray(instruments, float)
    y = np.asarray(outcome, dtype=float).ravel()
    _check_subjects(sets, y.size, G.shape[0])
    index = tuple(j + 1 for j, s in enumerate((samples_1, samples_2)) if s is not None)
    models = list(fpca_models) if fpca_models is not None else _fit_models(sets, config)
    if config.refit_fpca_per_fold and config.components is None:
        cv = select_components(samples_1, samples_2, y, instruments, None, config.folds, config)
        fixed = ModelConfig(**{**config.__dict__, "components": cv.selected})
        fit = fit_from_scores(models, y, instruments, fixed, index)
        from dataclasses import replace
        return replace(fit, cv_report=cv)
    return fit_from_scores(models, y, instruments, config, index,
                           tables=_shared_tables(models, y, instruments, config))


def _shared_tables(models, y, instruments, config: ModelConfig) -> Optional[FoldTables]:
    # one set of fold tables serves CV and the final fit (continuous only)
    if config.outcome_type != "continuous":
        return None
    labels = fold_labels(y.size, config.folds, config.cv_seed)
    return FoldTables([m.scores for m in models], y, instruments, labels)


def fit_with_univariable(sample_sets, outcome, instruments,
                         config: Optional[ModelConfig] = None,
                         fpca_models: Optional[list] = None):
    """Multivariable fit plus one univariable fit per exposure on the same data.

    The FPCA models (and, for continuous outcomes, the moment tables) are
    shared, so each univariable fit equals :func:`fit_ufmr` on its exposure
    with the same configuration. Returns ``(mv_fit, [uv_fit, ...])``.
    """
    config = config or ModelConfig()
    sets = [s for s in sample_sets if s is not None]
    if not sets:
        raise ValueError("at least one exposure is required")
    if config.refit_fpca_per_fold:
        raise ValueError("refit_fpca_per_fold is not supported here; call fit_mvfmr and fit_ufmr")
    G = _instrument_array(instruments)
    y = np.asarray(outcome, dtype=float).ravel()
    _check_subjects(sets, y.size, G.shape[0])
    models = list(fpca_models) if fpca_models is not None else _fit_models(sets, config)
    tables = _shared_tables(models, y, instruments, config)
    index = tuple(range(1, len(models) + 1))
    mv = fit_from_scores(models, y, instruments, config, index, tables=tables)
    uv = []
    for j, m in enumerate(models):
        uv_config = config
        if config.components is not None:
            uv_config = ModelConfig(**{**config.__dict__, "components": (config.components[j],)})
        uv.append(fit_from_scores([m], y, instruments, uv_config, (index[j],),
                                  tables=tables, table_blocks=(j,)))
    return mv, uv


def fit_ufmr(samples, outcome, instruments, config: Optional[ModelConfig] = None,
             fpca_model: Optional[FpcaModel] = None) -> MvfmrFit:
    """Univariable functional MR: one exposure block, all instruments."""
    config = config or ModelConfig()
    if config.components is not None and len(config.components) != 1:
        raise DimensionMismatchError("U-FMR takes a single component count")
    models = None if fpca_model is None else [fpca_model]
    return fit_mvfmr(samples, None, outcome, instruments, config, models)


def pointwise_bands(fit: MvfmrFit, level: float = 0.95, method: str = "asymptotic",
                    bootstrap_reps: int = 200, seed: int = 0,
                    config: Optional[ModelConfig] = None) -> list:
    """Pointwise ``(lower, upper)`` curves for every exposure.

    ``asymptotic`` uses ``Var(beta_j(t)) = phi_j(t)' Cov_j phi_j(t)`` with
    normal quantiles. ``bootstrap`` resamples subjects with replacement and
    refits the estimator with the FPCA basis and component counts held
    fixed; bands are percentile intervals, widened if needed so that they
    contain the point estimate.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    phis = [m.eigenfunctions for m in fit.fpca_models]
    if method == "asymptotic":
        z = norm.ppf(0.5 + level / 2.0)
        covs = [fit.covariance[np.ix_(idx, idx)] for idx in _block_indices(fit.component_counts)]
        out = []
        for beta, phi, cov in zip(fit.beta_functions, phis, covs):
            var = np.einsum("gk,kl,gl->g", phi, cov, phi)
            half = z * np.sqrt(np.clip(var, 0.0, None))
            out.append((beta - half, beta + half))
        return out
    if method != "bootstrap":
        raise ValueError(f"unknown band method {method!r}")
    if bootstrap_reps < 100:
        raise InsufficientRepsError(f"bootstrap needs at least 100 replicates, got {bootstrap_reps}")
    if fit.design is None:
        raise ValueError("bootstrap bands need the fit's design data")
    config = config or ModelConfig(outcome_type=fit.outcome_type)
    design = fit.design
    G = design.G
    n = design.outcome.size
    rng = np.random.default_rng(seed)
    draws = [rng.integers(0, n, size=n) for _ in range(bootstrap_reps)]

    def one(idx):
        d = PseudoExposureDesign(design.scores[idx], design.outcome[idx], G[idx], design.block_sizes)
        try:
            est = _estimate(d, config)
        except (MvfmrError, ValueError):
            return None
        if not np.all(np.isfinite(est.beta_star)):
            return None
        blocks = _split(est.beta_star, fit.component_counts)
        return [phi @ b for phi, b in zip(phis, blocks)]

    curves = [c for c in _map(one, draws, config.n_jobs) if c is not None]
    if len(curves) < 100:
        raise InsufficientRepsError(
            f"only {len(curves)} of {bootstrap_reps} bootstrap refits succeeded"
        )
    alpha = 1.0 - level
    out = []
    for j, beta in enumerate(fit.beta_functions):
        stack = np.stack([c[j] for c in curves])
        lo, up = np.quantile(stack, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
        out.append((np.minimum(lo, beta), np.maximum(up, beta)))
    return out


def _block_indices(counts):
    edges = np.cumsum([0] + list(counts))
    return [np.arange(edges[j], edges[j + 1]) for j in range(len(counts))]


def _as_sample_sets(X, n_expected=None):
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], SparseFunctionalSample):
        sets = [list(X)]
    else:
        sets = [list(s) for s in X]
    if n_expected is not None and len(sets) != n_expected:
        raise DimensionMismatchError(f"expected {n_expected} exposures, got {len(sets)}")
    for s in sets:
        if not all(isinstance(x, SparseFunctionalSample) for x in s):
            raise TypeError("exposures must be sequences of SparseFunctionalSample")
    return sets


class MVFMR(RegressorMixin, BaseEstimator):
    """Scikit-learn style multivariable functional MR estimator.

    ``fit(X, y, instruments)`` takes ``X`` as a list with one sequence of
    :class:`SparseFunctionalSample` per exposure (one or two). After
    fitting, ``beta_functions_``, ``bands_``, ``components_`` and ``fit_``
    hold the results; ``transform`` returns the stacked FPCA scores and
    ``predict`` the outcome (or probability) predicted from them.
    """

    def __init__(self, outcome_type="continuous", components=None, max_components=5,
                 folds=5, cv_seed=0, band_method="asymptotic", level=0.95,
                 bootstrap_reps=200, grid_size=51, domain_end=None, n_jobs=1):
        self.outcome_type = outcome_type
        self.components = components
        self.max_components = max_components
        self.folds = folds
        self.cv_seed = cv_seed
        self.band_method = band_method
        self.level = level
        self.bootstrap_reps = bootstrap_reps
        self.grid_size = grid_size
        self.domain_end = domain_end
        self.n_jobs = n_jobs

    _n_exposures = None

    def _config(self) -> ModelConfig:
        comps = None if self.components is None else tuple(np.atleast_1d(self.components))
        return ModelConfig(
            outcome_type=self.outcome_type, components=comps,
            max_components=self.max_components, folds=self.folds, cv_seed=self.cv_seed,
            band_method=self.band_method, level=self.level,
            bootstrap_reps=self.bootstrap_reps, grid_size=self.grid_size,
            domain_end=self.domain_end, n_jobs=self.n_jobs,
        )

    def fit(self, X, y, instruments):
        sets = _as_sample_sets(X, self._n_exposures)
        if len(sets) > 2:
            raise DimensionMismatchError("at most two exposures are supported")
        config = self._config()
        second = sets[1] if len(sets) == 2 else None
        self.fit_ = fit_mvfmr(sets[0], second, y, instruments, config)
        self.components_ = self.fit_.component_counts
        self.beta_functions_ = self.fit_.beta_functions
        self.bands_ = self.fit_.pointwise_bands
        self.grid_ = self.fit_.grid
        self.beta_star_ = self.fit_.beta_star
        self.n_features_in_ = len(sets)
        return self

    def transform(self, X):
        check_is_fitted(self, "fit_")
        sets = _as_sample_sets(X)
        kept = [sets[j - 1] for j in self.fit_.exposure_index]
        return np.column_stack([m.predict_scores(s) for m, s in zip(self.fit_.fpca_models, kept)])

    def predict(self, X, instruments=None):
        return self.fit_.predict(self.transform(X), instruments)


class UFMR(MVFMR):
    """Univariable counterpart of :class:`MVFMR`; ``X`` is a single exposure."""

    _n_exposures = 1
