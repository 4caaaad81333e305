"""Functional PCA for sparse, irregularly observed trajectories (PACE).

The mean curve and the covariance surface are estimated by local-linear
smoothing of pooled observations (Epanechnikov kernel). Raw covariances
from the same observation (the diagonal) are excluded from the surface fit
and used only to estimate the measurement-error variance. Subject scores are
predicted by conditional expectation (best linear unbiased prediction) given
each subject's own observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    DomainGapError,
    InsufficientComponentsError,
    OutOfDomainError,
    SingularCovarianceError,
)
from .smoothing import (
    SmoothingConfig,
    bin_index,
    gcv_bandwidth_1d,
    local_linear_1d,
    local_linear_2d,
)

__all__ = [
    "SparseFunctionalSample",
    "FpcaModel",
    "fit_fpca",
    "evaluate_mean",
    "evaluate_eigenfunctions",
    "trapezoid_weights",
    "SparseFPCA",
]

_RIDGE = 1e-8


@dataclass(frozen=True)
class SparseFunctionalSample:
    """Irregular ``(time, value)`` observations of one subject's exposure.

    Observations are sorted by time on construction. Fewer than two
    observations, non-finite entries and repeated times are rejected.
    """

    subject_id: int
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if t.shape != v.shape:
            raise ValueError(f"subject {self.subject_id}: times and values differ in length")
        if t.size < 2:
            raise ValueError(f"subject {self.subject_id}: at least 2 observations required")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValueError(f"subject {self.subject_id}: non-finite observation")
        order = np.argsort(t, kind="stable")
        t, v = t[order], v[order]
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"subject {self.subject_id}: repeated observation time")
        t.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.times.size


@dataclass(frozen=True)
class _Pooled:
    subject_ids: np.ndarray
    counts: np.ndarray
    offsets: np.ndarray
    times: np.ndarray
    values: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[SparseFunctionalSample]) -> "_Pooled":
        if len(samples) == 0:
            raise ValueError("no samples given")
        ids = np.array([s.subject_id for s in samples])
        counts = np.array([len(s) for s in samples], dtype=np.intp)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        times = np.concatenate([s.times for s in samples])
        values = np.concatenate([s.values for s in samples])
        return cls(ids, counts, offsets, times, values)

    def groups(self):
        """Yield ``(rows, flat_index)`` for subjects sharing an observation count."""
        for m in np.unique(self.counts):
            rows = np.flatnonzero(self.counts == m)
            flat = self.offsets[rows][:, None] + np.arange(m)[None, :]
            yield rows, flat


def trapezoid_weights(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    w = np.zeros_like(grid)
    dx = np.diff(grid)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


@dataclass(frozen=True)
class FpcaModel:
    """Fitted PACE decomposition on an equally spaced grid over ``[0, T]``.

    ``eigenfunctions`` is ``(G, K)`` and orthonormal under trapezoidal
    quadrature on ``grid``; ``scores`` is ``(N, K)`` with centered columns.
    ``score_offset`` is the column mean removed from the raw conditional
    expectations and is subtracted again when scoring new subjects.
    """

    grid: np.ndarray
    mean: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    noise_variance: float
    scores: np.ndarray
    fraction_of_variance: np.ndarray
    subject_ids: np.ndarray
    domain_end: float
    covariance: np.ndarray = field(repr=False)
    mean_bandwidth: float = 0.0
    cov_bandwidth: float = 0.0
    score_offset: Optional[np.ndarray] = None
    degenerate: bool = False

    @property
    def n_components(self) -> int:
        return int(self.eigenvalues.size)

    def _check_times(self, times):
        t = np.atleast_1d(np.asarray(times, dtype=float))
        tol = 1e-12 * max(1.0, self.domain_end)
        if t.size and (t.min() < -tol or t.max() > self.domain_end + tol):
            raise OutOfDomainError(f"times must lie in [0, {self.domain_end}]")
        return np.clip(t, 0.0, self.domain_end)

    def evaluate_mean(self, times) -> np.ndarray:
        t = self._check_times(times)
        return np.interp(t, self.grid, self.mean)

    def evaluate_eigenfunctions(self, times) -> np.ndarray:
        t = self._check_times(times)
        out = np.empty((t.size, self.n_components))
        for k in range(self.n_components):
            out[:, k] = np.interp(t, self.grid, self.eigenfunctions[:, k])
        return out

    def truncate(self, n_components: int) -> "FpcaModel":
        """Model restricted to the leading ``n_components`` components."""
        if n_components > self.n_components:
            raise InsufficientComponentsError(
                f"requested {n_components} components, model has {self.n_components}"
            )
        k = n_components
        offset = None if self.score_offset is None else self.score_offset[:k]
        return replace(
            self,
            eigenfunctions=self.eigenfunctions[:, :k],
            eigenvalues=self.eigenvalues[:k],
            scores=self.scores[:, :k],
            fraction_of_variance=self.fraction_of_variance[:k],
            score_offset=offset,
        )

    def predict_scores(self, samples: Sequence[SparseFunctionalSample]) -> np.ndarray:
        """Conditional-expectation scores for (possibly new) subjects."""
        pooled = _Pooled.from_samples(samples)
        self._check_times(pooled.times)
        raw = _blup_scores(self, pooled)
        if self.score_offset is not None:
            raw = raw - self.score_offset
        return raw

    def to_dict(self) -> dict:
        return {
            "domain_end": self.domain_end,
            "grid": self.grid.tolist(),
            "mean": self.mean.tolist(),
            "eigenfunctions": self.eigenfunctions.T.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "fraction_of_variance": self.fraction_of_variance.tolist(),
            "noise_variance": self.noise_variance,
            "mean_bandwidth": self.mean_bandwidth,
            "cov_bandwidth": self.cov_bandwidth,
            "n_subjects": int(self.subject_ids.size),
            "degenerate": self.degenerate,
        }


def evaluate_mean(model: FpcaModel, times) -> np.ndarray:
    """Piecewise-linear interpolation of the fitted mean curve."""
    return model.evaluate_mean(times)


def evaluate_eigenfunctions(model: FpcaModel, times) -> np.ndarray:
    """Piecewise-linear interpolation of the eigenfunctions, one column each."""
    return model.evaluate_eigenfunctions(times)


def _check_coverage(times, domain_end):
    pts = np.unique(np.concatenate([[0.0], times, [domain_end]]))
    widest = np.max(np.diff(pts))
    if widest > domain_end / 5:
        raise DomainGapError(
            f"pooled observation times leave a gap of {widest:.4g} (> T/5 = {domain_end / 5:.4g})"
        )


def _raw_covariance_tables(pooled, resid, node_idx, n_bins):
    size = n_bins * n_bins
    counts = np.zeros(size)
    sums = np.zeros(size)
    for _, flat in pooled.groups():
        m = flat.shape[1]
        off = ~np.eye(m, dtype=bool)
        # chunk so that the pair arrays stay a few million entries
        step = max(1, 4_000_000 // (m * m))
        for start in range(0, flat.shape[0], step):
            f = flat[start:start + step]
            r = resid[f]
            b = node_idx[f]
            prod = (r[:, :, None] * r[:, None, :])[:, off]
            cell = (b[:, :, None] * n_bins + b[:, None, :])[:, off]
            counts += np.bincount(cell.ravel(), minlength=size)
            sums += np.bincount(cell.ravel(), weights=prod.ravel(), minlength=size)
    return counts.reshape(n_bins, n_bins), sums.reshape(n_bins, n_bins)


def _positive_tol(values):
    scale = float(np.mean(values**2)) if values.size else 0.0
    return 1e-10 * scale


def _blup_scores(model: FpcaModel, pooled: _Pooled) -> np.ndarray:
    k = model.n_components
    n = pooled.subject_ids.size
    scores = np.zeros((n, k))
    if k == 0:
        return scores
    lam = model.eigenvalues
    phi_all = model.evaluate_eigenfunctions(pooled.times)
    resid_all = pooled.values - model.evaluate_mean(pooled.times)
    sigma2 = model.noise_variance
    for rows, flat in pooled.groups():
        m = flat.shape[1]
        phi = phi_all[flat]                       # (n_m, m, K)
        resid = resid_all[flat]                   # (n_m, m)
        cov = np.einsum("imk,k,ilk->iml", phi, lam, phi)
        cov[:, np.arange(m), np.arange(m)] += sigma2
        try:
            chol = np.linalg.cholesky(cov)
            z = _chol_solve(chol, resid)
        except np.linalg.LinAlgError:
            z = np.stack([_solve_ridged(c, r, pooled.subject_ids[i])
                          for c, r, i in zip(cov, resid, rows)])
        scores[rows] = lam * np.einsum("imk,im->ik", phi, z)
    return scores


def _chol_solve(chol, rhs):
    y = np.linalg.solve(chol, rhs[..., None])
    return np.linalg.solve(np.swapaxes(chol, -1, -2), y)[..., 0]


def _solve_ridged(cov, rhs, subject_id):
    try:
        return _chol_solve(np.linalg.cholesky(cov), rhs)
    except np.linalg.LinAlgError:
        pass
    ridge = _RIDGE * max(1.0, float(np.mean(np.diag(cov))))
    try:
        chol = np.linalg.cholesky(cov + ridge * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            f"subject {subject_id}: covariance singular after ridge {ridge:.3g}"
        ) from exc
    return _chol_solve(chol, rhs)


def fit_fpca(
    samples: Sequence[SparseFunctionalSample],
    grid_size: int = 51,
    max_components: int = 5,
    smoothing: Optional[SmoothingConfig] = None,
    domain_end: Optional[float] = None,
    min_subjects: int = 50,
) -> FpcaModel:
    """Fit a PACE decomposition to sparse functional samples.

    Parameters
    ----------
    samples : sequence of SparseFunctionalSample
        One entry per subject; every time must lie in ``[0, domain_end]``.
    grid_size : int
        Number of equally spaced grid points (at least 20).
    max_components : int
        Upper bound on retained components; fewer are kept when the smoothed
        covariance has fewer positive eigenvalues.
    smoothing : SmoothingConfig, optional
        Bandwidths and binning; defaults to ``SmoothingConfig()``.
    domain_end : float, optional
        Right end ``T`` of the domain. Defaults to the largest observed time.
    min_subjects : int
        Minimum number of subjects required.

    Returns
    -------
    FpcaModel
    """
    smoothing = smoothing or SmoothingConfig()
    if grid_size < 20:
        raise ValueError("grid_size must be at least 20")
    if max_components < 0:
        raise ValueError("max_components must be nonnegative")
    if len(samples) < min_subjects:
        raise ValueError(f"at least {min_subjects} subjects required, got {len(samples)}")
    pooled = _Pooled.from_samples(samples)
    if domain_end is None:
        domain_end = float(pooled.times.max())
    domain_end = float(domain_end)
    if domain_end <= 0:
        raise ValueError("domain_end must be positive")
    if pooled.times.min() < 0 or pooled.times.max() > domain_end * (1 + 1e-12):
        raise OutOfDomainError(f"observation times must lie in [0, {domain_end}]")
    _check_coverage(pooled.times, domain_end)

    n_bins = smoothing.n_bins
    nodes = np.linspace(0.0, domain_end, n_bins)
    grid = np.linspace(0.0, domain_end, grid_size)
    node_idx = bin_index(pooled.times, domain_end, n_bins)

    counts = np.bincount(node_idx, minlength=n_bins).astype(float)
    sums = np.bincount(node_idx, weights=pooled.values, minlength=n_bins)
    h_mean, h_cov = smoothing.bandwidths(domain_end)
    if smoothing.method == "gcv":
        sumsq = np.bincount(node_idx, weights=pooled.values**2, minlength=n_bins)
        cands = [c * domain_end for c in smoothing.gcv_candidates]
        chosen = gcv_bandwidth_1d(nodes, counts, sums, sumsq, cands)
        h_cov = h_cov * chosen / h_mean
        h_mean = chosen

    mean_nodes = local_linear_1d(nodes, counts, sums, nodes, h_mean)
    mean_grid = local_linear_1d(nodes, counts, sums, grid, h_mean)
    resid = pooled.values - np.interp(pooled.times, nodes, mean_nodes)

    cov_counts, cov_sums = _raw_covariance_tables(pooled, resid, node_idx, n_bins)
    cov = local_linear_2d(nodes, cov_counts, cov_sums, grid, h_cov)
    cov = 0.5 * (cov + cov.T)

    diag_sums = np.bincount(node_idx, weights=resid**2, minlength=n_bins)
    var_grid = local_linear_1d(nodes, counts, diag_sums, grid, h_cov)
    # average over the middle half of the domain, away from boundary bias
    inner = (grid >= 0.25 * domain_end) & (grid <= 0.75 * domain_end)
    gap = var_grid[inner] - np.diag(cov)[inner]
    w_inner = trapezoid_weights(grid[inner])
    sigma2 = max(0.0, float(np.sum(w_inner * gap) / np.sum(w_inner)))

    w = trapezoid_weights(grid)
    sw = np.sqrt(w)
    evals, evecs = np.linalg.eigh(sw[:, None] * cov * sw[None, :])
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    positive = evals > _positive_tol(pooled.values)
    total_positive = float(evals[positive].sum())
    k = int(min(max_components, positive.sum()))
    lam = evals[:k]
    phi = evecs[:, :k] / sw[:, None]
    for j in range(k):
        if phi[np.argmax(np.abs(phi[:, j])), j] < 0:
            phi[:, j] = -phi[:, j]
    fve = lam / total_positive if total_positive > 0 else np.zeros(0)

    model = FpcaModel(
        grid=grid,
        mean=mean_grid,
        eigenfunctions=phi,
        eigenvalues=lam,
        noise_variance=sigma2,
        scores=np.zeros((pooled.subject_ids.size, k)),
        fraction_of_variance=fve,
        subject_ids=pooled.subject_ids,
        domain_end=domain_end,
        covariance=cov,
        mean_bandwidth=h_mean,
        cov_bandwidth=h_cov,
        degenerate=(k == 0),
    )
    raw = _blup_scores(model, pooled)
    offset = raw.mean(axis=0)
    return replace(model, scores=raw - offset, score_offset=offset)


class SparseFPCA(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_fpca`.

    ``fit`` takes a sequence of :class:`SparseFunctionalSample`; ``transform``
    returns conditional-expectation scores, shape ``(n_subjects, K)``.
    """

    def __init__(self, n_components=5, grid_size=51, domain_end=None,
                 smoothing=None, min_subjects=50):
        self.n_components = n_components
        self.grid_size = grid_size
        self.domain_end = domain_end
        self.smoothing = smoothing
        self.min_subjects = min_subjects

    def fit(self, X, y=None):
        self.model_ = fit_fpca(
            X,
            grid_size=self.grid_size,
            max_components=self.n_components,
            smoothing=self.smoothing,
            domain_end=self.domain_end,
            min_subjects=self.min_subjects,
        )
        self.mean_ = self.model_.mean
        self.components_ = self.model_.eigenfunctions.T
        self.explained_variance_ = self.model_.eigenvalues
        self.explained_variance_ratio_ = self.model_.fraction_of_variance
        self.noise_variance_ = self.model_.noise_variance
        self.grid_ = self.model_.grid
        return self

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X).model_.scores

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_scores(X)

    def inverse_transform(self, scores):
        """Reconstructed trajectories on ``grid_`` from scores."""
        check_is_fitted(self, "model_")
        scores = np.atleast_2d(np.asarray(scores, dtype=float))
        offset = self.model_.score_offset
        if offset is not None:
            scores = scores + offset
        return self.mean_[None, :] + scores @ self.components_
