"""Instrumental-variable estimators for FPCA pseudo-exposures.

``cu_gmm`` is the continuously updated GMM estimator for continuous outcomes,
``two_sri`` the two-stage residual inclusion logistic estimator for binary
outcomes, and ``conditional_f`` the Sanderson-Windmeijer instrument-strength
diagnostic for one score column conditional on the others.

The CU-GMM objective is evaluated from additive moment tables
(:class:`MomentTables`): sums over subjects of products of the outcome and
score columns times instrument outer products. Tables for disjoint subject
sets add up, so cross-validation folds are obtained by subtraction instead of
being rebuilt from the raw rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from scipy.special import expit

from .exceptions import (
    DimensionMismatchError,
    IllConditionedWeightError,
    NonConvergenceError,
    RankDeficiencyError,
    SeparationError,
    SingleClassError,
)
from .validation import as_float_vector, check_instrument_values

__all__ = [
    "InstrumentMatrix",
    "PseudoExposureDesign",
    "GmmOptions",
    "GmmFit",
    "LogisticOptions",
    "TsriFit",
    "MomentTables",
    "cu_gmm",
    "cu_gmm_from_tables",
    "two_sri",
    "conditional_f",
    "closed_form_iv",
]

LABELS = ("exposure1", "exposure2", "shared")


@dataclass(frozen=True)
class InstrumentMatrix:
    """Genotype matrix ``(N, P)`` with an exposure-assignment tag per column."""

    values: np.ndarray
    column_labels: tuple = ()
    centered: bool = False
    column_names: tuple = ()

    def __post_init__(self):
        values = check_instrument_values(self.values)
        labels = tuple(self.column_labels) or ("shared",) * values.shape[1]
        if len(labels) != values.shape[1]:
            raise DimensionMismatchError(
                f"{len(labels)} column labels for {values.shape[1]} instrument columns"
            )
        unknown = set(labels) - set(LABELS)
        if unknown:
            raise ValueError(f"unknown column labels {sorted(unknown)}; use {LABELS}")
        names = tuple(self.column_names) or tuple(f"g{j}" for j in range(values.shape[1]))
        if self.centered and np.max(np.abs(values.mean(axis=0))) > 1e-10:
            raise ValueError("instrument matrix flagged centered but column means are nonzero")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_labels", labels)
        object.__setattr__(self, "column_names", names)

    @property
    def shape(self):
        return self.values.shape

    def counts(self) -> dict:
        return {lab: self.column_labels.count(lab) for lab in LABELS}

    def centered_copy(self) -> "InstrumentMatrix":
        vals = self.values - self.values.mean(axis=0)
        return InstrumentMatrix(vals, self.column_labels, True, self.column_names)

    def columns_for(self, exposure: int) -> np.ndarray:
        """Boolean mask of columns that act on exposure 1 or 2."""
        own = f"exposure{exposure}"
        return np.array([lab in (own, "shared") for lab in self.column_labels])

    def take(self, rows) -> "InstrumentMatrix":
        return InstrumentMatrix(self.values[rows], self.column_labels, False, self.column_names)


def _instrument_values(instruments) -> np.ndarray:
    if isinstance(instruments, InstrumentMatrix):
        return instruments.values
    return check_instrument_values(instruments)


@dataclass(frozen=True)
class PseudoExposureDesign:
    """Stacked FPCA scores, outcome and instruments for one estimation.

    Centering is done by the estimators, not here.
    """

    scores: np.ndarray
    outcome: np.ndarray
    instruments: object
    block_sizes: tuple = ()

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        if scores.ndim == 1:
            scores = scores[:, None]
        outcome = as_float_vector(self.outcome, "outcome")
        G = _instrument_values(self.instruments)
        n, k = scores.shape
        if outcome.shape[0] != n or G.shape[0] != n:
            raise DimensionMismatchError(
                f"rows differ: scores {n}, outcome {outcome.shape[0]}, instruments {G.shape[0]}"
            )
        blocks = tuple(int(b) for b in self.block_sizes) or (k,)
        if sum(blocks) != k:
            raise DimensionMismatchError(f"block sizes {blocks} do not sum to {k} score columns")
        p = G.shape[1]
        if not n > p >= k:
            raise DimensionMismatchError(
                f"need N > P >= K for identification, got N={n}, P={p}, K={k}"
            )
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "block_sizes", blocks)

    @property
    def G(self) -> np.ndarray:
        return _instrument_values(self.instruments)

    @property
    def n_scores(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class GmmOptions:
    max_iter: int = 200
    gtol: float = 1e-8
    ridge: float = 1e-10
    max_condition: float = 1e12
    raise_on_nonconvergence: bool = False
    # stop when standardized coefficients exceed this multiple of the start
    divergence_bound: float = 1e3


@dataclass(frozen=True)
class GmmFit:
    """Result of a CU-GMM fit; ``covariance`` is the sandwich at the optimum."""

    beta_star: np.ndarray
    covariance: np.ndarray
    objective_value: float
    j_statistic: float
    j_df: int
    converged: bool
    iterations: int
    gradient_norm: float = 0.0
    initial_objective: float = np.nan
    initial_beta: Optional[np.ndarray] = None
    n_obs: int = 0
    x_mean: Optional[np.ndarray] = field(default=None, repr=False)
    y_mean: float = 0.0
    diverged: bool = False

    def predict(self, scores) -> np.ndarray:
        scores = np.atleast_2d(np.asarray(scores, dtype=float))
        return self.y_mean + (scores - self.x_mean) @ self.beta_star

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


class MomentTables:
    """Additive sufficient statistics for CU-GMM over a set of subjects.

    With ``Z = [1, y, x_1, ..., x_K]`` (uncentered) and one entry per column
    pair ``a <= b`` (listed in ``pairs``), the tables hold

    * ``M[ab] = sum_i Z_ia Z_ib G_i G_i'``, stored as its packed upper
      triangle, shape ``(n_pairs, P (P + 1) / 2)``
    * ``V[ab] = sum_i Z_ia Z_ib G_i``, shape ``(n_pairs, P)``
    * ``S[a, b] = sum_i Z_ia Z_ib``, shape ``(m, m)``

    which is enough to evaluate the centered moment vector, the weighting
    matrix and the gradient for any coefficient vector and any subset of
    score columns, without touching the subject-level rows again.
    """

    def __init__(self, M, V, S, pairs, centered: bool = False, n: Optional[float] = None,
                 first=None):
        self.M = M
        self.V = V
        self.S = S
        self.pairs = pairs
        self.centered = centered
        if centered and n is None:
            raise ValueError("centered tables need the subject count")
        self._n = None if n is None else float(n)
        # centered tables carry gbar, the column means, G'Zc / n and the
        # packed instrument covariance alongside
        self.first = first
        p = V.shape[1]
        self.p = p
        iu = np.triu_indices(p)
        self._iu = iu
        # position of every (i, j) entry in the packed triangle
        pos = np.empty((p, p), dtype=np.intp)
        pos[iu] = np.arange(iu[0].size)
        pos[(iu[1], iu[0])] = pos[iu]
        self._unpack = pos.ravel()
        self._offdiag = np.where(iu[0] == iu[1], 1.0, 2.0)
        a, b = np.array(pairs).T
        self._pa, self._pb = a, b
        self._pair_mult = np.where(a == b, 1.0, 2.0)

    @staticmethod
    def _pairs(m):
        return [(a, b) for a in range(m) for b in range(a, m)]

    @classmethod
    def build(cls, G, y, X) -> "MomentTables":
        G = np.asarray(G, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Z = np.column_stack([np.ones(G.shape[0]), y, X])
        m, p = Z.shape[1], G.shape[1]
        pairs = cls._pairs(m)
        iu = np.triu_indices(p)
        M = np.empty((len(pairs), iu[0].size))
        V = np.empty((len(pairs), p))
        for i, (a, b) in enumerate(pairs):
            Gw = G * (Z[:, a] * Z[:, b])[:, None]
            M[i] = (Gw.T @ G)[iu]
            V[i] = Gw.sum(axis=0)
        return cls(M, V, Z.T @ Z, pairs)

    def __add__(self, other):
        self._check_additive(other)
        return MomentTables(self.M + other.M, self.V + other.V, self.S + other.S, self.pairs)

    def __sub__(self, other):
        self._check_additive(other)
        return MomentTables(self.M - other.M, self.V - other.V, self.S - other.S, self.pairs)

    def _check_additive(self, other):
        if self.centered or other.centered:
            raise ValueError("centered tables are not additive; combine before centering")
        if self.pairs != other.pairs or self.V.shape != other.V.shape:
            raise DimensionMismatchError("moment tables have different layouts")

    def center(self) -> "MomentTables":
        """Tables for the centered columns ``[y - ybar, x - xbar]``.

        ``M`` holds ``sum_i Zc_ia Zc_ib (G_i - gbar)(G_i - gbar)'`` and ``V``
        holds ``sum_i Zc_ia Zc_ib G_i``, with every mean taken over this
        subject set. Dropping the constant column leaves fewer pairs to
        combine per objective evaluation. The result is not additive.
        """
        if self.centered:
            return self
        n = self.n
        gbar = self.V[0] / n
        i, j = self._iu
        S_pairs = self.S[self._pa, self._pb]
        Mg = (self.M - self.V[:, j] * gbar[i] - self.V[:, i] * gbar[j]
              + S_pairs[:, None] * (gbar[i] * gbar[j])[None, :])
        zbar = self.S[0] / n
        lookup = {pair: r for r, pair in enumerate(self.pairs)}
        pairs = self._pairs(self.S.shape[0] - 1)
        ab = np.array([(a + 1, b + 1) for a, b in pairs])
        r_ab = [lookup[(a, b)] for a, b in ab]
        r_0a = [lookup[(0, a)] for a in ab[:, 0]]
        r_0b = [lookup[(0, b)] for b in ab[:, 1]]
        za, zb = zbar[ab[:, 0]][:, None], zbar[ab[:, 1]][:, None]

        def dc(T):
            return T[r_ab] - zb * T[r_0a] - za * T[r_0b] + za * zb * T[0]

        S = self.S[1:, 1:] - n * np.outer(zbar[1:], zbar[1:])
        cross = self.V[[lookup[(0, c)] for c in range(1, self.S.shape[0])]].T
        cross = (cross - np.outer(gbar, self.S[0, 1:])) / n
        return MomentTables(dc(Mg), dc(self.V), S, pairs, centered=True, n=n,
                            first=(gbar, zbar[1:], cross, Mg[0] / n))

    @property
    def n(self) -> float:
        return self._n if self.centered else float(self.S[0, 0])

    @property
    def n_scores(self) -> int:
        return self.S.shape[0] - (1 if self.centered else 2)

    def select(self, columns: Sequence[int]) -> "MomentTables":
        """Tables restricted to score columns ``columns`` (0-based in X)."""
        lead = [0] if self.centered else [0, 1]
        idx = lead + [len(lead) + int(c) for c in columns]
        lookup = {pair: i for i, pair in enumerate(self.pairs)}
        rows = [lookup[tuple(sorted((idx[a], idx[b])))] for a, b in self._pairs(len(idx))]
        first = None
        if self.centered:
            gbar, means, cross, gram = self.first
            first = (gbar, means[idx], cross[:, idx], gram)
        return MomentTables(self.M[rows], self.V[rows], self.S[np.ix_(idx, idx)],
                            self._pairs(len(idx)), self.centered, n=self.n, first=first)

    def instrument_matrix(self, pair_weights) -> np.ndarray:
        """``sum_pairs w_ab M[ab]`` as a full ``(P, P)`` matrix."""
        packed = pair_weights @ self.M
        return packed[self._unpack].reshape(self.p, self.p)

    def pair_weights(self, c) -> np.ndarray:
        """Weights ``w`` so that ``sum_ab c_a c_b T_ab = sum_pairs w T``."""
        return self._pair_mult * c[self._pa] * c[self._pb]

    def _full(self, flat):
        m = self.S.shape[0]
        out = np.empty((m, m))
        out[self._pa, self._pb] = flat
        out[self._pb, self._pa] = flat
        return out

    def quadratic(self, vec) -> np.ndarray:
        """``q[a, b] = sum_i Z_ia Z_ib (G_i' vec)^2`` as a full ``(m, m)`` array."""
        i, j = self._iu
        return self._full(self.M @ (self._offdiag * vec[i] * vec[j]))

    def linear(self, vec) -> np.ndarray:
        """``l[a, b] = sum_i Z_ia Z_ib (G_i' vec)`` as a full ``(m, m)`` array."""
        return self._full(self.V @ vec)


class _CuGmmProblem:
    """CU-GMM objective and analytic gradient on centered, rescaled data.

    Coefficients are optimized in units where the outcome and every score
    column have unit standard deviation; the objective is invariant to this
    rescaling, and it keeps the gradient tolerance meaningful. Everything is
    computed from :class:`MomentTables`, so the cost per evaluation does not
    depend on the number of subjects.
    """

    def __init__(self, tables: MomentTables, options: GmmOptions):
        self.options = options
        tables = tables.center()
        n = tables.n
        self.n = n
        gbar, means, cross, gram = tables.first
        scale = np.sqrt(np.clip(np.diag(tables.S) / n, 0.0, None))
        if np.any(scale <= 1e-12 * max(1.0, np.max(np.abs(means)))):
            raise RankDeficiencyError("outcome or a score column has zero variance")
        corr = tables.S[1:, 1:] / n / np.outer(scale[1:], scale[1:])
        eig = np.linalg.eigvalsh(corr)
        if eig[0] <= 1e-10 * eig[-1]:
            raise RankDeficiencyError("score columns are linearly dependent")
        self.means = means                    # [ybar, xbar...]
        self.scale = scale                    # [sd_y, sd_x...]
        self.k = means.size - 1
        self.gbar = gbar
        self.cross = cross / scale[None, :]   # centered G'Z / n, standardized
        self.Gy = self.cross[:, 0]
        self.Gx = self.cross[:, 1:]
        self.Mc = tables.M
        self.tables = tables
        self.GG = gram
        self.evaluations = 0

    def _coef(self, beta):
        # standardized residual r = y~ - x~ beta as a combination of centered columns
        return np.concatenate([[1.0 / self.scale[0]], -beta / self.scale[1:]])

    def _unpack(self, packed):
        p = self.gbar.size
        return packed[self.tables._unpack].reshape(p, p)

    def weight_matrix(self, beta) -> np.ndarray:
        w = self.tables.pair_weights(self._coef(beta))
        return self._unpack(w @ self.Mc) / self.n

    def moments(self, beta) -> np.ndarray:
        return self.Gy - self.Gx @ beta

    def factor(self, W):
        try:
            return sla.cho_factor(W, lower=False, check_finite=False)
        except np.linalg.LinAlgError:
            p = W.shape[0]
            ridge = self.options.ridge * np.trace(W) / p
            try:
                return sla.cho_factor(W + ridge * np.eye(p), lower=False, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise IllConditionedWeightError("weighting matrix is singular") from exc

    def check_condition(self, W):
        ev = np.linalg.eigvalsh(W)
        if ev[0] > 0 and ev[-1] / ev[0] <= self.options.max_condition:
            return W
        p = W.shape[0]
        W = W + self.options.ridge * np.trace(W) / p * np.eye(p)
        ev = np.linalg.eigvalsh(W)
        if ev[0] <= 0 or ev[-1] / ev[0] > self.options.max_condition:
            cond = np.inf if ev[0] <= 0 else ev[-1] / ev[0]
            raise IllConditionedWeightError(f"weighting matrix condition number {cond:.3g}")
        return W

    def value(self, beta) -> float:
        W = self.weight_matrix(beta)
        g = self.moments(beta)
        a = sla.cho_solve(self.factor(W), g, check_finite=False)
        return float(g @ a)

    def value_and_grad(self, beta):
        self.evaluations += 1
        d = self._coef(beta)
        W = self.weight_matrix(beta)
        g = self.moments(beta)
        a = sla.cho_solve(self.factor(W), g, check_finite=False)
        q = float(g @ a)
        # sum_i Zc_ia Zc_ib u_i^2 with u_i = (G_i - gbar)'a
        t = self.tables
        i, j = t._iu
        quad = t._full(self.Mc @ (t._offdiag * a[i] * a[j]))
        r_x_u2 = (quad @ d)[1:] / self.scale[1:]   # sum_i x~_ik r_i u_i^2
        x_u = self.n * (self.Gx.T @ a)
        grad = -(2.0 / self.n) * (x_u - r_x_u2)
        return q, grad

    def two_sls(self) -> np.ndarray:
        cf = self.factor(self._unpack(self.GG))
        A = sla.cho_solve(cf, self.Gx, check_finite=False)
        lhs = self.Gx.T @ A
        rhs = A.T @ self.Gy
        try:
            return np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError("first stage is rank deficient") from exc

    def information(self, beta=None, W=None) -> np.ndarray:
        if W is None:
            W = self.check_condition(self.weight_matrix(beta))
        info = self.Gx.T @ sla.cho_solve(self.factor(W), self.Gx, check_finite=False)
        return 0.5 * (info + info.T)

    def gn_inverse_hessian(self, beta=None, W=None):
        # Gauss-Newton approximation 2 D'W^-1 D of the CU objective's Hessian
        ev, vec = np.linalg.eigh(2.0 * self.information(beta, W))
        ev = np.maximum(ev, 1e-10 * max(ev[-1], 1e-300))
        inv = (vec / ev) @ vec.T
        # scipy demands exact symmetry
        return np.triu(inv) + np.triu(inv, 1).T

    def newton_polish(self, beta, q, grad, max_steps: int = 4):
        """A few Newton steps on the gradient, Hessian by differencing it.

        Used when BFGS stops on line-search precision just short of the
        gradient tolerance. A step is kept only if it lowers the gradient
        norm without raising the objective.
        """
        k = beta.size
        for _ in range(max_steps):
            gnorm = np.max(np.abs(grad))
            if gnorm <= self.options.gtol:
                break
            h = 1e-6 * np.maximum(1.0, np.abs(beta))
            H = np.empty((k, k))
            for c in range(k):
                e = np.zeros(k)
                e[c] = h[c]
                H[:, c] = (self.value_and_grad(beta + e)[1] - self.value_and_grad(beta - e)[1]) / (2 * h[c])
            H = 0.5 * (H + H.T)
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                break
            cand = beta - step
            q_new, g_new = self.value_and_grad(cand)
            if not (np.isfinite(q_new) and q_new <= q + 1e-12 * abs(q)
                    and np.max(np.abs(g_new)) < gnorm):
                break
            beta, q, grad = cand, q_new, g_new
        return beta, q, grad


def _center_check_rank(X, what):
    k = X.shape[1]
    if k and np.linalg.matrix_rank(X - X.mean(axis=0)) < k:
        raise RankDeficiencyError(f"{what} columns are linearly dependent")


def _solve_cu_gmm(tables: MomentTables, options: GmmOptions) -> GmmFit:
    prob = _CuGmmProblem(tables, options)
    beta0 = prob.two_sls()
    W0 = prob.check_condition(prob.weight_matrix(beta0))
    q0 = prob.value(beta0)
    bound = options.divergence_bound * max(1.0, float(np.max(np.abs(beta0))))

    def guard(intermediate_result):
        if np.max(np.abs(intermediate_result.x)) > bound:
            raise StopIteration

    try:
        hess0 = prob.gn_inverse_hessian(W=W0)
    except (IllConditionedWeightError, np.linalg.LinAlgError):
        hess0 = None
    res = minimize(
        prob.value_and_grad, beta0, jac=True, method="BFGS", callback=guard,
        options={"gtol": options.gtol, "maxiter": options.max_iter, "hess_inv0": hess0},
    )
    beta = res.x
    diverged = bool(np.max(np.abs(beta)) > bound)
    q, grad = prob.value_and_grad(beta)
    if not np.isfinite(q) or q > q0:
        beta = beta0
        q, grad = prob.value_and_grad(beta)
    if not diverged and np.max(np.abs(grad)) > options.gtol:
        beta, q, grad = prob.newton_polish(beta, q, grad)
    gnorm = float(np.max(np.abs(grad)))
    converged = not diverged and gnorm <= options.gtol
    if not converged and options.raise_on_nonconvergence and \
            (diverged or res.nit >= options.max_iter):
        raise NonConvergenceError(
            f"CU-GMM stopped after {res.nit} iterations with gradient norm {gnorm:.3g}"
            + (" (coefficients diverging)" if diverged else "")
        )
    cov_std = np.linalg.inv(prob.information(beta)) / prob.n
    unscale = prob.scale[0] / prob.scale[1:]
    covariance = cov_std * np.outer(unscale, unscale)
    p = prob.gbar.size
    return GmmFit(
        beta_star=beta * unscale,
        covariance=0.5 * (covariance + covariance.T),
        objective_value=max(q, 0.0),
        j_statistic=prob.n * max(q, 0.0),
        j_df=p - prob.k,
        converged=converged,
        iterations=int(res.nit),
        gradient_norm=gnorm,
        initial_objective=q0,
        initial_beta=beta0 * unscale,
        n_obs=int(prob.n),
        x_mean=prob.means[1:].copy(),
        y_mean=float(prob.means[0]),
        diverged=diverged,
    )


def cu_gmm(design: PseudoExposureDesign, options: Optional[GmmOptions] = None) -> GmmFit:
    """Continuously updated GMM estimate of the pseudo-exposure coefficients.

    Minimizes ``g(b)' W(b)^{-1} g(b)`` with ``g(b) = G'(Y - Xb)/N`` and
    ``W(b) = G' diag(Y - Xb)^2 G / N`` on mean-centered data, starting from
    two-stage least squares. The reported covariance is
    ``(D' W^{-1} D)^{-1} / N`` with ``D = -G'X/N`` evaluated at the optimum,
    and ``j_statistic = N * objective_value``.
    """
    options = options or GmmOptions()
    X = design.scores
    _center_check_rank(X, "score")
    tables = MomentTables.build(design.G, design.outcome, X)
    return _solve_cu_gmm(tables, options)


def cu_gmm_from_tables(tables: MomentTables, options: Optional[GmmOptions] = None) -> GmmFit:
    """CU-GMM from precomputed (possibly fold-subtracted) moment tables."""
    return _solve_cu_gmm(tables, options or GmmOptions())


def closed_form_iv(G, X, y) -> np.ndarray:
    """Just-identified IV estimate ``(G'X)^{-1} G'y`` on centered data."""
    G = np.asarray(G, float)
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, float)
    Gc, Xc, yc = G - G.mean(0), X - X.mean(0), y - y.mean()
    return np.linalg.solve(Gc.T @ Xc, Gc.T @ yc)


@dataclass(frozen=True)
class LogisticOptions:
    max_iter: int = 100
    tol: float = 1e-10
    max_coef_norm: float = 1e6
    max_halvings: int = 30


@dataclass(frozen=True)
class TsriFit:
    """Two-stage residual inclusion fit.

    ``robust_covariance`` is ordered ``(intercept, beta_star, alpha)``.
    """

    first_stage_coefficients: np.ndarray
    residuals: np.ndarray
    beta_star: np.ndarray
    alpha: np.ndarray
    intercept: float
    robust_covariance: np.ndarray
    converged: bool = True
    iterations: int = 0
    x_mean: Optional[np.ndarray] = field(default=None, repr=False)
    g_mean: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def covariance(self) -> np.ndarray:
        k = self.beta_star.size
        return self.robust_covariance[1:1 + k, 1:1 + k]

    def predict_proba(self, scores, instruments) -> np.ndarray:
        X = np.atleast_2d(np.asarray(scores, float)) - self.x_mean
        G = np.atleast_2d(_instrument_values(instruments)) - self.g_mean
        V = X - G @ self.first_stage_coefficients
        return expit(self.intercept + X @ self.beta_star + V @ self.alpha)


def _logistic_irls(D, y, options: LogisticOptions):
    n, p = D.shape
    beta = np.zeros(p)
    eta = D @ beta

    def deviance(eta):
        # -2 loglik, stable form
        return 2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta)

    dev = deviance(eta)
    for it in range(1, options.max_iter + 1):
        mu = expit(eta)
        w = mu * (1.0 - mu)
        H = D.T @ (D * w[:, None])
        score = D.T @ (y - mu)
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("logistic information matrix is singular") from exc
        for _ in range(options.max_halvings):
            cand = beta + step
            eta_c = D @ cand
            dev_c = deviance(eta_c)
            if np.isfinite(dev_c) and dev_c <= dev + 1e-12 * abs(dev):
                break
            step = step / 2.0
        else:
            raise SeparationError("step halving failed to decrease the deviance")
        beta, eta, dev_old, dev = cand, eta_c, dev, dev_c
        if np.linalg.norm(beta) > options.max_coef_norm:
            raise SeparationError("coefficient norm diverging; outcome is separable")
        if np.max(np.abs(step)) < options.tol * (1.0 + np.max(np.abs(beta))) or \
                abs(dev_old - dev) < options.tol * (abs(dev) + 0.1) * 1e-2:
            return beta, it, True
    return beta, options.max_iter, False


def two_sri(design: PseudoExposureDesign, options: Optional[LogisticOptions] = None) -> TsriFit:
    """Two-stage residual inclusion (control function) logistic regression.

    Stage 1 regresses each centered score column on the centered instruments
    by least squares; stage 2 fits ``logit P(Y=1) = b0 + X b + V a`` by IRLS
    where ``V`` are the stage-1 residuals. The covariance is the HC0
    sandwich of the stage-2 likelihood.
    """
    options = options or LogisticOptions()
    y = design.outcome
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("two_sri requires a 0/1 outcome")
    if y.min() == y.max():
        raise SingleClassError("binary outcome contains a single class")
    G = design.G
    X = design.scores
    g_mean = G.mean(axis=0)
    x_mean = X.mean(axis=0)
    Gc = G - g_mean
    Xc = X - x_mean
    if np.linalg.matrix_rank(Gc) < Gc.shape[1]:
        raise RankDeficiencyError("instrument matrix is rank deficient")
    gamma, *_ = np.linalg.lstsq(Gc, Xc, rcond=None)
    V = Xc - Gc @ gamma
    D = np.column_stack([np.ones(y.size), Xc, V])
    if np.linalg.matrix_rank(D) < D.shape[1]:
        raise RankDeficiencyError("second-stage design is rank deficient")
    coef, iters, converged = _logistic_irls(D, y, options)
    mu = expit(D @ coef)
    if np.any(mu <= 0.0) or np.any(mu >= 1.0):
        raise SeparationError("fitted probabilities reached 0 or 1")
    w = mu * (1.0 - mu)
    bread = np.linalg.inv(D.T @ (D * w[:, None]))
    meat = (D * ((y - mu) ** 2)[:, None]).T @ D
    cov = bread @ meat @ bread
    k = X.shape[1]
    return TsriFit(
        first_stage_coefficients=gamma,
        residuals=V,
        beta_star=coef[1:1 + k],
        alpha=coef[1 + k:],
        intercept=float(coef[0]),
        robust_covariance=0.5 * (cov + cov.T),
        converged=converged,
        iterations=iters,
        x_mean=x_mean,
        g_mean=g_mean,
    )


def conditional_f(design: PseudoExposureDesign, target_column: int) -> float:
    """Sanderson-Windmeijer conditional F statistic for one score column.

    The target column is regressed on the remaining columns by 2SLS with
    the instruments; the residual is then regressed on the instruments and
    the usual F statistic is formed with ``P - (K - 1)`` numerator degrees
    of freedom (the other columns use up ``K - 1``) and ``N - P - 1``
    denominator degrees of freedom (one more for the centering). With a
    single score column this is the ordinary first-stage F.
    """
    X = design.scores
    k = X.shape[1]
    if not 0 <= target_column < k:
        raise IndexError(f"target_column {target_column} out of range for {k} columns")
    G = design.G
    n, p = G.shape
    Gc = G - G.mean(axis=0)
    Xc = X - X.mean(axis=0)
    q, r = np.linalg.qr(Gc)
    if np.min(np.abs(np.diag(r))) <= 1e-10 * np.max(np.abs(np.diag(r))):
        raise RankDeficiencyError("instrument matrix is rank deficient")
    x = Xc[:, target_column]
    others = np.delete(Xc, target_column, axis=1)
    if others.shape[1]:
        proj_others = q @ (q.T @ others)
        lhs = proj_others.T @ others
        if np.linalg.matrix_rank(lhs) < others.shape[1]:
            raise RankDeficiencyError("conditioning score columns are not identified")
        delta = np.linalg.solve(lhs, proj_others.T @ x)
        u = x - others @ delta
    else:
        u = x
    qu = q.T @ u
    explained = float(qu @ qu)
    resid = float(u @ u) - explained
    df_num = p - (k - 1)
    df_den = n - p - 1
    if resid <= 0:
        return np.inf
    return (explained / df_num) / (resid / df_den)
