"""Affine polynomial chaos for correlated beta-distributed RES forecasts.

Every forecast is modelled on a germ ``omega_j ~ Beta(alpha_j, beta_j)`` on
``[0, 1]``.  The expansion basis is ``{1} + {phi_j}``, where ``phi_j`` is the
first-order Jacobi polynomial ``beta_j + (alpha_j + beta_j)(omega_j - 1)``
divided by its standard deviation, so the basis is orthonormal and moments
follow from sums of squares of coefficients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import betainc

from .errors import DegenerateData, FitDivergence, NotPSD, OutOfSupport, Unbalanced, ValidationError
from .network import Network

logger = logging.getLogger(__name__)

ALPHA_MAX = 100.0
BETA_MAX = 100.0
PARAM_MIN = 1e-3  # strictly positive lower end of the fit box
BALANCE_TOL = 1e-6  # MW


# --------------------------------------------------------------------------- beta fitting

@dataclass(frozen=True)
class BetaParams:
    """Shape parameters of ``Beta(alpha, beta)`` plus the MW support ``[a, a + c]``."""

    alpha: float
    beta: float
    a: float = 0.0
    c: float = 1.0
    fit_error: float = 0.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValidationError(f"beta parameters must be positive, got ({self.alpha}, {self.beta})")
        if not self.c > 0:
            raise ValidationError("support width must be positive")

    @property
    def unit_mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def unit_std(self) -> float:
        s = self.alpha + self.beta
        return float(np.sqrt(self.alpha * self.beta / (s * s * (s + 1.0))))

    @property
    def std(self) -> float:
        """Standard deviation in MW."""
        return self.c * self.unit_std

    @property
    def poly_norm(self) -> float:
        """Standard deviation of ``beta + (alpha + beta)(omega - 1)`` under its own marginal."""
        s = self.alpha + self.beta
        return float(np.sqrt(self.alpha * self.beta / (s + 1.0)))


def beta_ppf(p, alpha, beta, tol: float = 1e-13) -> np.ndarray:
    """Inverse regularized incomplete beta function by bisection.

    Arguments broadcast against each other.  The CDF is monotone on
    ``[0, 1]``, so bisection halves the bracket until it is narrower than
    ``tol``.
    """
    p, alpha, beta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p, alpha, beta)))
    lo = np.zeros(p.shape)
    hi = np.ones(p.shape)
    for _ in range(int(np.ceil(np.log2(1.0 / tol))) + 1):
        mid = 0.5 * (lo + hi)
        below = betainc(alpha, beta, mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _fit_error(alpha, beta, mu: float, q5: float, q95: float) -> np.ndarray:
    alpha, beta = np.broadcast_arrays(np.asarray(alpha, dtype=float), np.asarray(beta, dtype=float))
    lo = beta_ppf(0.05, alpha, beta)
    hi = beta_ppf(0.95, alpha, beta)
    return (lo - q5) ** 2 + (hi - q95) ** 2 + (alpha / (alpha + beta) - mu) ** 2


def fit_beta(mu: float, q5: float, q95: float, *, alpha_max: float = ALPHA_MAX, beta_max: float = BETA_MAX,
             max_error: float = 1e-4, degenerate_tol: float = 1e-9, grid: int = 16) -> BetaParams:
    """Fit ``Beta(alpha, beta)`` on the unit interval to a mean and two quantiles.

    Minimizes the squared mismatch of the 5 % and 95 % quantiles and the mean
    over the box ``(0, alpha_max] x (0, beta_max]``.  A log-spaced grid picks
    the start, then Nelder-Mead is restarted from its own result until it no
    longer improves.

    Parameters
    ----------
    mu, q5, q95
        Mean and quantiles already rescaled to ``[0, 1]``.

    Returns
    -------
    BetaParams
        Parameters on unit support; ``fit_error`` holds the final objective.

    Raises
    ------
    DegenerateData
        ``q95 - q5`` is below ``degenerate_tol``.
    FitDivergence
        The best objective exceeds ``max_error``.
    """
    if q95 - q5 < degenerate_tol:
        raise DegenerateData(f"quantile spread {q95 - q5:.3g} is too small to fit a distribution")
    if not 0.0 < q5 <= mu <= q95 < 1.0:
        raise ValidationError(f"expected 0 < q5 <= mu <= q95 < 1, got {q5}, {mu}, {q95}")

    ga = np.geomspace(0.05, alpha_max, grid)
    gb = np.geomspace(0.05, beta_max, grid)
    A, B = np.meshgrid(ga, gb, indexing="ij")
    errs = _fit_error(A, B, mu, q5, q95)
    k = np.unravel_index(np.argmin(errs), errs.shape)
    x = np.array([A[k], B[k]])
    best = float(errs[k])

    bounds = [(PARAM_MIN, alpha_max), (PARAM_MIN, beta_max)]
    fun = lambda v: float(_fit_error(v[0], v[1], mu, q5, q95))  # noqa: E731
    for _ in range(10):
        res = minimize(fun, x, method="Nelder-Mead", bounds=bounds,
                       options={"xatol": 1e-12, "fatol": 1e-24, "maxiter": 4000, "maxfev": 8000,
                                "initial_simplex": np.array([x, x * [1.05, 1.0], x * [1.0, 1.05]])})
        improved = res.fun < best * (1.0 - 1e-12)
        if res.fun <= best:
            x, best = res.x, float(res.fun)
        if not improved:
            break
    if best > max_error:
        raise FitDivergence(f"beta fit did not converge: objective {best:.3g} exceeds {max_error:.3g}")
    return BetaParams(float(x[0]), float(x[1]), fit_error=best)


# --------------------------------------------------------------------------- basis

@dataclass(frozen=True)
class MultiIndexSet:
    """Ordered multi-indices; the first one is the zero index."""

    indices: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.indices or any(self.indices[0]):
            raise ValidationError("a multi-index set must start with the zero index")

    @classmethod
    def affine(cls, n_omega: int) -> "MultiIndexSet":
        """All multi-indices of total degree at most one."""
        rows = [tuple(0 for _ in range(n_omega))]
        rows += [tuple(int(i == j) for i in range(n_omega)) for j in range(n_omega)]
        return cls(tuple(rows))

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def n_omega(self) -> int:
        return len(self.indices[0])

    def degree(self, k: int) -> int:
        return sum(self.indices[k])


@dataclass(frozen=True, eq=False)
class PceBasis:
    """Orthonormal affine basis over independent beta germs."""

    params: tuple[BetaParams, ...]
    index: MultiIndexSet

    def __post_init__(self):
        if self.index.n_omega != len(self.params):
            raise ValidationError("multi-index set and marginals disagree on the germ dimension")
        if any(self.index.degree(k) > 1 for k in range(len(self.index))):
            raise ValidationError("only affine multi-index sets are supported")

    @classmethod
    def affine(cls, params: Sequence[BetaParams]) -> "PceBasis":
        return cls(tuple(params), MultiIndexSet.affine(len(params)))

    @property
    def n_omega(self) -> int:
        return len(self.params)

    @property
    def size(self) -> int:
        return len(self.index)

    @property
    def mean_point(self) -> np.ndarray:
        return np.array([p.unit_mean for p in self.params])

    def _vectors(self):
        a = np.array([p.alpha for p in self.params])
        b = np.array([p.beta for p in self.params])
        norm = np.array([p.poly_norm for p in self.params])
        return a, b, norm

    def phi(self, omega: np.ndarray) -> np.ndarray:
        """Basis functions evaluated at germ samples.

        Parameters
        ----------
        omega
            ``(n, n_omega)`` samples or a single ``(n_omega,)`` point.

        Returns
        -------
        ndarray
            ``(n, |M|)`` values, or ``(|M|,)`` for a single point.
        """
        omega = np.asarray(omega, dtype=float)
        single = omega.ndim == 1
        om = np.atleast_2d(omega)
        if om.shape[1] != self.n_omega:
            raise ValidationError(f"omega has {om.shape[1]} entries, expected {self.n_omega}")
        if np.any(om < 0.0) or np.any(om > 1.0) or not np.all(np.isfinite(om)):
            raise OutOfSupport("omega lies outside the unit support of the beta germs")
        a, b, norm = self._vectors()
        values = np.empty((om.shape[0], self.size))
        values[:, 0] = 1.0
        # column order follows the index set
        cols = [self.index.indices[k].index(1) for k in range(1, self.size)]
        first = (b + (a + b) * (om - 1.0)) / norm
        values[:, 1:] = first[:, cols]
        return values[0] if single else values


@dataclass(frozen=True, eq=False)
class PceCoefficients:
    """Coefficient matrix (``n_x x |M|``) of a vector random variable; column 0 is the mean."""

    values: np.ndarray
    basis: PceBasis

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape[1] != self.basis.size:
            raise ValidationError(f"coefficient matrix has {v.shape[1]} columns, expected {self.basis.size}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.values[:, 0].copy()

    def map(self, matrix) -> "PceCoefficients":
        """Apply a linear map coefficient-wise."""
        return PceCoefficients(np.asarray(matrix @ self.values), self.basis)

    def __add__(self, other: "PceCoefficients") -> "PceCoefficients":
        return PceCoefficients(self.values + other.values, self.basis)

    def __sub__(self, other: "PceCoefficients") -> "PceCoefficients":
        return PceCoefficients(self.values - other.values, self.basis)


def moments(x: PceCoefficients) -> tuple[np.ndarray, np.ndarray]:
    """Mean (column 0) and variance (row sums of squares over the other columns)."""
    v = x.values
    return v[:, 0].copy(), np.sum(v[:, 1:] ** 2, axis=1)


def evaluate(x: PceCoefficients, omega: np.ndarray) -> np.ndarray:
    """Realizations ``sum_alpha x^alpha phi^alpha(omega)``.

    Returns an ``(n_x,)`` vector for a single germ point or ``(n, n_x)`` for a
    sample matrix.
    """
    phi = x.basis.phi(omega)
    return phi @ x.values.T


def sample(basis: PceBasis, n: int, seed: int, stream: int = 0) -> np.ndarray:
    """Draw ``n`` germ points, one independent beta marginal per column.

    ``(seed, stream)`` selects the random stream, so parallel workers can draw
    disjoint sequences that are reproducible regardless of scheduling.
    """
    if n < 1:
        raise ValidationError("sample count must be at least 1")
    rng = np.random.default_rng([seed, stream])
    out = np.empty((n, basis.n_omega))
    for j, p in enumerate(basis.params):
        out[:, j] = rng.beta(p.alpha, p.beta, size=n)
    return out


def cholesky_psd(S: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L' = S`` for a positive semidefinite ``S``.

    Falls back to an outer-product factorization that zeroes pivots below the
    tolerance, so rank-deficient matrices such as all-ones correlations work.

    Raises
    ------
    NotPSD
        ``S`` has an eigenvalue below ``-tol * scale``.
    """
    S = np.asarray(S, dtype=float)
    scale = max(1.0, float(np.abs(S).max(initial=0.0)))
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    if S.size and np.linalg.eigvalsh(S).min() < -tol * scale * len(S):
        raise NotPSD("covariance matrix is not positive semidefinite")
    n = len(S)
    L = np.zeros_like(S)
    R = S.copy()
    for k in range(n):
        piv = R[k, k]
        if piv > tol * scale:
            L[k:, k] = R[k:, k] / np.sqrt(piv)
            R[k:, k:] -= np.outer(L[k:, k], L[k:, k])
        elif np.abs(R[k:, k]).max() > np.sqrt(tol) * scale:
            raise NotPSD("covariance matrix is not positive semidefinite")
    return L


def build_basis(records, E: np.ndarray, **fit_options) -> tuple[PceBasis, PceCoefficients]:
    """Fit marginals and build the correlated affine expansion of RES forecasts.

    Parameters
    ----------
    records
        Forecast records (``mu, q5, q95, a, b`` in MW), ordered as the RES set.
    E
        Correlation matrix in the same order.
    **fit_options
        Passed through to :func:`fit_beta`.

    Returns
    -------
    basis, coefficients
        The germ basis and the ``|R| x (|R| + 1)`` coefficient matrix whose
        first column is the forecast mean and whose remaining block is the
        lower Cholesky factor of ``Sigma_ij = E_ij sigma_i sigma_j``.
    """
    E = np.asarray(E, dtype=float)
    n = len(records)
    if E.shape != (n, n):
        raise ValidationError(f"correlation matrix is {E.shape}, expected {(n, n)}")
    params = []
    for rec in records:
        mu, q5, q95 = rec.scaled()
        fitted = fit_beta(mu, q5, q95, **fit_options)
        params.append(BetaParams(fitted.alpha, fitted.beta, rec.a, rec.width, fitted.fit_error))
        logger.debug("RES %s: alpha=%.6g beta=%.6g error=%.3g", rec.res_id, fitted.alpha, fitted.beta,
                     fitted.fit_error)
    sigma = np.array([p.std for p in params])
    cov = E * np.outer(sigma, sigma)
    L = cholesky_psd(cov)
    basis = PceBasis.affine(params)
    values = np.column_stack([np.array([r.mu for r in records]), L])
    return basis, PceCoefficients(values, basis)


def covariance(x: PceCoefficients) -> np.ndarray:
    tail = x.values[:, 1:]
    return tail @ tail.T


# --------------------------------------------------------------------------- market clearing

def participation_factors(network: Network, dispatch: np.ndarray | None = None) -> np.ndarray:
    """Capacity-proportional weights over units with positive dispatch.

    Units at zero output do not take part, since any share of a zero-mean
    imbalance would push them below zero.
    """
    p_max = np.array([g.p_max for g in network.generators])
    p = network.p_set if dispatch is None else np.asarray(dispatch, dtype=float)
    w = np.where(p > 0, p_max, 0.0)
    if w.sum() <= 0:
        w = p_max.copy()
    if w.sum() <= 0:
        raise ValidationError("no generator capacity available for participation")
    return w / w.sum()


def rebalance(network: Network, res_mean: np.ndarray, p_set: np.ndarray | None = None,
              weights: np.ndarray | None = None) -> np.ndarray:
    """Shift a schedule so that it balances demand net of mean RES output.

    The imbalance is shared by ``weights`` (capacity-proportional over
    committed units by default).  Units that would leave ``[0, p_max]`` are
    pinned at the bound and the remainder is re-shared among the others.
    """
    p = (network.p_set if p_set is None else np.asarray(p_set, dtype=float)).copy()
    p_max = np.array([g.p_max for g in network.generators])
    w = participation_factors(network, p) if weights is None else np.asarray(weights, dtype=float)
    free = w > 0
    for _ in range(len(p) + 1):
        residual = p.sum() + float(np.sum(res_mean)) - network.p_demand.sum()
        if abs(residual) <= 1e-9 or not free.any():
            break
        share = np.where(free, w, 0.0)
        p = p - residual * share / share.sum()
        low, high = p < 0, p > p_max
        p = np.clip(p, 0.0, p_max)
        free &= ~(low | high)
    residual = p.sum() + float(np.sum(res_mean)) - network.p_demand.sum()
    if abs(residual) > BALANCE_TOL:
        raise Unbalanced(f"cannot balance the schedule, residual {residual:.6g} MW", residual)
    return p


def market_clearing_pce(res_coeffs: PceCoefficients, network: Network, base_dispatch: np.ndarray,
                        weights: np.ndarray | None = None) -> PceCoefficients:
    """Expansion of the conventional schedule that keeps every realization balanced.

    Column 0 is ``base_dispatch``; every other column is ``-w`` times the sum
    of the RES coefficients in that column.

    Raises
    ------
    Unbalanced
        The mean schedule misses the balance by more than 1e-6 MW.
    """
    base = np.asarray(base_dispatch, dtype=float)
    if base.shape != (len(network.generators),):
        raise ValidationError("base dispatch length does not match the generator count")
    residual = base.sum() + res_coeffs.values[:, 0].sum() - network.p_demand.sum()
    if abs(residual) > BALANCE_TOL:
        raise Unbalanced(f"mean schedule is unbalanced by {residual:.6g} MW", residual)
    w = participation_factors(network, base) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValidationError("participation factors must be non-negative and sum to one")
    values = np.empty((len(base), res_coeffs.basis.size))
    values[:, 0] = base
    values[:, 1:] = -np.outer(w, res_coeffs.values[:, 1:].sum(axis=0))
    return PceCoefficients(values, res_coeffs.basis)
