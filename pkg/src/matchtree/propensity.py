"""Propensity score estimation.

Two estimators share one logistic link: plain maximum likelihood fitted by
Newton/IRLS, and the just-identified covariate-balancing fit, which solves

    sum_i [z_i / pi_i - (1 - z_i) / (1 - pi_i)] x_i = 0

for every design column, starting from the maximum-likelihood solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .cohort import Cohort, CovariateSchema

CLAMP = 1e-6


class DesignError(ValueError):
    pass


class SeparationError(ArithmeticError):
    """The likelihood has no finite maximizer (perfect or quasi-separation)."""


class RankError(ArithmeticError):
    """Weighted normal equations are singular."""


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    labels: tuple[str, ...]
    dropped: tuple[str, ...] = ()

    @property
    def shape(self):
        return self.matrix.shape


def design_matrix(
    cohort: Cohort,
    rows: np.ndarray | None = None,
    schema: CovariateSchema | None = None,
    *,
    drop_levels: frozenset[str] = frozenset(),
) -> DesignMatrix:
    """Intercept, standardized continuous covariates, and one-hot levels.

    The first occupied level of each categorical covariate not named in
    ``drop_levels`` is the reference; dropped levels pool with it.  Levels
    with no subjects in ``rows`` get no column either.  Both kinds are
    listed in ``dropped``.
    """
    schema = schema or cohort.schema
    idx = np.arange(len(cohort)) if rows is None else np.asarray(rows)
    if idx.size == 0:
        raise DesignError("empty subset")
    cols, labels, dropped = [np.ones(idx.size)], ["(intercept)"], []
    for entry in schema.entries:
        values = cohort.covariate_column(entry.name)[idx]
        if entry.kind == "continuous":
            sd = values.std()
            if not sd > 0:
                raise DesignError(f"zero variance column {entry.name!r}")
            cols.append((values - values.mean()) / sd)
            labels.append(entry.name)
            continue
        counts = np.bincount(values, minlength=len(entry.all_levels))
        names = [f"{entry.name}={lvl}" for lvl in entry.all_levels]
        dropped += [names[k] for k, c in enumerate(counts) if c == 0]
        occupied = [k for k, c in enumerate(counts) if c > 0]
        kept = [k for k in occupied if names[k] not in drop_levels]
        dropped += [names[k] for k in occupied if names[k] in drop_levels]
        for k in kept[1:]:
            cols.append((values == k).astype(float))
            labels.append(names[k])
    return DesignMatrix(np.column_stack(cols), tuple(labels), tuple(dropped))


@dataclass
class PropensityModel:
    coefficients: np.ndarray
    labels: tuple[str, ...]
    method: str  # "balance_conditions" or "max_likelihood"
    iterations: int
    residual_norm: float
    fitted: np.ndarray
    converged: bool = True
    fallback: bool = False
    trace: list[float] = field(default_factory=list)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return expit(X @ self.coefficients)

    def scores(self) -> np.ndarray:
        """Fitted probabilities clamped away from 0 and 1 for downstream calipers."""
        return np.clip(self.fitted, CLAMP, 1 - CLAMP)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "coefficients": dict(zip(self.labels, map(float, self.coefficients))),
            "iterations": self.iterations,
            "residual_norm": float(self.residual_norm),
            "converged": self.converged,
            "fallback": self.fallback,
            "trace": [float(t) for t in self.trace],
        }


def _check_inputs(X, z):
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    if X.ndim != 2 or X.shape[0] != z.shape[0]:
        raise ValueError("X rows must match the number of exposure indicators")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("exposure indicators must be 0/1")
    if z.min() == z.max():
        raise ValueError("exposure indicators need both 0s and 1s")
    return X, z


def _loglik(X, z, beta):
    eta = X @ beta
    return float(np.sum(z * log_expit(eta) + (1 - z) * log_expit(-eta)))


def _solve(H, g):
    if not np.all(np.isfinite(H)) or np.linalg.cond(H) > 1e13:
        raise RankError("singular weighted normal equations")
    return np.linalg.solve(H, g)


def fit_max_likelihood(X, z, labels=None, *, max_iter: int = 100, tol: float = 1e-10) -> PropensityModel:
    """Logistic regression by Newton-Raphson (IRLS) with step halving.

    Stops when the relative log-likelihood change drops below ``tol``.
    Raises :class:`SeparationError` when the coefficient norm keeps growing
    without bound, :class:`RankError` on singular normal equations.
    """
    X, z = _check_inputs(X, z)
    labels = tuple(labels) if labels is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    beta = np.zeros(X.shape[1])
    ll = _loglik(X, z, beta)
    trace, norms = [ll], [0.0]
    it = 0
    for it in range(1, max_iter + 1):
        pi = expit(X @ beta)
        grad = X.T @ (z - pi)
        H = (X * (pi * (1 - pi))[:, None]).T @ X
        step = _solve(H, grad)
        new_ll = _loglik(X, z, beta + step)
        for _ in range(30):
            if new_ll >= ll - 1e-12 * abs(ll):
                break
            step /= 2
            new_ll = _loglik(X, z, beta + step)
        beta = beta + step
        change = abs(new_ll - ll) / (abs(ll) + 1e-300)
        ll = new_ll
        trace.append(ll)
        norms.append(float(np.linalg.norm(beta)))
        if np.max(np.abs(z - expit(X @ beta))) < 1e-8:
            raise SeparationError("perfect separation: fitted probabilities reach 0/1")
        growing = len(norms) > 6 and all(b > a for a, b in zip(norms[-6:-1], norms[-5:]))
        if growing and norms[-1] > 25:
            raise SeparationError("coefficient norm diverging")
        if change < tol:
            break
    pi = expit(X @ beta)
    score = X.T @ (z - pi)
    return PropensityModel(beta, labels, "max_likelihood", it, float(np.max(np.abs(score))), pi, trace=trace)


def balance_residual(X, z, beta) -> np.ndarray:
    """Mean balance moment; zero at the covariate-balancing solution."""
    pi = expit(X @ beta)
    # a saturated trial step yields inf/nan here; the line search rejects it
    with np.errstate(divide="ignore", invalid="ignore"):
        w = z / pi - (1 - z) / (1 - pi)
        return X.T @ w / X.shape[0]


def fit_balance(X, z, labels=None, *, max_iter: int = 200, tol: float = 1e-6) -> PropensityModel:
    """Just-identified covariate-balancing propensity score.

    Damped Newton on the balance conditions from the MLE start.  If the
    residual max-norm has not reached ``tol`` after ``max_iter`` iterations
    the MLE fit is returned with ``fallback=True``.
    """
    X, z = _check_inputs(X, z)
    mle = fit_max_likelihood(X, z, labels)
    beta = mle.coefficients.copy()
    g = balance_residual(X, z, beta)
    res = float(np.max(np.abs(g)))
    trace = [res]
    n = X.shape[0]
    it = 0
    for it in range(1, max_iter + 1):
        if res <= 1e-13:
            break
        pi = expit(X @ beta)
        curv = z * (1 - pi) / pi + (1 - z) * pi / (1 - pi)
        J = -(X * curv[:, None]).T @ X / n
        try:
            step = -_solve(J, g)
        except RankError:
            break
        accepted = False
        for _ in range(40):
            cand = beta + step
            g_new = balance_residual(X, z, cand)
            r_new = float(np.max(np.abs(g_new)))
            if np.isfinite(r_new) and r_new < res:
                accepted = True
                break
            step /= 2
        if not accepted:
            break
        beta, g, res = cand, g_new, r_new
        trace.append(res)
    if res > tol:
        mle.fallback = True
        mle.converged = False
        mle.trace = trace
        return mle
    return PropensityModel(
        beta, mle.labels, "balance_conditions", it, res, expit(X @ beta), converged=True, trace=trace
    )


def weighted_means(X, z, pi) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-probability-weighted covariate means of the exposed and control groups."""
    X, z = np.asarray(X, float), np.asarray(z, float)
    w1, w0 = z / pi, (1 - z) / (1 - pi)
    return (w1 @ X) / w1.sum(), (w0 @ X) / w0.sum()
