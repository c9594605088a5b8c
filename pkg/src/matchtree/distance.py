"""Exposed-by-control distances: rank-based Mahalanobis plus a propensity caliper."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logit
from scipy.stats import rankdata

from .propensity import CLAMP

log = logging.getLogger(__name__)

RIDGE = 1e-8


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class DistanceMatrix:
    """Rows are exposed ids, columns control ids; ``inf`` marks a forbidden pair."""

    rows: tuple[str, ...]
    cols: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise ValueError("distance values do not match row/col ids")
        finite = self.values[np.isfinite(self.values)]
        if finite.size and finite.min() < 0:
            raise ValueError("distances must be nonnegative")

    @property
    def forbidden(self) -> np.ndarray:
        return ~np.isfinite(self.values)

    def unmatchable(self) -> list[str]:
        """Exposed ids whose every pairing is forbidden."""
        bad = self.forbidden.all(axis=1) if self.values.shape[1] else np.ones(len(self.rows), bool)
        return [r for r, b in zip(self.rows, bad) if b]

    def subset(self, rows=None, cols=None) -> "DistanceMatrix":
        rpos = {r: i for i, r in enumerate(self.rows)}
        cpos = {c: j for j, c in enumerate(self.cols)}
        ri = [rpos[r] for r in rows] if rows is not None else list(range(len(self.rows)))
        ci = [cpos[c] for c in cols] if cols is not None else list(range(len(self.cols)))
        return DistanceMatrix(
            tuple(self.rows[i] for i in ri), tuple(self.cols[j] for j in ci), self.values[np.ix_(ri, ci)]
        )

    def dump(self) -> dict:
        vals = [[None if not np.isfinite(v) else float(v) for v in row] for row in self.values]
        return {"rows": list(self.rows), "cols": list(self.cols), "values": vals}


def rank_transform(column) -> np.ndarray:
    """Ranks 1..n with ties given their average rank."""
    column = np.asarray(column, dtype=float)
    if column.size == 0:
        raise ValueError("empty column")
    return rankdata(column, method="average")


class RankMahalanobis:
    """Pairwise rank-based Mahalanobis distance over a pooled sample.

    Each covariate is replaced by its ranks; the rank covariance is rescaled
    so every column carries the variance of untied ranks 1..n, then inverted.
    ``d(i, j)`` is the quadratic form of the rank difference.
    """

    def __init__(self, ranks: np.ndarray):
        R = np.asarray(ranks, dtype=float)
        if R.ndim == 1:
            R = R[:, None]
        n = R.shape[0]
        if n < 2:
            raise ValueError("need at least two rows")
        self.ranks = R
        self.repaired = False
        if R.shape[1] == 0:
            self.precision = np.zeros((0, 0))
            self._L = np.zeros((0, 0))
            return
        cov = np.atleast_2d(np.cov(R, rowvar=False))
        untied = np.var(np.arange(1, n + 1), ddof=1)
        diag = np.diag(cov).copy()
        if np.any(diag <= 0):
            raise SingularCovarianceError("constant rank column")
        rat = np.sqrt(untied / diag)
        cov = cov * np.outer(rat, rat)
        evals = np.linalg.eigvalsh(cov)
        if evals.min() <= 1e-12 * evals.max():
            log.info("rank covariance singular; adding ridge")
            cov = cov + RIDGE * np.mean(np.diag(cov)) * np.eye(cov.shape[0])
            self.repaired = True
            evals = np.linalg.eigvalsh(cov)
            if evals.min() <= 0 or not np.all(np.isfinite(evals)):
                raise SingularCovarianceError("rank covariance singular after ridge repair")
        self.precision = np.linalg.inv(cov)
        # d(i, j) = |L^T (r_i - r_j)|^2 with precision = L L^T
        self._L = np.linalg.cholesky((self.precision + self.precision.T) / 2)
        self._T = R @ self._L

    def __call__(self, i: int, j: int) -> float:
        diff = self._T[i] - self._T[j] if self.ranks.shape[1] else np.zeros(0)
        return float(diff @ diff)

    def cross(self, a: np.ndarray, b: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Distances between pooled rows ``a`` and pooled rows ``b``."""
        a, b = np.asarray(a), np.asarray(b)
        out = np.empty((a.size, b.size))
        if self.ranks.shape[1] == 0:
            out[:] = 0.0
            return out
        Tb = self._T[b]
        for start in range(0, a.size, chunk):
            Ta = self._T[a[start:start + chunk]]
            diff = Ta[:, None, :] - Tb[None, :, :]
            out[start:start + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
        return out


def rank_mahalanobis(R: np.ndarray) -> RankMahalanobis:
    return RankMahalanobis(R)


def rank_matrix(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.column_stack([rank_transform(X[:, j]) for j in range(X.shape[1])]) if X.shape[1] else X


def distance_matrix(X_exposed, X_control, exposed_ids, control_ids) -> tuple[DistanceMatrix, RankMahalanobis]:
    """Rank-based Mahalanobis distances, ranks taken over the pooled sample."""
    X_exposed, X_control = np.asarray(X_exposed, float), np.asarray(X_control, float)
    metric = RankMahalanobis(rank_matrix(np.vstack([X_exposed, X_control])))
    ne = X_exposed.shape[0]
    vals = metric.cross(np.arange(ne), ne + np.arange(X_control.shape[0]))
    return DistanceMatrix(tuple(exposed_ids), tuple(control_ids), vals), metric


def apply_caliper(D: DistanceMatrix, p_exposed, p_control, width: float = 0.2,
                  sd: float | None = None) -> DistanceMatrix:
    """Forbid pairs whose logit-propensity gap exceeds ``width`` pooled SDs.

    The SD is taken over the pooled logits of ``p_exposed`` and ``p_control``
    unless given.
    """
    if not width > 0:
        raise ValueError("caliper width must be positive")
    if np.isinf(width):
        return D
    le = logit(np.clip(np.asarray(p_exposed, float), CLAMP, 1 - CLAMP))
    lc = logit(np.clip(np.asarray(p_control, float), CLAMP, 1 - CLAMP))
    if sd is None:
        sd = np.std(np.concatenate([le, lc]), ddof=1)
    gap = np.abs(le[:, None] - lc[None, :])
    vals = D.values.copy()
    vals[gap > width * sd] = np.inf
    return replace(D, values=vals)
