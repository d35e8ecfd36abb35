"""Gaussian mixture representation and log-density evaluation.

Pointwise densities serve point clouds; the *expected* per-component log
density handles moment primitives, picking up a trace penalty from the
primitive's own covariance. All math runs in float64 with Cholesky-based
log determinants.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ValidationError
from .geometry import PointCloud, Primitive

__all__ = [
    "GaussianMixture",
    "gauss_logpdf",
    "mixture_logpdf",
    "avg_loglik",
    "expected_component_loglik",
    "expected_loglik_matrix",
    "save_model",
    "load_model",
]

_LOG_2PI = math.log(2.0 * math.pi)


def _sorted_sum(values, axis=None):
    # Summing in sorted order makes the result independent of input
    # permutation, which several contracts here promise exactly.
    return np.sum(np.sort(values, axis=axis), axis=axis)


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp, stable and permutation-invariant."""
    m = np.max(a, axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    s = _sorted_sum(np.exp(a - safe[:, None]), axis=1)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(s), m)


@dataclass(frozen=True)
class GaussianMixture:
    """K Gaussian components: weights ``(K,)``, means ``(K,3)``, covariances ``(K,3,3)``.

    Weights must be non-negative and sum to 1 within 1e-9. Covariances must
    be symmetric positive definite; definiteness is checked lazily via
    Cholesky the first time densities are evaluated.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covariances, dtype=np.float64)
        k = len(w)
        if mu.shape != (k, 3) or cov.shape != (k, 3, 3):
            raise ValidationError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covariances {cov.shape}"
            )
        if k == 0:
            raise ValidationError("mixture needs at least one component")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ValidationError("mixture parameters contain non-finite values")
        if (w < 0).any():
            raise ValidationError("mixture weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError(f"mixture weights sum to {w.sum()!r}, expected 1")
        scale = 1.0 + np.abs(cov).max()
        if np.abs(cov - np.swapaxes(cov, 1, 2)).max() > 1e-9 * scale:
            raise ValidationError("mixture covariances are not symmetric")
        for name, arr in (("weights", w), ("means", mu), ("covariances", cov)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @cached_property
    def _chol(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.covariances)
        except np.linalg.LinAlgError:
            raise NumericError("component covariance is not positive definite") from None

    @cached_property
    def _log_dets(self) -> np.ndarray:
        d = np.diagonal(self._chol, axis1=1, axis2=2)
        return 2.0 * np.log(d).sum(axis=1)

    @cached_property
    def _chol_inv(self) -> np.ndarray:
        return np.linalg.inv(self._chol)

    @cached_property
    def _precisions(self) -> np.ndarray:
        li = self._chol_inv
        return np.einsum("kca,kcb->kab", li, li)

    @cached_property
    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def component_logpdfs(self, x: np.ndarray) -> np.ndarray:
        """Per-component Gaussian log densities for points ``x (N,3)`` -> ``(N,K)``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        out = np.empty((len(x), self.n_components))
        for k in range(self.n_components):
            y = (x - self.means[k]) @ self._chol_inv[k].T
            out[:, k] = -1.5 * _LOG_2PI - 0.5 * self._log_dets[k] - 0.5 * np.einsum(
                "ni,ni->n", y, y
            )
        return out


def gauss_logpdf(x, mean, cov) -> float:
    """Log density of ``N(mean, cov)`` at ``x``; ``x`` may be one point or ``(N,3)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    cov = np.asarray(cov, dtype=np.float64).reshape(3, 3)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericError("covariance is not positive definite") from None
    log_det = 2.0 * np.log(np.diagonal(chol)).sum()
    y = np.linalg.solve(chol, (pts - np.asarray(mean, dtype=np.float64)).T).T
    out = -1.5 * _LOG_2PI - 0.5 * log_det - 0.5 * np.einsum("ni,ni->n", y, y)
    return float(out[0]) if single else out


def mixture_logpdf(x, gmm: GaussianMixture):
    """Mixture log density ``log sum_i w_i N(x; mu_i, cov_i)`` via log-sum-exp."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    lp = gmm.component_logpdfs(x) + gmm.log_weights
    out = _logsumexp_rows(lp)
    return float(out[0]) if single else out


def avg_loglik(cloud, gmm: GaussianMixture) -> float:
    """Mean mixture log density over a point cloud."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.size == 0:
        raise ValidationError("cannot evaluate likelihood of an empty cloud")
    values = mixture_logpdf(pts.reshape(-1, 3), gmm)
    return float(_sorted_sum(values) / len(values))


def expected_component_loglik(p: Primitive, component) -> float:
    """Expected log of ``w * N(mu, cov)`` over a primitive's distribution.

    Relative to the point formula evaluated at the primitive's mean, the
    spread of the primitive adds ``-0.5 * trace(cov^-1 p.cov)``. With
    ``p.cov = 0`` this is exactly ``log w + gauss_logpdf(p.mean, ...)``.
    """
    lam, mean, cov = component
    if lam < 0:
        raise ValidationError(f"component weight must be >= 0, got {lam}")
    cov = np.asarray(cov, dtype=np.float64).reshape(3, 3)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericError("covariance is not positive definite") from None
    chol_inv = np.linalg.inv(chol)
    precision = chol_inv.T @ chol_inv
    diff = p.mean - np.asarray(mean, dtype=np.float64)
    log_det = 2.0 * np.log(np.diagonal(chol)).sum()
    with np.errstate(divide="ignore"):
        log_lam = np.log(lam)
    return float(
        log_lam
        - 1.5 * _LOG_2PI
        - 0.5 * log_det
        - 0.5 * diff @ precision @ diff
        - 0.5 * np.einsum("ab,ab->", precision, p.cov)
    )


def expected_loglik_matrix(prim_means, prim_covs, gmm: GaussianMixture) -> np.ndarray:
    """Expected per-component log densities for packed primitives -> ``(M,K)``.

    Vectorized form of :func:`expected_component_loglik` over all primitive /
    component pairs; this is the E-step workhorse.
    """
    prim_means = np.asarray(prim_means, dtype=np.float64).reshape(-1, 3)
    m = len(prim_means)
    out = np.empty((m, gmm.n_components))
    has_spread = prim_covs is not None and np.any(prim_covs)
    for k in range(gmm.n_components):
        y = (prim_means - gmm.means[k]) @ gmm._chol_inv[k].T
        out[:, k] = -1.5 * _LOG_2PI - 0.5 * gmm._log_dets[k] - 0.5 * np.einsum(
            "ni,ni->n", y, y
        )
        if has_spread:
            out[:, k] -= 0.5 * np.einsum("ab,nab->n", gmm._precisions[k], prim_covs)
    return out + gmm.log_weights


def save_model(gmm: GaussianMixture, path) -> None:
    """Serialize a mixture to JSON with full float64 round-trip precision."""
    payload = {
        "weights": gmm.weights.tolist(),
        "means": gmm.means.tolist(),
        "covariances": gmm.covariances.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_model(path) -> GaussianMixture:
    """Load a mixture written by :func:`save_model`."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not valid model JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise FormatError(f"{path}: model JSON must be an object")
    try:
        weights = np.asarray(payload["weights"], dtype=np.float64)
        means = np.asarray(payload["means"], dtype=np.float64)
        covariances = np.asarray(payload["covariances"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: missing or malformed model field: {exc}") from None
    return GaussianMixture(weights=weights, means=means, covariances=covariances)
