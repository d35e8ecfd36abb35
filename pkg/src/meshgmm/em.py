"""Expectation-maximization over moment primitives.

The loop fits a Gaussian mixture to any list of primitives. In exact mode
each primitive contributes its own covariance to both the responsibilities
and the M-step covariance update; approx mode treats primitives as
size-weighted points at their means. With zero-covariance, unit-size
primitives both collapse to the classic point algorithm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import NumericError, ValidationError
from .geometry import bbox_diagonal, pack_primitives
from .mixture import GaussianMixture, _logsumexp_rows, expected_loglik_matrix

__all__ = [
    "Responsibilities",
    "FitConfig",
    "FitReport",
    "BoundValues",
    "init_random",
    "init_kmeanspp",
    "e_step",
    "m_step",
    "fit",
    "evaluate_bounds",
]

_INITS = ("kmeans++", "random")
_MODES = ("exact", "approx")


@dataclass(frozen=True)
class Responsibilities:
    """Soft assignment matrix ``eta (M,K)``; each row sums to 1."""

    eta: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64)
        if eta.ndim != 2:
            raise ValidationError(f"eta must be a 2D matrix, got shape {eta.shape}")
        if (eta < 0).any() or not np.all(np.isfinite(eta)):
            raise ValidationError("eta entries must be finite and non-negative")
        if np.abs(eta.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValidationError("eta rows must sum to 1 within 1e-9")
        eta = np.ascontiguousarray(eta)
        eta.flags.writeable = False
        object.__setattr__(self, "eta", eta)

    def weights(self, sizes) -> np.ndarray:
        """Size-scaled assignment weights ``w_jk = eta_jk * size_j``."""
        return self.eta * np.asarray(sizes, dtype=np.float64)[:, None]

    def totals(self, sizes) -> np.ndarray:
        """Per-component weight mass ``W_k``."""
        return self.weights(sizes).sum(axis=0)


@dataclass(frozen=True)
class FitConfig:
    """Fitting knobs.

    ``reg=None`` resolves to ``1e-6 * (bounding-box diagonal)^2`` of the
    primitive means, a scale-free covariance floor folded into every
    M-step covariance.
    """

    K: int
    init: str = "kmeans++"
    max_iters: int = 25
    tol: float = 1e-12
    reg: float | None = None
    mode: str = "exact"
    seed: int = 0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValidationError(f"K must be a positive integer, got {self.K!r}")
        if self.init not in _INITS:
            raise ValidationError(f"init must be one of {_INITS}, got {self.init!r}")
        if self.mode not in _MODES:
            raise ValidationError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.max_iters < 0:
            raise ValidationError(f"max_iters must be >= 0, got {self.max_iters}")
        if not self.tol > 0:
            raise ValidationError(f"tol must be > 0, got {self.tol}")
        if self.reg is not None and self.reg < 0:
            raise ValidationError(f"reg must be >= 0, got {self.reg}")


@dataclass
class FitReport:
    """Outcome of a fit: final model, per-iteration bounds, and bookkeeping.

    ``lower_bound_trace`` holds the entropy-completed lower bound (EM free
    energy), which is the monotone quantity; ``jensen_trace`` holds the
    plain size-weighted sum of expected component log densities, the form
    used for fidelity bar comparisons. ``rescues`` lists ``(iteration,
    component)`` pairs where an empty component was reseeded.
    """

    model: GaussianMixture
    lower_bound_trace: list[float]
    iterations_run: int
    converged: bool
    jensen_trace: list[float] = field(default_factory=list)
    rescues: list[tuple[int, int]] = field(default_factory=list)


class BoundValues(NamedTuple):
    free_energy: float
    jensen: float


def _one_hot(assign: np.ndarray, k: int) -> np.ndarray:
    eta = np.zeros((len(assign), k))
    eta[np.arange(len(assign)), assign] = 1.0
    return eta


def init_random(primitives, K: int, seed) -> Responsibilities:
    """One-hot responsibilities from uniform random component assignment."""
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    m = len(primitives)
    if K > m:
        warnings.warn(f"K={K} exceeds primitive count M={m}", stacklevel=2)
    rng = np.random.default_rng(seed)
    return Responsibilities(eta=_one_hot(rng.integers(0, K, size=m), K))


def _kmeanspp_assign(means: np.ndarray, sizes: np.ndarray, k: int, seed) -> np.ndarray:
    m = len(means)
    distinct = np.unique(means, axis=0).shape[0]
    if distinct < k:
        raise ValidationError(f"K={k} exceeds {distinct} distinct primitive means")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, 3))
    total = sizes.sum()
    first_p = sizes / total if total > 0 else np.full(m, 1.0 / m)
    centers[0] = means[rng.choice(m, p=first_p)]
    d2 = ((means - centers[0]) ** 2).sum(axis=1)
    for t in range(1, k):
        mass = sizes * d2
        s = mass.sum()
        p = mass / s if s > 0 else d2 / d2.sum()
        centers[t] = means[rng.choice(m, p=p)]
        d2 = np.minimum(d2, ((means - centers[t]) ** 2).sum(axis=1))

    assign = np.zeros(m, dtype=np.int64)
    for _ in range(100):
        dist = ((means[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        for i in range(k):
            mask = new_assign == i
            if not mask.any():
                # Deterministic empty-cluster fix: steal the point farthest
                # from its current center.
                far = dist[np.arange(m), new_assign].argmax()
                centers[i] = means[far]
                new_assign[far] = i
                mask = new_assign == i
            w = sizes[mask]
            if w.sum() > 0:
                centers[i] = np.average(means[mask], axis=0, weights=w)
            else:
                centers[i] = means[mask].mean(axis=0)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign


def init_kmeanspp(primitives, K: int, seed) -> Responsibilities:
    """One-hot responsibilities from size-weighted k-means++ plus Lloyd.

    Seeding picks centers among primitive means with probability
    proportional to ``size * D^2`` (size alone for the first); Lloyd then
    runs size-weighted updates until assignments stabilize, at most 100
    rounds. Ties and empty clusters are resolved deterministically.
    """
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    means, _, sizes = pack_primitives(primitives)
    return Responsibilities(eta=_one_hot(_kmeanspp_assign(means, sizes, K, seed), K))


def _e_step_arrays(prim_means, prim_covs, sizes, gmm):
    ell = expected_loglik_matrix(prim_means, prim_covs, gmm)
    lse = _logsumexp_rows(ell)
    if not np.all(np.isfinite(lse)):
        raise NumericError("a primitive has zero density under every component")
    eta = np.exp(ell - lse[:, None])
    free_energy = float(sizes @ lse)
    # eta == 0 exactly where ell is -inf; mask those to avoid 0 * inf.
    contrib = eta * np.where(eta > 0, ell, 0.0)
    jensen = float(sizes @ contrib.sum(axis=1))
    return eta, free_energy, jensen


def e_step(primitives, gmm: GaussianMixture):
    """Responsibilities and the entropy-completed lower bound for ``gmm``.

    ``eta`` is the softmax over components of the expected component log
    densities; the returned bound is the free energy of that posterior,
    ``sum_j size_j * logsumexp_i ell_ij``, which the M-step can only improve.
    """
    prim_means, prim_covs, sizes = pack_primitives(primitives)
    eta, free_energy, _ = _e_step_arrays(prim_means, prim_covs, sizes, gmm)
    return Responsibilities(eta=eta), free_energy


def evaluate_bounds(primitives, gmm: GaussianMixture) -> BoundValues:
    """Both lower-bound forms at the softmax responsibilities for ``gmm``."""
    prim_means, prim_covs, sizes = pack_primitives(primitives)
    _, free_energy, jensen = _e_step_arrays(prim_means, prim_covs, sizes, gmm)
    return BoundValues(free_energy=free_energy, jensen=jensen)


def _m_step_arrays(prim_means, prim_covs, sizes, eta, mode, reg):
    m, k = eta.shape
    w = eta * sizes[:, None]
    totals = w.sum(axis=0)
    if totals.sum() <= 0:
        raise ValidationError("total primitive size is zero")

    means = np.zeros((k, 3))
    covs = np.zeros((k, 3, 3))
    eye = np.eye(3)
    active = totals > 0
    for i in np.flatnonzero(active):
        wi = w[:, i]
        mu = wi @ prim_means / totals[i]
        diff = prim_means - mu
        cov = (wi[:, None] * diff).T @ diff / totals[i]
        if mode == "exact":
            cov = cov + np.einsum("j,jab->ab", wi, prim_covs) / totals[i]
        means[i] = mu
        covs[i] = 0.5 * (cov + cov.T) + reg * eye

    rescued = []
    empty = np.flatnonzero(~active)
    if empty.size:
        frac = totals[active] / totals[active].sum()
        partial = GaussianMixture(
            weights=frac, means=means[active], covariances=covs[active]
        )
        score = _logsumexp_rows(expected_loglik_matrix(prim_means, prim_covs, partial))
        score = np.where(sizes > 0, score, np.inf)
        floor = reg if reg > 0 else 1e-12 * (1.0 + float(np.abs(covs[active]).max()))
        for i in empty:
            j = int(score.argmin())
            score[j] = np.inf
            means[i] = prim_means[j]
            covs[i] = prim_covs[j] + floor * eye
            totals[i] = sizes[j]
            rescued.append(int(i))

    weights = totals / totals.sum()
    return GaussianMixture(weights=weights, means=means, covariances=covs), rescued


def m_step(primitives, resp: Responsibilities, mode: str = "exact", reg: float = 0.0) -> GaussianMixture:
    """Maximize the lower bound given responsibilities.

    Weights are proportional to each component's size-weighted mass, means
    are weighted averages of primitive means, and each covariance is the
    weighted between-mean scatter plus, in exact mode only, the weighted
    average of the primitive covariances. ``reg * I`` is added to every
    covariance. Components with zero mass are reseeded at the primitive the
    rest of the model explains worst.
    """
    if mode not in _MODES:
        raise ValidationError(f"mode must be one of {_MODES}, got {mode!r}")
    prim_means, prim_covs, sizes = pack_primitives(primitives)
    model, _ = _m_step_arrays(prim_means, prim_covs, sizes, resp.eta, mode, reg)
    return model


def _relative_change(current: float, previous: float) -> float:
    return abs(current - previous) / max(abs(current), abs(previous), 1e-300)


def fit(primitives, config: FitConfig) -> FitReport:
    """Run EM until the relative bound change drops below tol or max_iters.

    Each iteration is one E-step (which records both bound forms) followed
    by one M-step; the initial model comes from an M-step over the one-hot
    init responsibilities, so ``max_iters=0`` returns exactly that model.

    The covariance floor is applied by inflating every primitive covariance
    with ``reg * I`` before the loop. The resulting M-step covariance is
    exactly ``scatter + reg * I`` (same update a post-hoc floor would give),
    but because the inflated primitives make that update the true maximizer
    of the tracked bound, the trace is monotone by construction instead of
    bleeding whenever a cluster flattens down to the floor. With ``reg=0``
    the loop is plain EM.

    Internally the primitives are shifted and scaled to a canonical frame
    (centered, unit bounding-box diagonal) and the model mapped back
    afterwards; bound values are reported in data units.
    """
    prim_means, prim_covs, sizes = pack_primitives(primitives)
    if sizes.sum() <= 0:
        raise ValidationError("total primitive size is zero")
    if config.mode == "approx":
        prim_covs = np.zeros_like(prim_covs)

    reg = config.reg
    if reg is None:
        diag = bbox_diagonal(prim_means)
        reg = 1e-6 * (diag * diag if diag > 0 else 1.0)

    # Canonical frame: exact under power-of-two similarity of the input,
    # well conditioned for scenes far from the origin.
    lo, hi = prim_means.min(axis=0), prim_means.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = float(np.linalg.norm(hi - lo)) or 1.0
    prim_means = (prim_means - center) / scale
    prim_covs = prim_covs / scale**2
    if reg > 0:
        prim_covs = prim_covs + (reg / scale**2) * np.eye(3)
    # Log densities in the canonical frame differ from data units by a
    # constant per unit of primitive mass.
    bound_shift = -3.0 * np.log(scale) * float(sizes.sum())

    if config.init == "random":
        eta0 = init_random(primitives, config.K, config.seed).eta
    else:
        eta0 = _one_hot(_kmeanspp_assign(prim_means, sizes, config.K, config.seed), config.K)

    rescues: list[tuple[int, int]] = []
    model, reseeded = _m_step_arrays(prim_means, prim_covs, sizes, eta0, "exact", 0.0)
    rescues.extend((0, i) for i in reseeded)

    trace: list[float] = []
    jensen: list[float] = []
    converged = False
    for iteration in range(1, config.max_iters + 1):
        eta, bound, jens = _e_step_arrays(prim_means, prim_covs, sizes, model)
        trace.append(bound + bound_shift)
        jensen.append(jens + bound_shift)
        if len(trace) > 1 and _relative_change(trace[-1], trace[-2]) < config.tol:
            converged = True
            break
        model, reseeded = _m_step_arrays(prim_means, prim_covs, sizes, eta, "exact", 0.0)
        rescues.extend((iteration, i) for i in reseeded)

    model = GaussianMixture(
        weights=model.weights,
        means=model.means * scale + center,
        covariances=model.covariances * scale**2,
    )
    return FitReport(
        model=model,
        lower_bound_trace=trace,
        iterations_run=len(trace),
        converged=converged,
        jensen_trace=jensen,
        rescues=rescues,
    )
