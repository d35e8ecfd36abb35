"""Rigid-transform algebra and 3D registration.

Point-to-distribution (P2D) registration maximizes the likelihood of a
transformed cloud under a fixed mixture; distribution-to-distribution (D2D)
minimizes the closed-form L2 distance between two mixtures. Both share a
quasi-Newton optimizer over R^7 (raw quaternion + translation, normalized
inside the objective) driven by central-difference gradients. A
point-to-point ICP baseline with exact KD-tree correspondences rounds out
the module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import NumericError, ValidationError
from .geometry import PointCloud
from .mixture import GaussianMixture, _sorted_sum, mixture_logpdf

__all__ = [
    "RigidTransform",
    "RegistrationResult",
    "MinimizeConfig",
    "MinimizeResult",
    "IcpConfig",
    "apply",
    "p2d_objective",
    "d2d_l2",
    "numerical_gradient",
    "minimize",
    "register_p2d",
    "register_d2d",
    "register_icp",
    "rotation_error",
    "translation_error",
]


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (unit quaternion, w-first) plus translation.

    The quaternion is normalized on construction and canonicalized so its
    first nonzero component is positive; ``q`` and ``-q`` are the same
    rotation.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValidationError("transform parameters contain non-finite values")
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise ValidationError("quaternion has (near) zero norm")
        q = q / norm
        nz = np.flatnonzero(q)
        if nz.size and q[nz[0]] < 0:
            q = -q
        for name, arr in (("q", q), ("t", t)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(q=np.array([1.0, 0.0, 0.0, 0.0]), t=np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ValidationError("rotation axis has zero norm")
        half = 0.5 * angle
        q = np.concatenate([[math.cos(half)], math.sin(half) * axis / norm])
        return cls(q=q, t=np.asarray(t, dtype=np.float64))

    @classmethod
    def from_matrix(cls, rotation, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(q=_quat_from_matrix(np.asarray(rotation, dtype=np.float64)), t=t)

    @cached_property
    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def inverse(self) -> "RigidTransform":
        q_conj = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(q=q_conj, t=-(self.rotation_matrix.T @ self.t))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        q = _quat_multiply(self.q, other.q)
        t = self.rotation_matrix @ other.t + self.t
        return RigidTransform(q=q, t=t)


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_from_matrix(r: np.ndarray) -> np.ndarray:
    # Shepperd's method: branch on the largest of trace and diagonal terms.
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > max(r[0, 0], r[1, 1], r[2, 2]):
        s = math.sqrt(tr + 1.0) * 2
        return np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    i = int(np.argmax([r[0, 0], r[1, 1], r[2, 2]]))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = math.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
    q = np.empty(4)
    q[0] = (r[k, j] - r[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (r[j, i] + r[i, j]) / s
    q[1 + k] = (r[k, i] + r[i, k]) / s
    return q


@dataclass
class RegistrationResult:
    """A recovered transform with optimizer diagnostics and optional errors."""

    transform: RigidTransform
    final_objective: float
    iterations: int
    converged: bool
    rotation_error: float | None = None
    translation_error: float | None = None


def apply(transform: RigidTransform, x):
    """Apply ``R x + t`` to one point or an ``(N,3)`` array."""
    x = np.asarray(x, dtype=np.float64)
    return x @ transform.rotation_matrix.T + transform.t


def p2d_objective(cloud, gmm: GaussianMixture, transform: RigidTransform) -> float:
    """Negative total mixture log likelihood of the transformed cloud."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.size == 0:
        raise ValidationError("cannot register an empty cloud")
    values = mixture_logpdf(apply(transform, pts.reshape(-1, 3)), gmm)
    return float(-_sorted_sum(values))


def _det3(m: np.ndarray) -> np.ndarray:
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def _pairwise_overlap(wa, ma, ca, wb, mb, cb) -> float:
    """``sum_ab wa wb N(ma; mb, ca + cb)`` over all component pairs."""
    s = ca[:, None, :, :] + cb[None, :, :, :]
    det = _det3(s)
    if (det <= 0).any() or not np.all(np.isfinite(det)):
        raise NumericError("pairwise covariance sum is not positive definite")
    d = ma[:, None, :] - mb[None, :, :]
    adj = np.empty_like(s)
    adj[..., 0, 0] = s[..., 1, 1] * s[..., 2, 2] - s[..., 1, 2] * s[..., 2, 1]
    adj[..., 0, 1] = s[..., 0, 2] * s[..., 2, 1] - s[..., 0, 1] * s[..., 2, 2]
    adj[..., 0, 2] = s[..., 0, 1] * s[..., 1, 2] - s[..., 0, 2] * s[..., 1, 1]
    adj[..., 1, 0] = s[..., 1, 2] * s[..., 2, 0] - s[..., 1, 0] * s[..., 2, 2]
    adj[..., 1, 1] = s[..., 0, 0] * s[..., 2, 2] - s[..., 0, 2] * s[..., 2, 0]
    adj[..., 1, 2] = s[..., 0, 2] * s[..., 1, 0] - s[..., 0, 0] * s[..., 1, 2]
    adj[..., 2, 0] = s[..., 1, 0] * s[..., 2, 1] - s[..., 1, 1] * s[..., 2, 0]
    adj[..., 2, 1] = s[..., 0, 1] * s[..., 2, 0] - s[..., 0, 0] * s[..., 2, 1]
    adj[..., 2, 2] = s[..., 0, 0] * s[..., 1, 1] - s[..., 0, 1] * s[..., 1, 0]
    mahal = np.einsum("abi,abij,abj->ab", d, adj, d) / det
    dens = (2.0 * math.pi) ** -1.5 * det**-0.5 * np.exp(-0.5 * mahal)
    return float(np.sum(np.sort((wa[:, None] * wb[None, :] * dens).ravel())))


def _transformed_components(gmm: GaussianMixture, transform: RigidTransform):
    r = transform.rotation_matrix
    means = gmm.means @ r.T + transform.t
    covs = np.einsum("ab,kbc,dc->kad", r, gmm.covariances, r)
    return means, covs


def d2d_l2(source: GaussianMixture, target: GaussianMixture, transform: RigidTransform) -> float:
    """Full L2 distance ``integral (source_T - target)^2`` between mixtures.

    Expanded into pairwise Gaussian overlap integrals. The source self-term
    is constant under rigid motion but kept so the value is a true squared
    distance: zero iff the densities coincide, symmetric at identity.
    """
    ma, ca = _transformed_components(source, transform)
    wa, wb = source.weights, target.weights
    mb, cb = target.means, target.covariances
    return (
        _pairwise_overlap(wa, ma, ca, wa, ma, ca)
        + _pairwise_overlap(wb, mb, cb, wb, mb, cb)
        - 2.0 * _pairwise_overlap(wa, ma, ca, wb, mb, cb)
    )


def numerical_gradient(f, x, h: float | None = None) -> np.ndarray:
    """Central-difference gradient; ``h`` defaults to ``1e-6 * max(1, |x|_inf)``."""
    x = np.asarray(x, dtype=np.float64)
    if h is None:
        h = 1e-6 * max(1.0, float(np.abs(x).max()))
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        hi, lo = f(x + step), f(x - step)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"objective is not finite near x[{i}]")
        grad[i] = (hi - lo) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class MinimizeConfig:
    gtol: float = 1e-8
    ftol: float = 1e-10
    max_iters: int = 200
    grad_step: float | None = None


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool


def _line_search(f, x, p, f0, slope):
    """Backtracking with quadratic interpolation under the Armijo test."""
    c1 = 1e-4
    alpha = 1.0
    f_alpha = f(x + alpha * p)
    for _ in range(60):
        if np.isfinite(f_alpha) and f_alpha <= f0 + c1 * alpha * slope:
            return alpha, f_alpha, True
        if np.isfinite(f_alpha) and f_alpha > f0 + alpha * slope:
            trial = -slope * alpha * alpha / (2.0 * (f_alpha - f0 - alpha * slope))
        else:
            trial = 0.5 * alpha
        alpha = min(max(trial, 0.1 * alpha), 0.5 * alpha)
        if alpha < 1e-20:
            break
        f_alpha = f(x + alpha * p)
    return alpha, f_alpha, False


def minimize(f, x0, config: MinimizeConfig | None = None) -> MinimizeResult:
    """BFGS with backtracking line search.

    Stops when the gradient norm drops below ``gtol``, the relative change
    in f drops below ``ftol``, or ``max_iters`` is reached. A failed line
    search returns the best iterate seen with ``converged=False``. The
    returned value never exceeds ``f(x0)``.
    """
    cfg = config or MinimizeConfig()
    x = np.asarray(x0, dtype=np.float64).copy()
    fx = float(f(x))
    if not np.isfinite(fx):
        raise NumericError("objective is not finite at the starting point")
    g = numerical_gradient(f, x, cfg.grad_step)
    n = x.size
    h_inv = np.eye(n)
    best_x, best_f = x.copy(), fx
    iterations = 0
    converged = False
    first_update = True

    for _ in range(cfg.max_iters):
        gnorm = float(np.linalg.norm(g))
        if gnorm < cfg.gtol:
            converged = True
            break
        p = -h_inv @ g
        slope = float(g @ p)
        if slope >= 0:
            h_inv = np.eye(n)
            first_update = True
            p = -g
            slope = -gnorm * gnorm
        if iterations == 0:
            scale = min(1.0, 1.0 / max(1.0, gnorm))
            p = p * scale
            slope = slope * scale
        alpha, f_new, ok = _line_search(f, x, p, fx, slope)
        if not ok:
            break
        iterations += 1
        x_new = x + alpha * p
        g_new = numerical_gradient(f, x_new, cfg.grad_step)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if first_update:
                h_inv = h_inv * (sy / float(y @ y))
                first_update = False
            hy = h_inv @ y
            h_inv += (
                (sy + float(y @ hy)) * np.outer(s, s) / sy**2
                - (np.outer(hy, s) + np.outer(s, hy)) / sy
            )
        done = abs(f_new - fx) <= cfg.ftol * max(abs(fx), abs(f_new), 1.0)
        x, fx, g = x_new, f_new, g_new
        if fx < best_f:
            best_x, best_f = x.copy(), fx
        if done:
            converged = True
            break

    return MinimizeResult(x=best_x, fun=best_f, iterations=iterations, converged=converged)


def _transform_from_params(params: np.ndarray) -> RigidTransform:
    return RigidTransform(q=params[:4], t=params[4:])


def _params_from_transform(transform: RigidTransform) -> np.ndarray:
    return np.concatenate([transform.q, transform.t])


def _finish_registration(result, ground_truth, diag):
    transform = _transform_from_params(result.x)
    out = RegistrationResult(
        transform=transform,
        final_objective=result.fun,
        iterations=result.iterations,
        converged=result.converged,
    )
    if ground_truth is not None:
        out.rotation_error = rotation_error(transform, ground_truth)
        if diag is not None:
            out.translation_error = translation_error(transform, ground_truth, diag)
    return out


def register_p2d(
    cloud,
    gmm: GaussianMixture,
    init: RigidTransform | None = None,
    ground_truth: RigidTransform | None = None,
    diag: float | None = None,
    config: MinimizeConfig | None = None,
) -> RegistrationResult:
    """Maximize cloud likelihood under ``gmm`` over rigid transforms.

    Optimizes the raw 7-vector (quaternion, translation); the quaternion is
    only normalized inside the objective and in the returned transform.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    cloud = PointCloud(points=pts.reshape(-1, 3))

    def cost(params):
        if np.linalg.norm(params[:4]) < 1e-12:
            return np.inf
        return p2d_objective(cloud, gmm, _transform_from_params(params))

    x0 = _params_from_transform(init if init is not None else RigidTransform.identity())
    result = minimize(cost, x0, config)
    return _finish_registration(result, ground_truth, diag)


def register_d2d(
    source: GaussianMixture,
    target: GaussianMixture,
    init: RigidTransform | None = None,
    ground_truth: RigidTransform | None = None,
    diag: float | None = None,
    config: MinimizeConfig | None = None,
) -> RegistrationResult:
    """Minimize the mixture L2 distance over rigid transforms of ``source``."""

    def cost(params):
        if np.linalg.norm(params[:4]) < 1e-12:
            return np.inf
        return d2d_l2(source, target, _transform_from_params(params))

    x0 = _params_from_transform(init if init is not None else RigidTransform.identity())
    result = minimize(cost, x0, config)
    return _finish_registration(result, ground_truth, diag)


@dataclass(frozen=True)
class IcpConfig:
    max_iters: int = 50_000
    tol: float = 1e-9


def _kabsch(source: np.ndarray, matched: np.ndarray):
    sc, mc = source.mean(axis=0), matched.mean(axis=0)
    h = (source - sc).T @ (matched - mc)
    u, sing, vt = np.linalg.svd(h)
    if sing[0] <= 0 or sing[1] <= 1e-12 * sing[0]:
        return None
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, mc - rot @ sc


def register_icp(source, target, config: IcpConfig | None = None,
                 init: RigidTransform | None = None) -> RegistrationResult:
    """Point-to-point ICP: nearest neighbors then closed-form rigid update.

    The mean squared matching error is non-increasing because both steps
    exactly minimize it; iteration stops once its improvement falls below
    ``tol``. Degenerate correspondences (rank < 2 cross-covariance) end the
    loop with ``converged=False``.
    """
    cfg = config or IcpConfig()
    src = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
    tgt = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)
    src = src.reshape(-1, 3)
    tgt = tgt.reshape(-1, 3)
    if len(src) == 0 or len(tgt) == 0:
        raise ValidationError("ICP requires non-empty source and target clouds")

    tree = cKDTree(tgt)
    transform = init if init is not None else RigidTransform.identity()
    prev_err = np.inf
    err = np.inf
    iterations = 0
    converged = False
    for _ in range(cfg.max_iters):
        moved = apply(transform, src)
        dist, idx = tree.query(moved)
        err = float(np.mean(dist**2))
        if prev_err - err < cfg.tol:
            converged = True
            break
        prev_err = err
        solved = _kabsch(src, tgt[idx])
        if solved is None:
            break
        rot, t = solved
        transform = RigidTransform.from_matrix(rot, t)
        iterations += 1

    return RegistrationResult(
        transform=transform,
        final_objective=err,
        iterations=iterations,
        converged=converged,
    )


def rotation_error(a: RigidTransform, b: RigidTransform) -> float:
    """Angle in radians of the relative rotation, in [0, pi]."""
    rel = _quat_multiply(a.q, b.q * np.array([1.0, -1.0, -1.0, -1.0]))
    return float(2.0 * math.atan2(np.linalg.norm(rel[1:]), abs(rel[0])))


def translation_error(a: RigidTransform, b: RigidTransform, diag: float) -> float:
    """Translation gap as a percentage of a reference diagonal length."""
    if diag <= 0:
        raise ValidationError(f"diag must be > 0, got {diag}")
    return float(np.linalg.norm(a.t - b.t) / diag * 100.0)
