"""Least-squares plane fitting by SVD, the gradient of the smallest singular
value, and RANSAC plane estimation.

Points are passed as ``(N, 3)`` float arrays (anything ``np.asarray`` accepts).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

JACOBI_MAX_SWEEPS = 30
JACOBI_TOL = 1e-14
DEGENERATE_SIGMA = 1e-12
DEFAULT_GAP = 1e-8


@dataclass(frozen=True)
class PlaneFit:
    centroid: np.ndarray
    normal: np.ndarray
    sigma3: float
    singular_values: np.ndarray  # descending

    def distances(self, points) -> np.ndarray:
        """Signed point-to-plane distances."""
        return (np.asarray(points, dtype=float) - self.centroid) @ self.normal


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 256
    inlier_threshold: float = 0.05
    min_inlier_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0 < self.min_inlier_fraction <= 1:
            raise ValueError("min_inlier_fraction must be in (0, 1]")


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts[None, :]
    if pts.size == 0:
        raise ValueError("empty point set")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


def barycenter(points) -> np.ndarray:
    return _as_points(points).mean(axis=0)


def jacobi_eigh3(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching eigenvectors as
    columns.
    """
    a = np.array(m, dtype=float)
    v = np.eye(3)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(JACOBI_MAX_SWEEPS):
        off = abs(a[0, 1]) + abs(a[0, 2]) + abs(a[1, 2])
        if off <= JACOBI_TOL * scale:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            if abs(theta) > 1e150:
                t = 0.5 / theta  # theta^2 would overflow
            else:
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], v[:, order]


def _orient(normal: np.ndarray) -> np.ndarray:
    # deterministic sign: +z, then +y, then +x
    for axis in (2, 1, 0):
        c = normal[axis]
        if abs(c) > 1e-12:
            return normal if c > 0 else -normal
    return normal


def _centered(points) -> tuple[np.ndarray, np.ndarray]:
    pts = _as_points(points)
    if len(pts) < 3:
        raise ValueError("underdetermined plane: need at least 3 points")
    c = pts.mean(axis=0)
    return pts - c, c


def _fit_centered(a: np.ndarray, centroid: np.ndarray) -> PlaneFit:
    _, vecs = jacobi_eigh3(a.T @ a)
    # ||A v_i|| is far more accurate than sqrt(lambda_i) for near-coplanar sets
    sv = np.linalg.norm(a @ vecs, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, vecs = sv[order], vecs[:, order]
    normal = _orient(vecs[:, 2] / np.linalg.norm(vecs[:, 2]))
    return PlaneFit(centroid=centroid, normal=normal, sigma3=float(sv[2]), singular_values=sv)


def fit_plane(points) -> PlaneFit:
    """Least-squares plane through ``points``.

    The centroid is the barycenter; the normal is the right singular vector of
    the centered point matrix belonging to the smallest singular value.
    """
    a, c = _centered(points)
    return _fit_centered(a, c)


def sigma3_with_gradient(points, gap: float = DEFAULT_GAP) -> tuple[float, np.ndarray]:
    """Smallest singular value of the centered points and its gradient.

    Returns ``(sigma3, grad)`` with ``grad[k] = d sigma3 / d points[k]``.
    Exactly coplanar input (sigma3 below 1e-12) gets a zero gradient, which is
    a valid subgradient at the minimum. ``gap`` only controls the
    ill-conditioning test in :func:`is_ill_conditioned`.
    """
    a, c = _centered(points)
    fit = _fit_centered(a, c)
    n = len(a)
    if fit.sigma3 < DEGENERATE_SIGMA:
        return fit.sigma3, np.zeros((n, 3))
    v3 = fit.normal
    u3 = (a @ v3) / fit.sigma3
    # chain rule through the centering map p_k -> p_k - mean(p)
    coeff = u3 - u3.sum() / n
    return fit.sigma3, coeff[:, None] * v3[None, :]


def is_ill_conditioned(fit: PlaneFit, gap: float = DEFAULT_GAP) -> bool:
    s = fit.singular_values
    return bool(s[1] - s[2] < gap)


def ransac_plane(points, params: RansacParams | None = None, return_inliers: bool = False):
    """Plane estimate robust to outliers.

    Draws ``params.iterations`` random 3-point hypotheses, keeps the one with
    the most points within ``inlier_threshold`` and refits the plane on that
    inlier set.
    """
    params = params or RansacParams()
    pts = _as_points(points)
    n = len(pts)
    if n < 3:
        raise ValueError("underdetermined plane: need at least 3 points")
    rng = np.random.default_rng(params.seed)

    idx = np.stack([rng.choice(n, size=3, replace=False) for _ in range(params.iterations)])
    p0, p1, p2 = pts[idx[:, 0]], pts[idx[:, 1]], pts[idx[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(normals, axis=1)
    valid = norm > 1e-12
    normals[valid] /= norm[valid, None]

    best_count, best_mask = -1, None
    for k in np.flatnonzero(valid):
        mask = np.abs((pts - p0[k]) @ normals[k]) <= params.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask

    if best_mask is None or best_count < params.min_inlier_fraction * n or best_count < 3:
        raise ValueError("no consensus plane")
    fit = fit_plane(pts[best_mask])
    # one refinement pass against the least-squares plane
    mask = np.abs(fit.distances(pts)) <= params.inlier_threshold
    if mask.sum() >= max(3, best_count):
        fit = fit_plane(pts[mask])
        best_mask = mask
    if return_inliers:
        return fit, best_mask
    return fit
