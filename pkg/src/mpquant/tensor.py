"""Dense numeric kernels shared by every other module.

Tensors are numpy arrays: float32, C-contiguous, rank 1 to 3.  Kernels that
feed verification paths (quantile, singular values, statistics) compute in
float64 internally and return plain floats.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class DomainError(ValueError):
    """Input values are outside the operation's domain."""


class NumericError(ArithmeticError):
    """An iterative routine failed to converge; carries the residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class DegenerateClusters(ValueError):
    """Fewer distinct values than requested clusters."""


def matmul(a: np.ndarray, b: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Matrix product of two rank-2 tensors.

    dtype selects the accumulation path: float32 for production use,
    float64 for verification.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a.astype(dtype, copy=False) @ b.astype(dtype, copy=False)


def quantile(v: np.ndarray, p: float) -> float:
    """Linear-interpolation quantile of a rank-1 tensor.

    Sorts ascending and interpolates at h = (n - 1) * p, the usual
    interpolation convention.
    """
    v = np.asarray(v)
    if v.ndim != 1:
        raise DimensionError("quantile expects a rank-1 tensor")
    if v.size == 0:
        raise DomainError("quantile of an empty tensor")
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"quantile position {p} outside [0, 1]")
    s = np.sort(v.astype(np.float64))
    h = (s.size - 1) * float(p)
    lo = int(np.floor(h))
    hi = int(np.ceil(h))
    return float(s[lo] + (h - lo) * (s[hi] - s[lo]))


_SVD_ITER_CAP = 1000
_SVD_TOL = 1e-10
_JACOBI_SWEEP_CAP = 100


def _jacobi_top_eigenvalue(g: np.ndarray) -> float:
    """Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.

    Convergence is dimension-independent and insensitive to eigenvalue
    clustering, which is where plain power iteration stalls.
    """
    a = g.copy()
    n = a.shape[0]
    scale = float(np.max(np.abs(np.diag(a)))) or 1.0
    for _ in range(_JACOBI_SWEEP_CAP):
        strict = np.abs(a - np.diag(np.diag(a)))
        if float(strict.max()) <= 1e-14 * scale:
            return float(np.max(np.diag(a)))
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(1.0 + theta * theta))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                rp, rq = a[p].copy(), a[q].copy()
                a[p] = c * rp - s * rq
                a[q] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
    residual = float(np.max(np.abs(a - np.diag(np.diag(a)))))
    raise NumericError("jacobi eigensolve did not converge", residual)


def svd_top(m: np.ndarray) -> float:
    """Largest singular value of a rank-2 tensor.

    Power iteration on the gram matrix in float64 with a deterministic start
    vector, stopping when the Rayleigh quotient is stable to 1e-10 (relative)
    within 1000 iterations.  A stable quotient is only trusted when the
    eigen-residual certifies it: clustered top singular values let the
    quotient stagnate inside the cluster, below the true maximum.  Uncertified
    or cap-exhausted runs fall through to a cyclic Jacobi eigensolve;
    NumericError (carrying the residual) is raised only if that also fails.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError("svd_top expects a rank-2 tensor")
    if not np.all(np.isfinite(m)):
        raise DomainError("svd_top requires finite entries")
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    p = gram.shape[0]
    # Deterministic start with all components nonzero; cos(i) never hits -1
    # at integer arguments so this cannot be orthogonal to a basis vector.
    v = 1.0 + np.cos(np.arange(p, dtype=np.float64))
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    for _ in range(_SVD_ITER_CAP):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0  # null matrix: converged immediately
        v = w / norm
        gv = gram @ v
        lam = float(v @ gv)
        if abs(lam - lam_prev) <= _SVD_TOL * max(1.0, abs(lam)):
            residual = float(np.linalg.norm(gv - lam * v))
            if residual <= 1e-8 * max(1.0, abs(lam)):
                return float(np.sqrt(max(lam, 0.0)))
            break
        lam_prev = lam
    return float(np.sqrt(max(_jacobi_top_eigenvalue(gram), 0.0)))


_KMEANS_ITER_CAP = 100
_KMEANS_TOL = 1e-9


def _sse(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sum((points - centroids[labels]) ** 2))


def _lloyd(points: np.ndarray, centroids: np.ndarray):
    """Lloyd iterations from given centroids; yields (labels, centroids, sse).

    Assignment ties go to the lowest centroid index.  An emptied cluster is
    reseeded with the point farthest from its assigned centroid.
    """
    centroids = centroids.astype(np.float64).copy()
    for _ in range(_KMEANS_ITER_CAP):
        dist = np.abs(points[:, None] - centroids[None, :])
        labels = np.argmin(dist, axis=1)
        new = centroids.copy()
        for c in range(centroids.size):
            members = points[labels == c]
            if members.size:
                new[c] = members.mean()
            else:
                worst = int(np.argmax(np.abs(points - centroids[labels])))
                new[c] = points[worst]
        move = float(np.max(np.abs(new - centroids)))
        centroids = new
        yield labels, centroids.copy(), _sse(points, centroids, labels)
        if move < _KMEANS_TOL:
            return


def kmeans(points: np.ndarray, k: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """1-D k-means with k-means++ seeding; returns (labels, centroids).

    Centroids come back in seeding order, not sorted; callers impose their
    own ordering.
    """
    points = np.asarray(points, dtype=np.float64).ravel()
    n = points.size
    if k < 1:
        raise DomainError("k must be at least 1")
    if n < k:
        raise DomainError(f"need at least {k} points, got {n}")
    if np.unique(points).size < k:
        raise DegenerateClusters(f"{np.unique(points).size} distinct values < k={k}")

    centroids = np.empty(k, dtype=np.float64)
    centroids[0] = points[rng.randint(n)]
    for c in range(1, k):
        d2 = np.min((points[:, None] - centroids[None, :c]) ** 2, axis=1)
        total = float(d2.sum())
        r = rng.uniform() * total
        idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
        centroids[c] = points[min(idx, n - 1)]

    labels = np.zeros(n, dtype=np.int64)
    for labels, centroids, _ in _lloyd(points, centroids):
        pass
    return labels, centroids


def stats(v: np.ndarray) -> tuple[float, float, float, float]:
    """(mean, population std, min, max) of a rank-1 tensor, float64 path."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise DimensionError("stats expects a rank-1 tensor")
    if v.size == 0:
        raise DomainError("stats of an empty tensor")
    x = v.astype(np.float64)
    mean = float(x.mean())
    std = float(np.sqrt(np.mean((x - mean) ** 2)))
    return mean, std, float(x.min()), float(x.max())
