"""Numerical primitives shared by the learners.

L-BFGS with Armijo backtracking, k-means with k-means++ seeding, PCA via the
covariance eigendecomposition, and a central-difference gradient checker.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

ObjectiveFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass
class LbfgsParams:
    max_iters: int = 200
    memory: int = 10
    grad_tol: float = 1e-6
    c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 50

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("L-BFGS memory must be >= 1")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")


class LbfgsResult(NamedTuple):
    x: np.ndarray
    value: float
    iters: int
    converged: bool
    degraded: bool
    history: list


def lbfgs_minimize(f: ObjectiveFn, x0, params: LbfgsParams | None = None) -> LbfgsResult:
    """Minimize ``f`` from ``x0`` with limited-memory BFGS.

    ``f`` returns ``(value, gradient)``. Every accepted step satisfies the
    Armijo condition, so ``history`` (objective after each accepted step,
    starting with the value at ``x0``) is non-increasing. If 50 consecutive
    backtracks fail along both the quasi-Newton and the steepest-descent
    direction, the best point is returned with ``degraded=True``.
    """
    params = params or LbfgsParams()
    x = np.array(x0, dtype=np.float64).ravel().copy()
    fx, g = f(x)
    fx = float(fx)
    g = np.asarray(g, dtype=np.float64).ravel()
    if not np.isfinite(fx):
        raise FloatingPointError("objective is not finite at the starting point")
    history = [fx]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    degraded = False

    it = 0
    while it < params.max_iters:
        if np.max(np.abs(g)) <= params.grad_tol:
            return LbfgsResult(x, fx, it, True, False, history)

        d = _two_loop(g, s_hist, y_hist)
        gd = float(g @ d)
        if not gd < 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
            gd = float(g @ d)

        if not s_hist:
            step = min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12))
        else:
            step = 1.0
        accepted = _armijo(f, x, fx, d, gd, step, params)
        if accepted is None and s_hist:
            # quasi-Newton direction was useless, retry along -g
            s_hist.clear()
            y_hist.clear()
            d = -g
            gd = float(g @ d)
            accepted = _armijo(f, x, fx, d, gd, min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12)), params)
        if accepted is None:
            degraded = True
            break

        x_new, f_new, g_new = accepted
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(y @ y) and sy > 0:
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > params.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, fx, g = x_new, f_new, g_new
        history.append(fx)
        it += 1

    converged = bool(np.max(np.abs(g)) <= params.grad_tol)
    return LbfgsResult(x, fx, it, converged, degraded, history)


def _two_loop(g, s_hist, y_hist):
    q = -g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def _armijo(f, x, fx, d, gd, step, params):
    for _ in range(params.max_backtracks):
        x_new = x + step * d
        f_new, g_new = f(x_new)
        f_new = float(f_new)
        if np.isfinite(f_new) and f_new <= fx + params.c1 * step * gd:
            return x_new, f_new, np.asarray(g_new, dtype=np.float64).ravel()
        step *= params.backtrack
    return None


def check_gradient(f: ObjectiveFn, x, eps: float = 1e-5) -> float:
    """Max over coordinates of |g_fd - g| / max(1, |g_fd|, |g|)."""
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    x = np.array(x, dtype=np.float64).ravel()
    _, g = f(x.copy())
    g = np.asarray(g, dtype=np.float64).ravel()
    worst = 0.0
    for k in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[k] += eps
        xm[k] -= eps
        fd = (f(xp)[0] - f(xm)[0]) / (2 * eps)
        err = abs(fd - g[k]) / max(1.0, abs(fd), abs(g[k]))
        worst = max(worst, err)
    return worst


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignment: np.ndarray
    sse_history: list = field(default_factory=list)


def _assign(data, centers, chunk=4096):
    n = data.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for s in range(0, n, chunk):
        d = sq_distances(data[s:s + chunk], centers)
        idx[s:s + chunk] = np.argmin(d, axis=1)
        dist[s:s + chunk] = d[np.arange(d.shape[0]), idx[s:s + chunk]]
    return idx, dist


def kmeans(data, k: int, iters: int = 50, rng_seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its center.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n < k:
        raise ValueError(f"kmeans needs at least k={k} points, got {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(rng_seed)

    centers = np.empty((k, data.shape[1]))
    first = int(rng.integers(n))
    centers[0] = data[first]
    closest = sq_distances(data, centers[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than k; duplicates are fine
            pick = int(rng.integers(n))
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centers[c] = data[pick]
        closest = np.minimum(closest, sq_distances(data, centers[c:c + 1])[:, 0])

    assign, dist = _assign(data, centers)
    history = [float(dist.sum())]
    for _ in range(iters):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, data)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for c in np.flatnonzero(~nonempty):
            far = int(np.argmax(dist))
            centers[c] = data[far]
            dist[far] = 0.0
        new_assign, dist = _assign(data, centers)
        history.append(float(dist.sum()))
        if np.array_equal(new_assign, assign) and nonempty.all():
            assign = new_assign
            break
        assign = new_assign
    return KMeansResult(centers, assign, history)


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(data, k: int) -> PcaModel:
    data = np.asarray(data, dtype=np.float64)
    n, dim = data.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 samples")
    if k > min(n - 1, dim) or k < 1:
        raise ValueError(f"k={k} too large for {n} samples of dimension {dim}")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order].T.copy()
    # sign convention: largest-magnitude entry positive
    flip = comps[np.arange(k), np.argmax(np.abs(comps), axis=1)] < 0
    comps[flip] *= -1
    return PcaModel(mean, comps, vals[order].clip(min=0.0))


def pca_transform(model: PcaModel, x) -> np.ndarray:
    """Project a vector (or rows of a matrix) onto the principal components."""
    x = np.asarray(x, dtype=np.float64)
    return (x - model.mean) @ model.components.T
