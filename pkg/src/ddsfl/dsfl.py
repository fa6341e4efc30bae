"""Single-layer discriminative and shareable filter-bank learning.

Features are ``f = |W x|``. The W-step minimizes

    L_u(W) + gamma * sum_c L_sha^c(W) + eta * sum_c L_dis^c(W)

with L-BFGS while the per-class selection masks stay fixed; the mask step
greedily activates filters for one class at a time with W fixed.

Shapes: ``W`` is D x D0 (one filter per row), data matrices hold one patch
per row.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .mathkit import LbfgsParams, lbfgs_minimize, sq_distances

log = logging.getLogger(__name__)


@dataclass
class LayerHyperparams:
    xi: float = 0.1
    lambda1: float = 0.01
    lambda2: float = 1.0
    gamma: float = 1.0
    eta: float = 0.1
    delta: float = 1.0
    k: int = 5
    m: int = 3
    nn_refresh_period: int = 50
    greedy_tol: float = 1e-3
    max_active: int | None = None
    outer_rounds: int = 5
    warm_iters: int = 100
    w_iters: int = 100

    def __post_init__(self):
        for name in ("xi", "lambda1", "lambda2", "gamma", "eta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class FilterBank:
    w: np.ndarray
    layer_idx: int = 1

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2 or min(self.w.shape) < 1:
            raise ValueError("filter bank must be a non-empty D x D0 matrix")
        if not np.all(np.isfinite(self.w)):
            raise FloatingPointError("non-finite filter weights")

    @property
    def num_filters(self) -> int:
        return self.w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w.shape[1]


@dataclass
class TripletCache:
    """Nearest-neighbour triplets per exemplar.

    Row j of ``pos``/``neg`` holds indices (into the stacked exemplar matrix)
    of exemplar j's K nearest same-class / other-class exemplars.
    """

    pos: np.ndarray
    neg: np.ndarray

    @property
    def k(self) -> int:
        return self.pos.shape[1]


@dataclass
class TrainBatch:
    x_all: np.ndarray
    x_ex: np.ndarray
    y_ex: np.ndarray
    num_classes: int
    omega: np.ndarray | None = None  # N x M x D0 neighbour patches of x_all

    def __post_init__(self):
        self.x_all = np.asarray(self.x_all, dtype=np.float64)
        self.x_ex = np.asarray(self.x_ex, dtype=np.float64)
        self.y_ex = np.asarray(self.y_ex, dtype=np.int64)
        if self.x_all.shape[1] != self.x_ex.shape[1]:
            raise ValueError("x_all and x_ex dimensions differ")
        if len(self.x_ex) != len(self.y_ex):
            raise ValueError("one label per exemplar required")
        if self.omega is not None:
            self.omega = np.asarray(self.omega, dtype=np.float64)
            if self.omega.shape[0] != len(self.x_all) or self.omega.shape[2] != self.x_all.shape[1]:
                raise ValueError("omega must be N x M x D0")

    def class_rows(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.y_ex == c)


def _w(W) -> np.ndarray:
    return W.w if isinstance(W, FilterBank) else np.asarray(W, dtype=np.float64)


def transform(W, x) -> np.ndarray:
    """abs(W x) for a vector, or row-wise for a matrix."""
    w = _w(W)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"input dimension {x.shape[-1]} does not match filters ({w.shape[1]})")
    return np.abs(x @ w.T)


def _recon(w, x):
    """||X - X W^T W||^2 and its gradient with respect to W."""
    z = x @ w.T
    r = x - z @ w
    value = float((r * r).sum())
    grad = -2.0 * (z.T @ r + (r @ w.T).T @ x)
    return value, grad


def cost_unsupervised(W, x_all, omega, hp: LayerHyperparams):
    w = _w(W)
    x = np.asarray(x_all, dtype=np.float64)
    value, grad = _recon(w, x)
    z = x @ w.T
    f = np.abs(z)
    sz = np.sign(z)
    if hp.lambda1:
        value += hp.lambda1 * float(f.sum())
        grad += hp.lambda1 * (sz.T @ x)
    if hp.xi and omega is not None and omega.shape[1] > 0:
        m = omega.shape[1]
        zo = omega @ w.T
        diff = f[:, None, :] - np.abs(zo)
        sd = np.sign(diff)
        value += hp.xi / m * float(np.abs(diff).sum())
        g = (sd.sum(axis=1) * sz).T @ x
        g -= np.einsum("nmd,nmk->dk", sd * np.sign(zo), omega)
        grad += hp.xi / m * g
    return value, grad


def cost_shareable(W, alpha, x_c, lambda2: float = 0.0):
    """Reconstruction of one class's exemplars through its selected filters.

    ``lambda2 * |alpha|_0`` is added only when ``lambda2`` is passed (mask
    step); it never contributes to the gradient.
    """
    w = _w(W)
    alpha = np.asarray(alpha, dtype=np.float64)
    wc = alpha[:, None] * w
    value, grad = _recon(wc, np.asarray(x_c, dtype=np.float64))
    return value + lambda2 * float(np.count_nonzero(alpha)), alpha[:, None] * grad


def cost_discriminative(W, alpha, x_ex, y_ex, cache: TripletCache, c: int, hp: LayerHyperparams):
    """Triplet hinge for the exemplars of class ``c`` in its masked feature space."""
    w = _w(W)
    alpha = np.asarray(alpha, dtype=np.float64)
    x_ex = np.asarray(x_ex, dtype=np.float64)
    anchors = np.flatnonzero(np.asarray(y_ex) == c)
    if len(anchors) == 0:
        return 0.0, np.zeros_like(w)
    wc = alpha[:, None] * w
    z = x_ex @ wc.T
    f = np.abs(z)
    pos, neg = cache.pos[anchors], cache.neg[anchors]
    k = pos.shape[1]
    dp = f[anchors, None, :] - f[pos]
    dn = f[anchors, None, :] - f[neg]
    h = hp.delta + (dp * dp).sum(axis=(1, 2)) / k - (dn * dn).sum(axis=(1, 2)) / k
    active = h > 0
    value = float(h[active].sum())
    if not active.any():
        return value, np.zeros_like(w)
    a = anchors[active]
    dp, dn = dp[active] * (2.0 / k), dn[active] * (2.0 / k)
    df = np.zeros_like(f)
    np.add.at(df, a, dp.sum(axis=1) - dn.sum(axis=1))
    np.add.at(df, pos[active].ravel(), -dp.reshape(-1, f.shape[1]))
    np.add.at(df, neg[active].ravel(), dn.reshape(-1, f.shape[1]))
    grad = (df * np.sign(z)).T @ x_ex
    return value, alpha[:, None] * grad


def w_objective(W, alphas, batch: TrainBatch, cache: TripletCache | None, hp: LayerHyperparams):
    """The W-step objective (no L0 term) and its gradient."""
    w = _w(W)
    value, grad = cost_unsupervised(w, batch.x_all, batch.omega, hp)
    for c in range(batch.num_classes):
        if hp.gamma:
            v, g = cost_shareable(w, alphas[c], batch.x_ex[batch.class_rows(c)])
            value += hp.gamma * v
            grad += hp.gamma * g
        if hp.eta and cache is not None:
            v, g = cost_discriminative(w, alphas[c], batch.x_ex, batch.y_ex, cache, c, hp)
            value += hp.eta * v
            grad += hp.eta * g
    return value, grad


def full_objective(W, alphas, batch: TrainBatch, cache: TripletCache | None, hp: LayerHyperparams) -> float:
    """Complete objective including gamma * lambda2 * sum_c |alpha^c|_0."""
    value, _ = w_objective(W, alphas, batch, cache, hp)
    return value + hp.gamma * hp.lambda2 * float(np.count_nonzero(alphas))


def refresh_triplets(W, alphas, x_ex, y_ex, k: int, num_classes: int | None = None) -> TripletCache:
    """K nearest same-class and other-class exemplars of every exemplar.

    Distances are taken between features under the anchor's own class mask;
    ties are broken by the lower index.
    """
    w = _w(W)
    x_ex = np.asarray(x_ex, dtype=np.float64)
    y_ex = np.asarray(y_ex, dtype=np.int64)
    n = len(y_ex)
    c_count = int(num_classes if num_classes is not None else y_ex.max() + 1)
    sizes = np.bincount(y_ex, minlength=c_count)
    present = sizes[sizes > 0]
    k_eff = int(min(k, present.min() - 1, (n - present).min()))
    if k_eff < k:
        warnings.warn(f"triplet K clamped from {k} to {k_eff} by class size", RuntimeWarning, stacklevel=2)
    if k_eff < 1:
        raise ValueError("every class needs at least two exemplars")
    z = x_ex @ w.T
    pos = np.zeros((n, k_eff), dtype=np.int64)
    neg = np.zeros((n, k_eff), dtype=np.int64)
    for c in range(c_count):
        anchors = np.flatnonzero(y_ex == c)
        if len(anchors) == 0:
            continue
        f = np.abs(z * np.asarray(alphas[c], dtype=np.float64))
        d = sq_distances(f[anchors], f)
        same = y_ex == c
        dpos = np.where(same[None, :], d, np.inf)
        dpos[np.arange(len(anchors)), anchors] = np.inf
        dneg = np.where(same[None, :], np.inf, d)
        pos[anchors] = np.argsort(dpos, axis=1, kind="stable")[:, :k_eff]
        neg[anchors] = np.argsort(dneg, axis=1, kind="stable")[:, :k_eff]
    return TripletCache(pos, neg)


# ------------------------------------------------------------------ mask step

@dataclass
class GreedyTrace:
    chosen: list = field(default_factory=list)
    sha: list = field(default_factory=list)
    objective: list = field(default_factory=list)


def _dis_tables(w, batch: TrainBatch, cache, c):
    """Per-filter contributions to the positive/negative patch-to-class distances."""
    anchors = batch.class_rows(c)
    f = np.abs(batch.x_ex @ w.T)
    pos, neg = cache.pos[anchors], cache.neg[anchors]
    p = ((f[anchors, None, :] - f[pos]) ** 2).mean(axis=1)
    q = ((f[anchors, None, :] - f[neg]) ** 2).mean(axis=1)
    return p - q


def mask_objective(W, alpha, batch: TrainBatch, cache, c: int, hp: LayerHyperparams) -> float:
    """Mask-step objective for class c: L_sha + lambda2 |alpha|_0 + eta L_dis."""
    x_c = batch.x_ex[batch.class_rows(c)]
    value = cost_shareable(W, alpha, x_c, hp.lambda2)[0]
    if hp.eta and cache is not None:
        value += hp.eta * cost_discriminative(W, alpha, batch.x_ex, batch.y_ex, cache, c, hp)[0]
    return value


def greedy_select_alpha(W, batch: TrainBatch, cache: TripletCache | None, c: int, hp: LayerHyperparams,
                        trace: GreedyTrace | None = None) -> np.ndarray:
    """Forward greedy choice of the filters class ``c`` activates.

    Starting from the empty mask, add the single filter that most lowers the
    mask objective. Stop when no filter lowers it, when the best addition
    would raise the reconstruction term, when the relative reconstruction
    decrease drops below ``greedy_tol`` or when ``max_active`` filters are on.
    The first filter is always added.
    """
    w = _w(W)
    d_count = w.shape[0]
    max_active = hp.max_active if hp.max_active is not None else max(1, d_count // 4)
    x_c = batch.x_ex[batch.class_rows(c)]
    z = x_c @ w.T
    gram = w @ w.T
    z2 = z * z
    base_sha = float((x_c * x_c).sum())
    use_dis = bool(hp.eta) and cache is not None
    pq = _dis_tables(w, batch, cache, c) if use_dis else None

    alpha = np.zeros(d_count)
    sha = base_sha
    margin = np.full(len(x_c), hp.delta)
    obj = sha + (hp.eta * float(np.maximum(margin, 0).sum()) if use_dis else 0.0)
    while np.count_nonzero(alpha) < max_active:
        u = (z * alpha) @ gram
        delta_sha = (-2.0 * z2 + 2.0 * z * u + np.diag(gram)[None, :] * z2).sum(axis=0)
        cand = sha + delta_sha + hp.lambda2 * (np.count_nonzero(alpha) + 1)
        if use_dis:
            cand = cand + hp.eta * np.maximum(margin[:, None] + pq, 0.0).sum(axis=0)
        cand[alpha > 0] = np.inf
        e = int(np.argmin(cand))
        new_sha = sha + float(delta_sha[e])
        first = not alpha.any()
        if not first and (cand[e] >= obj or new_sha > sha):
            break
        alpha[e] = 1.0
        if use_dis:
            margin = margin + pq[:, e]
        rel = (sha - new_sha) / sha if sha > 0 else 0.0
        sha, obj = new_sha, float(cand[e])
        if trace is not None:
            trace.chosen.append(e)
            trace.sha.append(sha)
            trace.objective.append(obj)
        if sha <= 0 or (not first and rel < hp.greedy_tol):
            break
    return alpha


# ------------------------------------------------------------------ W step

@dataclass
class StepInfo:
    iters: int = 0
    refreshes: int = 0
    degraded: bool = False
    history: list = field(default_factory=list)


def step_W(W, alphas, batch: TrainBatch, cache, hp: LayerHyperparams, lbfgs_params: LbfgsParams | None = None,
           refresh: bool = True):
    """L-BFGS on the W-step objective with the masks fixed.

    The triplet cache is rebuilt every ``nn_refresh_period`` accepted
    iterations when ``refresh`` is set; the solver restarts after each
    rebuild. Returns ``(FilterBank, cache, StepInfo)``.
    """
    w0 = _w(W)
    shape = w0.shape
    params = lbfgs_params or LbfgsParams(max_iters=hp.w_iters)
    budget = params.max_iters
    info = StepInfo()
    x = w0.ravel().copy()
    use_refresh = refresh and hp.eta > 0 and cache is not None
    while budget > 0:
        chunk = min(budget, hp.nn_refresh_period) if use_refresh else budget

        def fn(theta, cache=cache):
            v, g = w_objective(theta.reshape(shape), alphas, batch, cache, hp)
            return v, g.ravel()

        res = lbfgs_minimize(fn, x, replace(params, max_iters=chunk))
        x = res.x
        info.iters += res.iters
        info.history.extend(res.history if not info.history else res.history[1:])
        budget -= res.iters
        if res.degraded:
            info.degraded = True
            break
        if res.iters == 0 or res.converged and not use_refresh:
            break
        if use_refresh and budget > 0:
            cache = refresh_triplets(x.reshape(shape), alphas, batch.x_ex, batch.y_ex, cache.k, batch.num_classes)
            info.refreshes += 1
        if res.converged:
            break
    layer_idx = W.layer_idx if isinstance(W, FilterBank) else 1
    return FilterBank(x.reshape(shape), layer_idx), cache, info


# ------------------------------------------------------------------ alternation

@dataclass
class LayerResult:
    filter_bank: FilterBank
    masks: np.ndarray
    history: list
    mask_history: list
    cache: TripletCache | None
    rounds: int
    converged: bool


def init_filters(d: int, d0: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.1, size=(d, d0))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def train_layer(batch: TrainBatch, hp: LayerHyperparams, d: int, seed: int = 0, layer_idx: int = 1) -> LayerResult:
    """Warm-start W on the unsupervised term, then alternate mask and W steps.

    Mask updates are kept only if they do not raise the class's share of the
    full objective, and a W-step whose refreshed triplets would raise the
    objective is redone with the previous triplets, so the recorded objective
    never increases between rounds.
    """
    w = init_filters(d, batch.x_all.shape[1], seed)
    c_count = batch.num_classes
    hp0 = replace(hp, gamma=0.0, eta=0.0)
    if hp.warm_iters > 0:
        fb, _, _ = step_W(w, np.zeros((c_count, d)), batch, None, hp0, LbfgsParams(max_iters=hp.warm_iters))
        w = fb.w

    use_dis = hp.eta > 0
    cache = refresh_triplets(w, np.ones((c_count, d)), batch.x_ex, batch.y_ex, hp.k, c_count) if use_dis else None
    alphas = np.zeros((c_count, d))
    obj = full_objective(w, alphas, batch, cache, hp)
    history = [obj]
    mask_history = [alphas.copy()]
    converged = False
    rounds = 0

    def block(a, c, w_, cache_):
        x_c = batch.x_ex[batch.class_rows(c)]
        v = hp.gamma * cost_shareable(w_, a, x_c, hp.lambda2)[0]
        if use_dis:
            v += hp.eta * cost_discriminative(w_, a, batch.x_ex, batch.y_ex, cache_, c, hp)[0]
        return v

    for rnd in range(hp.outer_rounds):
        rounds = rnd + 1
        new_alphas = alphas.copy()
        for c in range(c_count):
            cand = greedy_select_alpha(w, batch, cache, c, hp)
            if not alphas[c].any() or block(cand, c, w, cache) <= block(alphas[c], c, w, cache):
                new_alphas[c] = cand

        fresh = refresh_triplets(w, new_alphas, batch.x_ex, batch.y_ex, hp.k, c_count) if use_dis else None
        fb, new_cache, _ = step_W(w, new_alphas, batch, fresh, hp, LbfgsParams(max_iters=hp.w_iters))
        new_obj = full_objective(fb.w, new_alphas, batch, new_cache, hp)
        if use_dis and new_obj > obj:
            log.debug("round %d: refreshed triplets raised the objective, redoing W-step", rounds)
            fb, new_cache, _ = step_W(w, new_alphas, batch, cache, hp, LbfgsParams(max_iters=hp.w_iters),
                                      refresh=False)
            new_obj = full_objective(fb.w, new_alphas, batch, new_cache, hp)

        same_masks = np.array_equal(new_alphas, alphas)
        rel = (obj - new_obj) / max(abs(obj), 1e-300)
        w, alphas, cache = fb.w, new_alphas, new_cache
        history.append(new_obj)
        mask_history.append(alphas.copy())
        log.info("layer %d round %d: objective %.6g, active filters %s", layer_idx, rounds, new_obj,
                 np.count_nonzero(alphas, axis=1).tolist())
        obj = new_obj
        if same_masks and rel < 1e-4:
            converged = True
            break
    return LayerResult(FilterBank(w, layer_idx), alphas, history, mask_history, cache, rounds, converged)
