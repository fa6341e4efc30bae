"""Exemplar selection: reaching-score ranking and SVM discriminative clustering."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import svmlite
from .ann import KDForest
from .mathkit import kmeans, sq_distances

log = logging.getLogger(__name__)


@dataclass
class NNSelectConfig:
    m_nn: int = 10
    eps_nn: float = 0.1
    approx: bool = False
    shard_size: int = 4096
    checks: int = 256
    n_trees: int = 4

    def __post_init__(self):
        if self.m_nn < 1:
            raise ValueError("m_nn must be >= 1")
        if not 0 < self.eps_nn <= 1:
            raise ValueError("eps_nn must lie in (0, 1]")


@dataclass
class SVMSelectConfig:
    clusters_per_class: int | None = None  # None -> N_c / 20
    m_svm: int = 10
    eps_svm: int = 3
    max_rounds: int = 5
    min_class_fires: int = 3
    max_negatives: int = 5000
    lambda_reg: float = 1e-2
    epochs: int = 5
    kmeans_iters: int = 20

    def __post_init__(self):
        if not self.m_svm >= self.eps_svm >= 1:
            raise ValueError("need m_svm >= eps_svm >= 1")


@dataclass
class ExemplarSet:
    per_class: list[np.ndarray]
    info: dict = field(default_factory=dict)

    def all_indices(self) -> np.ndarray:
        if not self.per_class:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.per_class).astype(np.int64)

    def to_tsv(self) -> str:
        return "".join(f"{c}\t{int(i)}\n" for c, idx in enumerate(self.per_class) for i in idx)

    @classmethod
    def from_tsv(cls, text: str, num_classes: int | None = None) -> "ExemplarSet":
        rows: dict[int, list[int]] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                c, i = line.split("\t")
                rows.setdefault(int(c), []).append(int(i))
            except ValueError:
                raise ValueError(f"line {lineno}: expected class_id<TAB>patch_index") from None
        n = num_classes if num_classes is not None else (max(rows) + 1 if rows else 0)
        return cls([np.array(rows.get(c, []), dtype=np.int64) for c in range(n)])

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


# ---------------------------------------------------------------- NN based

def coverage_sets(x, m_nn: int, approx: bool = False, *, shard_size: int = 4096,
                  checks: int = 256, n_trees: int = 4, seed: int = 0):
    """M_nn nearest neighbours of every row of ``x`` (self excluded).

    Returns ``(indices, distances)``, both N x M_nn, sorted by (distance, index);
    distances are plain L2. Exact mode scans ``x`` shard by shard and merges the
    per-shard candidates.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n <= m_nn:
        raise ValueError(f"need more than m_nn={m_nn} points, got {n}")
    idx = np.empty((n, m_nn), dtype=np.int64)
    if approx:
        forest = KDForest(x, n_trees=n_trees, seed=seed)
        for i in range(n):
            idx[i] = forest.query(x[i], m_nn, checks=checks, exclude=i)[0]
    else:
        qb = max(1, min(512, shard_size))
        for qs in range(0, n, qb):
            q = x[qs:qs + qb]
            rows = np.arange(qs, qs + len(q))
            cand_i, cand_d = [], []
            for ds in range(0, n, shard_size):
                d = sq_distances(q, x[ds:ds + shard_size])
                local = rows - ds
                inside = (local >= 0) & (local < d.shape[1])
                d[np.flatnonzero(inside), local[inside]] = np.inf
                order = np.argsort(d, axis=1, kind="stable")[:, :m_nn]
                cand_i.append(order + ds)
                cand_d.append(np.take_along_axis(d, order, axis=1))
            ci = np.concatenate(cand_i, axis=1)
            cd = np.concatenate(cand_d, axis=1)
            for r in range(len(q)):
                o = np.lexsort((ci[r], cd[r]))[:m_nn]
                idx[qs + r] = ci[r, o]
    dist = np.sqrt(((x[idx] - x[:, None, :]) ** 2).sum(axis=2))
    return idx, dist


def max_pairwise_distance(x, chunk: int = 2048) -> float:
    x = np.asarray(x, dtype=np.float64)
    best = 0.0
    for s in range(0, len(x), chunk):
        best = max(best, float(sq_distances(x[s:s + chunk], x).max()))
    return math.sqrt(best)


def reaching_scores(x, labels, coverage, num_classes: int | None = None, max_dist: float | None = None):
    """Average, over the other classes, of the mean distance at which each
    patch is reached by that class; a class that never reaches a patch
    contributes the largest pairwise distance in ``x``.

    ``coverage`` is the ``(indices, distances)`` pair from :func:`coverage_sets`.
    """
    labels = np.asarray(labels, dtype=np.int64)
    cov_idx, cov_dist = coverage
    c_count = int(num_classes if num_classes is not None else labels.max() + 1)
    if c_count < 2:
        raise ValueError("reaching scores need at least two classes")
    n = len(labels)
    if max_dist is None:
        max_dist = max_pairwise_distance(x)

    reacher_cls = np.repeat(labels, cov_idx.shape[1])
    target = cov_idx.ravel()
    d = cov_dist.ravel()
    other = reacher_cls != labels[target]
    flat = target[other] * c_count + reacher_cls[other]
    counts = np.bincount(flat, minlength=n * c_count).reshape(n, c_count)
    sums = np.bincount(flat, weights=d[other], minlength=n * c_count).reshape(n, c_count)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, sums / np.maximum(counts, 1), max_dist)
    per_class[np.arange(n), labels] = 0.0
    return per_class.sum(axis=1) / (c_count - 1)


def keep_count(n_c: int, eps: float) -> int:
    return max(1, int(math.floor(eps * n_c + 1e-9)))


def rank_top(scores, labels, num_classes, eps) -> list[np.ndarray]:
    """Per class, indices of the top ``eps`` fraction by descending score;
    ties keep the lower index first."""
    out = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise ValueError(f"class {c} has no patches")
        order = np.lexsort((members, -scores[members]))
        out.append(np.sort(members[order[:keep_count(len(members), eps)]]))
    return out


def nn_select(x, labels, cfg: NNSelectConfig | None = None, num_classes: int | None = None,
              seed: int = 0) -> ExemplarSet:
    cfg = cfg or NNSelectConfig()
    labels = np.asarray(labels, dtype=np.int64)
    c_count = int(num_classes if num_classes is not None else labels.max() + 1)
    cov = coverage_sets(x, cfg.m_nn, cfg.approx, shard_size=cfg.shard_size, checks=cfg.checks,
                        n_trees=cfg.n_trees, seed=seed)
    scores = reaching_scores(x, labels, cov, c_count)
    return ExemplarSet(rank_top(scores, labels, c_count, cfg.eps_nn), {"scores": scores})


# ---------------------------------------------------------------- SVM based

def split_candidates(labels, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into two equal halves, class by class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    a, b = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        half = (len(idx) + 1) // 2
        a.append(idx[:half])
        b.append(idx[half:])
    return np.sort(np.concatenate(a)), np.sort(np.concatenate(b))


@dataclass
class _Cluster:
    cls: int
    members: np.ndarray  # indices into the pooled [train; val] store


def svm_select(x_tr, y_tr, x_val, y_val, cfg: SVMSelectConfig | None = None, seed: int = 0,
               num_classes: int | None = None) -> ExemplarSet:
    """Discriminative clustering of candidate patches with per-cluster linear SVMs.

    Indices in the result refer to the pooled store ``[x_tr; x_val]``. The
    ``info`` dict carries the per-round cluster counts, the surviving clusters
    and, for every dropped cluster, why it was dropped.
    """
    cfg = cfg or SVMSelectConfig()
    x_tr = np.asarray(x_tr, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_tr = np.asarray(y_tr, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    c_count = int(num_classes if num_classes is not None else max(y_tr.max(), y_val.max()) + 1)
    for c in range(c_count):
        if not ((y_tr == c).any() and (y_val == c).any()):
            raise ValueError(f"class {c} needs patches in both halves")

    pool = np.concatenate([x_tr, x_val])
    pool_y = np.concatenate([y_tr, y_val])
    halves = [np.arange(len(x_tr)), len(x_tr) + np.arange(len(x_val))]
    rng = np.random.default_rng(seed)

    clusters: list[_Cluster] = []
    for c in range(c_count):
        members = halves[0][y_tr == c]
        s_c = cfg.clusters_per_class or max(1, len(members) // 20)
        s_c = min(s_c, len(members))
        km = kmeans(pool[members], s_c, cfg.kmeans_iters, rng_seed=int(rng.integers(2**31)))
        for s in range(s_c):
            sel = members[km.assignment == s]
            if len(sel):
                clusters.append(_Cluster(c, sel))

    counts = [len(clusters)]
    dropped: list[dict] = []
    signatures = [[(cl.cls, tuple(cl.members.tolist())) for cl in clusters]]
    for rnd in range(cfg.max_rounds):
        train_half, val_half = halves[rnd % 2], halves[(rnd + 1) % 2]
        survivors = []
        for k, cl in enumerate(clusters):
            neg_pool = train_half[pool_y[train_half] != cl.cls]
            if len(neg_pool) > cfg.max_negatives:
                neg_pool = np.sort(rng.choice(neg_pool, cfg.max_negatives, replace=False))
            model = svmlite.train_binary(pool[cl.members], pool[neg_pool], cfg.lambda_reg, cfg.epochs,
                                         rng_seed=int(rng.integers(2**31)))
            s = svmlite.score(model, pool[val_half])
            fired = s > svmlite.FIRE_THRESHOLD
            fired_cls = pool_y[val_half][fired]
            per_class = np.bincount(fired_cls, minlength=c_count)
            same = np.flatnonzero(fired & (pool_y[val_half] == cl.cls))
            n_classes_fired = int((per_class >= cfg.min_class_fires).sum())
            if len(same) < cfg.eps_svm:
                dropped.append({"round": rnd, "class": cl.cls, "reason": "too_few", "members": cl.members})
                continue
            if n_classes_fired > c_count / 2:
                dropped.append({"round": rnd, "class": cl.cls, "reason": "common", "members": cl.members})
                continue
            top = same[np.lexsort((same, -s[same]))[: cfg.m_svm]]
            survivors.append(_Cluster(cl.cls, np.sort(val_half[top])))
        clusters = survivors
        counts.append(len(clusters))
        # members alternate between halves, so compare with two rounds back
        signatures.append([(cl.cls, tuple(cl.members.tolist())) for cl in clusters])
        if len(signatures) >= 3 and signatures[-1] == signatures[-3]:
            break
        if not clusters:
            break
    per_class = []
    for c in range(c_count):
        m = [cl.members for cl in clusters if cl.cls == c]
        per_class.append(np.unique(np.concatenate(m)) if m else np.zeros(0, dtype=np.int64))
    return ExemplarSet(per_class, {"cluster_counts": counts, "dropped": dropped,
                                   "clusters": [(cl.cls, cl.members) for cl in clusters]})
