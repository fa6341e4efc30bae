"""Randomized k-d forest for approximate nearest-neighbour search.

Each tree splits on a dimension drawn at random from the few highest-variance
dimensions of the node; queries walk all trees best-bin-first and stop after
``checks`` distinct points have been examined. With ``checks >= N`` every
point is visited, so results are exact.
"""
from __future__ import annotations

import heapq

import numpy as np


class _Tree:
    __slots__ = ("dim", "val", "left", "right", "leaf")

    def __init__(self):
        self.dim = []
        self.val = []
        self.left = []
        self.right = []
        self.leaf = []

    def add(self):
        for a in (self.dim, self.val, self.left, self.right, self.leaf):
            a.append(None)
        return len(self.dim) - 1


class KDForest:
    def __init__(self, data, n_trees: int = 4, leaf_size: int = 16, top_dims: int = 5, seed: int = 0):
        self.data = np.asarray(data, dtype=np.float64)
        self.leaf_size = max(1, leaf_size)
        self.top_dims = top_dims
        rng = np.random.default_rng(seed)
        self.trees = [self._build(rng) for _ in range(max(1, n_trees))]

    def _build(self, rng) -> _Tree:
        tree = _Tree()
        stack = [(tree.add(), np.arange(len(self.data)))]
        while stack:
            node, idx = stack.pop()
            if len(idx) <= self.leaf_size:
                tree.leaf[node] = idx
                continue
            pts = self.data[idx]
            var = pts.var(axis=0)
            cand = np.argsort(var, kind="stable")[::-1][: self.top_dims]
            dim = int(cand[rng.integers(len(cand))])
            if var[dim] <= 0:
                tree.leaf[node] = idx
                continue
            order = np.argsort(pts[:, dim], kind="stable")
            half = len(idx) // 2
            vals = pts[order, dim]
            tree.dim[node] = dim
            tree.val[node] = 0.5 * (vals[half - 1] + vals[half])
            left, right = tree.add(), tree.add()
            tree.left[node], tree.right[node] = left, right
            stack.append((right, idx[order[half:]]))
            stack.append((left, idx[order[:half]]))
        return tree

    def query(self, q, k: int, checks: int = 256, exclude: int | None = None):
        """k nearest (index, squared distance) pairs sorted by (distance, index)."""
        q = np.asarray(q, dtype=np.float64)
        seen = set()
        if exclude is not None:
            seen.add(int(exclude))
        best_idx: list[np.ndarray] = []
        best_d: list[np.ndarray] = []
        checked = 0
        heap = [(0.0, t, 0) for t in range(len(self.trees))]
        heapq.heapify(heap)
        while heap and checked < checks:
            _, t, node = heapq.heappop(heap)
            tree = self.trees[t]
            while tree.leaf[node] is None:
                diff = q[tree.dim[node]] - tree.val[node]
                near, far = (tree.left[node], tree.right[node]) if diff <= 0 else (tree.right[node], tree.left[node])
                heapq.heappush(heap, (diff * diff, t, far))
                node = near
            idx = [i for i in tree.leaf[node].tolist() if i not in seen]
            if not idx:
                continue
            seen.update(idx)
            idx = np.array(idx, dtype=np.int64)
            diff = self.data[idx] - q
            best_idx.append(idx)
            best_d.append((diff * diff).sum(axis=1))
            checked += len(idx)
        if not best_idx:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        idx = np.concatenate(best_idx)
        d = np.concatenate(best_d)
        order = np.lexsort((idx, d))[:k]
        return idx[order], d[order]
