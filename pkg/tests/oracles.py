"""Independent brute-force reference implementations used by the tests."""
import itertools

import numpy as np


def nn_select_bruteforce(x, labels, m_nn, eps, num_classes):
    """Coverage sets, reaching scores and per-class top fraction from the full distance matrix."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    covers = np.zeros((n, n), dtype=bool)  # covers[j, i]: i is among j's m_nn nearest
    for j in range(n):
        order = sorted((i for i in range(n) if i != j), key=lambda i: (dist[j, i], i))
        covers[j, order[:m_nn]] = True
    dmax = dist.max()
    scores = np.zeros(n)
    for i in range(n):
        per_class = []
        for c in range(num_classes):
            if c == labels[i]:
                continue
            reach = covers[:, i] & (labels == c)
            per_class.append(dist[reach, i].mean() if reach.any() else dmax)
        scores[i] = sum(per_class) / (num_classes - 1)
    out = []
    for c in range(num_classes):
        members = sorted((i for i in range(n) if labels[i] == c), key=lambda i: (-scores[i], i))
        keep = max(1, int(np.floor(eps * len(members) + 1e-9)))
        out.append(sorted(members[:keep]))
    return out, scores


def mask_cost(w, alpha, x_c, lambda2, eta, dis_fn=None):
    """Reconstruction through the masked filters, the L0 penalty and an optional hinge term."""
    wc = alpha[:, None] * w
    r = x_c - x_c @ wc.T @ wc
    value = float((r * r).sum()) + lambda2 * np.count_nonzero(alpha)
    if eta and dis_fn is not None:
        value += eta * dis_fn(alpha)
    return value


def hinge_bruteforce(w, alpha, x_ex, y_ex, pos, neg, c, delta):
    """Triplet hinge for class c by explicit loops over anchors and neighbours."""
    f = np.abs(x_ex @ (alpha[:, None] * w).T)
    total = 0.0
    for j in np.flatnonzero(y_ex == c):
        dp = np.mean([np.sum((f[j] - f[p]) ** 2) for p in pos[j]])
        dn = np.mean([np.sum((f[j] - f[q]) ** 2) for q in neg[j]])
        total += max(delta + dp - dn, 0.0)
    return total


def best_subset(w, x_c, lambda2):
    """Exhaustive minimum of reconstruction + lambda2 * |alpha| over all non-empty masks."""
    d = w.shape[0]
    best = None
    for r in range(1, d + 1):
        for sub in itertools.combinations(range(d), r):
            a = np.zeros(d)
            a[list(sub)] = 1
            v = mask_cost(w, a, x_c, lambda2, 0.0)
            if best is None or v < best[0]:
                best = (v, set(sub))
    return best


def random_cost_instance(rng, d0=8, d=12, n=20, c=3, k=2, m=2, margin=1e-3, tries=200):
    """Random small problem whose features, L1 differences and hinges all sit away from their kinks."""
    from ddsfl.dsfl import LayerHyperparams, TrainBatch, refresh_triplets

    for _ in range(tries):
        w = rng.normal(size=(d, d0)) / np.sqrt(d0)
        x = rng.normal(size=(n, d0))
        y = np.arange(n) % c
        omega = rng.normal(size=(n, m, d0))
        alphas = (rng.random((c, d)) < 0.6).astype(float)
        alphas[:, 0] = 1.0
        batch = TrainBatch(x, x, y, c, omega)
        hp = LayerHyperparams(xi=0.3, lambda1=0.05, lambda2=0.7, gamma=0.8, eta=0.4, k=k, m=m,
                              delta=float(rng.uniform(0.5, 3.0)))
        cache = refresh_triplets(w, alphas, x, y, k, c)
        z = x @ w.T
        if np.min(np.abs(z)) < margin:
            continue
        if np.min(np.abs(np.abs(z)[:, None, :] - np.abs(omega @ w.T))) < margin:
            continue
        f_ok = True
        for cls in range(c):
            f = np.abs(z * alphas[cls])
            for j in np.flatnonzero(y == cls):
                dp = np.mean(np.sum((f[j] - f[cache.pos[j]]) ** 2, axis=1))
                dn = np.mean(np.sum((f[j] - f[cache.neg[j]]) ** 2, axis=1))
                if abs(hp.delta + dp - dn) < margin:
                    f_ok = False
        if f_ok:
            return w, alphas, batch, cache, hp
    raise RuntimeError("no kink-free instance found")
