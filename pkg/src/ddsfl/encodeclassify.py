"""Local features -> global image descriptors (LLC + spatial pyramid max pooling)."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .mathkit import kmeans, sq_distances

log = logging.getLogger(__name__)

PYRAMID_LEVELS = (1, 2, 4)


@dataclass
class Codebook:
    centers: np.ndarray
    layer_idx: int = 1

    @property
    def size(self) -> int:
        return self.centers.shape[0]


def build_codebook(features, size: int, seed: int = 0, iters: int = 30, layer_idx: int = 1) -> Codebook:
    features = np.asarray(features, dtype=np.float64)
    if len(features) < size:
        raise ValueError(f"codebook of size {size} needs at least that many features, got {len(features)}")
    return Codebook(kmeans(features, size, iters, rng_seed=seed).centers, layer_idx)


def llc_encode_sparse(centers, feats, knn: int = 5, beta: float = 1e-4, chunk: int = 2048):
    """Approximate LLC codes: ``(indices, weights)``, each n x knn.

    For every feature, the weights on its knn nearest codewords solve
    min ||f - sum_i c_i b_i||^2 s.t. sum_i c_i = 1 with the local covariance
    regularized by beta * trace.
    """
    centers = np.asarray(centers, dtype=np.float64)
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if knn > len(centers):
        raise ValueError("knn exceeds codebook size")
    if beta <= 0:
        raise ValueError("beta must be positive")
    n = len(feats)
    idx = np.empty((n, knn), dtype=np.int64)
    wts = np.empty((n, knn))
    ones = np.ones(knn)
    for s in range(0, n, chunk):
        f = feats[s:s + chunk]
        d = sq_distances(f, centers)
        nn = np.argsort(d, axis=1, kind="stable")[:, :knn]
        z = centers[nn] - f[:, None, :]
        cov = np.einsum("nkd,nld->nkl", z, z)
        tr = np.trace(cov, axis1=1, axis2=2)
        reg = np.where(tr > 0, beta * tr, beta)
        cov = cov + reg[:, None, None] * np.eye(knn)
        w = np.linalg.solve(cov, np.broadcast_to(ones, (len(f), knn))[..., None])[..., 0]
        w /= w.sum(axis=1, keepdims=True)
        idx[s:s + chunk] = nn
        wts[s:s + chunk] = w
    return idx, wts


def llc_encode(cb: Codebook, f, knn: int = 5, beta: float = 1e-4) -> np.ndarray:
    """Dense length-B LLC code of a single feature vector."""
    idx, w = llc_encode_sparse(cb.centers, f, knn, beta)
    code = np.zeros(cb.size)
    code[idx[0]] = w[0]
    return code


def region_index(centers_xy, image_hw, grid: int) -> np.ndarray:
    h, w = image_hw
    cx = np.clip(np.floor(centers_xy[:, 0] * grid / w), 0, grid - 1).astype(np.int64)
    cy = np.clip(np.floor(centers_xy[:, 1] * grid / h), 0, grid - 1).astype(np.int64)
    return cy * grid + cx


def spm_pool(idx, weights, centers_xy, image_hw, size: int, levels=PYRAMID_LEVELS,
             use_abs: bool = True) -> np.ndarray:
    """Max-pool sparse codes over the spatial pyramid, concatenate and L2-normalize.

    ``centers_xy`` are patch centres in original-image pixel coordinates.
    Regions are ordered level by level, row-major inside a level.
    """
    idx = np.asarray(idx, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    centers_xy = np.asarray(centers_xy, dtype=np.float64).reshape(-1, 2)
    n_regions = sum(g * g for g in levels)
    if len(idx) == 0:
        log.warning("no local features in image; descriptor is zero")
        return np.zeros(n_regions * size)
    vals = np.abs(weights) if use_abs else weights
    blocks = []
    for g in levels:
        reg = region_index(centers_xy, image_hw, g)
        flat = (reg[:, None] * size + idx).ravel()
        if use_abs:
            pooled = np.zeros(g * g * size)
            np.maximum.at(pooled, flat, vals.ravel())
        else:
            pooled = np.full(g * g * size, -np.inf)
            np.maximum.at(pooled, flat, vals.ravel())
            support = np.bincount(flat, minlength=g * g * size)
            per_region = np.repeat(np.bincount(reg, minlength=g * g), size)
            # codewords outside a patch's support carry an implicit zero
            pooled = np.where(support < per_region, np.maximum(pooled, 0.0), pooled)
            pooled[per_region == 0] = 0.0
        blocks.append(pooled)
    return l2_normalize(np.concatenate(blocks))


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v.copy()


def descriptor_length(num_layers: int, codebook_size: int, levels=PYRAMID_LEVELS) -> int:
    return num_layers * sum(g * g for g in levels) * codebook_size


@dataclass
class Metrics:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray

    def to_tsv(self) -> str:
        lines = [f"accuracy\t{self.accuracy:.6f}",
                 f"mean_class_accuracy\t{float(np.nanmean(self.per_class)):.6f}"]
        lines += [f"class_{c}_accuracy\t{a:.6f}" for c, a in enumerate(self.per_class)]
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        c = self.confusion.shape[0]
        rows = ["true\\pred," + ",".join(str(i) for i in range(c))]
        rows += [f"{i}," + ",".join(str(int(v)) for v in self.confusion[i]) for i in range(c)]
        return "\n".join(rows) + "\n"


def compute_metrics(y_true, y_pred, num_classes: int) -> Metrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    totals = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(totals > 0, np.diag(conf) / np.maximum(totals, 1), np.nan)
    acc = float(np.trace(conf) / max(1, len(y_true)))
    return Metrics(acc, per_class, conf)


# ------------------------------------------------------------------ model-level

def encode_feature_map(fm, codebook, model) -> np.ndarray:
    """Per-layer SPM descriptor of one feature map."""
    cb = np.asarray(codebook, dtype=np.float64)
    idx, w = llc_encode_sparse(cb, np.asarray(fm.vectors, dtype=np.float64), model.llc_knn, model.llc_beta)
    return spm_pool(idx, w, fm.centers, fm.image_hw, len(cb), use_abs=model.pool_abs)


def describe_feature_maps(fmaps, model) -> np.ndarray:
    parts = [encode_feature_map(fm, cb, model) for fm, cb in zip(fmaps, model.codebooks)]
    return l2_normalize(np.concatenate(parts))


def describe_image(img, model) -> np.ndarray:
    """Concatenated, L2-normalized LLC+SPM descriptor over all layers."""
    from .deepstack import extract_features

    if len(model.codebooks) != len(model.layers):
        raise RuntimeError("model has no codebooks; run `codebook` first")
    fmaps = [extract_features(img, model, level) for level in range(1, len(model.layers) + 1)]
    return describe_feature_maps(fmaps, model)


def sample_codebook_features(fmaps_per_image, max_samples: int, seed: int) -> np.ndarray:
    feats = np.concatenate([np.asarray(fm.vectors, dtype=np.float64) for fm in fmaps_per_image])
    if len(feats) > max_samples:
        rng = np.random.default_rng(seed)
        feats = feats[np.sort(rng.choice(len(feats), max_samples, replace=False))]
    return feats


def fit_codebooks(model, fmaps_by_layer, cfg, seed: int):
    """One k-means codebook per layer from training-image feature maps."""
    books = []
    for level, fmaps in enumerate(fmaps_by_layer, start=1):
        feats = sample_codebook_features(fmaps, cfg.codebook_samples, seed * 131 + level)
        books.append(build_codebook(feats, cfg.codebook_size, seed * 137 + level, cfg.kmeans_iters, level).centers)
    model.codebooks = [np.asarray(b, dtype=np.float32) for b in books]
    return model


def fit_classifier(model, descriptors, labels, cfg, seed: int):
    from . import svmlite

    ovr = svmlite.train_ovr(np.asarray(descriptors, dtype=np.float64), labels, model.num_classes,
                            cfg.svm_lambda, cfg.svm_epochs, seed)
    w, b = ovr.weights()
    model.classifier_w = w.astype(np.float32)
    model.classifier_b = b.astype(np.float32)
    model.classifier_lambda = cfg.svm_lambda
    return model


def fit_encoder_and_classifier(model, images, labels, cfg, seed: int | None = None):
    from .deepstack import extract_features

    seed = cfg.seed if seed is None else seed
    fmaps = [[extract_features(im, model, level) for im in images] for level in range(1, len(model.layers) + 1)]
    fit_codebooks(model, fmaps, cfg, seed)
    desc = np.stack([describe_feature_maps([fm[i] for fm in fmaps], model) for i in range(len(images))])
    return fit_classifier(model, desc.astype(np.float32), labels, cfg, seed)


def predict_descriptors(model, descriptors) -> np.ndarray:
    from . import svmlite

    return svmlite.predict(model.classifier, np.asarray(descriptors, dtype=np.float64))


def evaluate_images(model, images, labels) -> Metrics:
    desc = np.stack([describe_image(im, model) for im in images]).astype(np.float32)
    return compute_metrics(labels, predict_descriptors(model, desc), model.num_classes)


def evaluate(model, manifest, split: str = "test") -> Metrics:
    from .dataio import load_gray_image

    rows = manifest.split(split)
    if not rows:
        raise ValueError(f"{split} split is empty")
    images = [load_gray_image(manifest.image_path(i)) for i in rows]
    return evaluate_images(model, images, manifest.labels(rows))
