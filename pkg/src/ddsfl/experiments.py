"""Scaled-down synthetic experiments shared by scripts/ and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .config import PipelineConfig, default_layers
from .deepstack import train_deep_images
from .dsfl import LayerHyperparams
from .encodeclassify import evaluate_images, fit_encoder_and_classifier
from .synthetic import make_grating_dataset

TREND_HYPER = LayerHyperparams(xi=0.0, lambda1=0.01, lambda2=1.0, gamma=1.0, eta=0.1, k=5,
                               warm_iters=100, w_iters=50, outer_rounds=3)

VARIANTS = {
    "ddsfl_1layer": (1, True),
    "random_1layer": (1, False),
    "ddsfl_2layer": (2, True),
}


def trend_config(num_layers: int = 1, trained: bool = True, num_filters: int = 64, codebook_size: int = 128,
                 hyper: LayerHyperparams = TREND_HYPER) -> PipelineConfig:
    layers = default_layers(num_layers)
    layers[0] = replace(layers[0], num_filters=num_filters, train=trained, hyper=hyper)
    if num_layers > 1:
        layers[1] = replace(layers[1], num_filters=num_filters, pca_dim=num_filters, train=trained, hyper=hyper)
    return PipelineConfig(layers=layers, patches_per_image=100, codebook_size=codebook_size,
                          codebook_samples=20000, svm_lambda=1e-3, svm_epochs=30)


@dataclass
class TrendResult:
    seed: int
    variant: str
    accuracy: float
    seconds: float


def run_trend(seed: int, noise: float = 0.75, n_train: int = 20, n_test: int = 10, variants=tuple(VARIANTS)):
    """Grating dataset (counts per class, 3 classes), one result per pipeline variant."""
    tr, ytr, te, yte = make_grating_dataset(n_train, n_test, num_classes=3, noise=noise, seed=seed)
    out = []
    for name in variants:
        num_layers, trained = VARIANTS[name]
        cfg = trend_config(num_layers, trained)
        t0 = time.time()
        model = train_deep_images(tr, ytr, 3, cfg, seed=seed)
        fit_encoder_and_classifier(model, tr, ytr, cfg, seed)
        acc = evaluate_images(model, te, yte).accuracy
        out.append(TrendResult(seed, name, acc, time.time() - t0))
    return out
