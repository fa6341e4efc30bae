"""Layer stacking, dense feature extraction, deep training and model files.

Layer l describes a ``receptive_field``-pixel square. Layer 1 filters raw
normalized patches; layer l > 1 concatenates a g x g grid of layer l-1
features (row-major, ``grid_stride`` pixels apart), projects it with PCA,
rescales to unit length and filters the result. Test-time extraction uses the
full filter bank; class masks are kept in the model only for inspection.
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, svmlite
from .config import LayerConfig, PipelineConfig
from .dataio import PyramidConfig
from .dsfl import FilterBank, TrainBatch, init_filters, train_layer
from .exemplar import ExemplarSet, nn_select, split_candidates, svm_select
from .mathkit import PcaModel, pca_fit, pca_transform

log = logging.getLogger(__name__)

MAGIC = b"DDSFL\x00"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class TrailingDataError(ModelFormatError):
    pass


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float32))


@dataclass(eq=False)
class LayerModel:
    layer_idx: int
    w: np.ndarray
    masks: np.ndarray
    receptive_field: int
    grid: int = 1
    grid_stride: int = 0
    num_scales: int = 6
    step: int = 3
    pca_mean: np.ndarray | None = None
    pca_components: np.ndarray | None = None

    def __post_init__(self):
        self.w = _f32(self.w)
        self.masks = _f32(np.atleast_2d(self.masks))
        if self.pca_mean is not None:
            self.pca_mean = _f32(self.pca_mean).ravel()
            self.pca_components = _f32(self.pca_components)
        if (self.pca_mean is not None) != (self.layer_idx > 1):
            raise ModelFormatError(f"layer {self.layer_idx}: PCA must be present exactly for layers above 1")
        if self.pca_components is not None and self.pca_components.shape[0] != self.w.shape[1]:
            raise ModelFormatError(f"layer {self.layer_idx}: PCA output {self.pca_components.shape[0]} "
                                   f"!= filter input {self.w.shape[1]}")
        if self.layer_idx == 1 and self.w.shape[1] != self.receptive_field ** 2:
            raise ModelFormatError("layer 1 filters must match the raw patch size")

    @property
    def num_filters(self) -> int:
        return self.w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w.shape[1]

    @property
    def filter_bank(self) -> FilterBank:
        return FilterBank(self.w.astype(np.float64), self.layer_idx)

    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(self.num_scales, 2 ** -0.5, self.receptive_field, self.step)


@dataclass(eq=False)
class DeepModel:
    layers: list[LayerModel]
    num_classes: int
    codebooks: list[np.ndarray] = field(default_factory=list)
    classifier_w: np.ndarray | None = None
    classifier_b: np.ndarray | None = None
    classifier_lambda: float = 0.0
    llc_knn: int = 5
    llc_beta: float = 1e-4
    pool_abs: bool = True
    meta: str = ""
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not self.layers:
            raise ModelFormatError("model needs at least one layer")
        self.codebooks = [_f32(c) for c in self.codebooks]
        if self.classifier_w is not None:
            self.classifier_w = _f32(self.classifier_w)
            self.classifier_b = _f32(self.classifier_b).ravel()
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.pca_mean.shape[0] != cur.grid * cur.grid * prev.num_filters:
                raise ModelFormatError(f"layer {cur.layer_idx}: aggregated dimension mismatch")

    @property
    def complete(self) -> bool:
        return len(self.codebooks) == len(self.layers) and self.classifier_w is not None

    @property
    def classifier(self) -> svmlite.OvrModel:
        if self.classifier_w is None:
            raise RuntimeError("classifier not trained; run `fit-classifier` first")
        w = self.classifier_w.astype(np.float64)
        b = self.classifier_b.astype(np.float64)
        return svmlite.OvrModel([svmlite.LinearSvmModel(w[c], float(b[c]), self.classifier_lambda)
                                 for c in range(len(b))])

    def to_bytes(self) -> bytes:
        return dumps(self)

    def __eq__(self, other):
        return isinstance(other, DeepModel) and dumps(self) == dumps(other)

    __hash__ = None


# ------------------------------------------------------------------ features

@dataclass
class FeatureMap:
    """Dense features of one image at one layer.

    ``centers`` are receptive-field centres in original-image pixels.
    """

    vectors: np.ndarray
    centers: np.ndarray
    scale_idx: np.ndarray
    positions: np.ndarray
    image_hw: tuple

    def __len__(self):
        return len(self.vectors)


def grid_offsets(grid: int, stride: int) -> np.ndarray:
    g = np.arange(grid) * stride
    yy, xx = np.meshgrid(g, g, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def aggregate_receptive_field(prev_features: np.ndarray, positions: np.ndarray, grid: int, stride: int,
                              lookup) -> np.ndarray:
    """Concatenate the g x g previous-layer vectors under each anchor.

    ``lookup(sub_positions) -> row indices`` maps sub-field top-left corners to
    rows of ``prev_features``. The output is a fresh array, row-major over the
    grid, so overlapping anchors never alias each other.
    """
    sub = positions[:, None, :] + grid_offsets(grid, stride)[None]
    rows = lookup(sub.reshape(-1, 2)).reshape(len(positions), grid * grid)
    return np.ascontiguousarray(prev_features[rows].reshape(len(positions), -1))


def _aggregate(model_layers: list[LayerModel], level: int, img: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Concatenated layer ``level - 1`` features for layer ``level`` anchors (1-based)."""
    lm = model_layers[level - 1]
    sub = (positions[:, None, :] + grid_offsets(lm.grid, lm.grid_stride)[None]).reshape(-1, 2)
    uniq, inverse = np.unique(sub, axis=0, return_inverse=True)
    prev = _features_at(model_layers, level - 1, img, uniq)
    return aggregate_receptive_field(prev, positions, lm.grid, lm.grid_stride,
                                     lambda s: np.asarray(inverse).ravel())


def layer_inputs(model_layers: list[LayerModel], level: int, img: np.ndarray, positions: np.ndarray,
                 agg: np.ndarray | None = None) -> np.ndarray:
    """Input vectors of layer ``level`` at top-left ``positions`` of a scaled image."""
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    lm = model_layers[level - 1]
    if level == 1:
        return dataio.normalize_vectors(dataio.patches_at(img, positions, lm.receptive_field))
    if agg is None:
        agg = _aggregate(model_layers, level, img, positions)
    pca = PcaModel(lm.pca_mean.astype(np.float64), lm.pca_components.astype(np.float64), np.zeros(0))
    return dataio.normalize_vectors(pca_transform(pca, agg), center=False)


def _features_at(model_layers, level, img, positions) -> np.ndarray:
    x = layer_inputs(model_layers, level, img, positions)
    return np.abs(x @ model_layers[level - 1].w.astype(np.float64).T)


def extract_features(img: np.ndarray, model, level: int) -> FeatureMap:
    """Dense layer-``level`` features over the layer's scale pyramid (float32)."""
    layers = model.layers if isinstance(model, DeepModel) else model
    if level < 1 or level > len(layers):
        raise ValueError(f"layer {level} is not trained in this model")
    lm = layers[level - 1]
    img = np.asarray(img, dtype=np.float64)
    h0, w0 = img.shape
    vecs, centers, scales, positions = [], [], [], []
    for (si, _, h, w), scaled in zip(dataio.pyramid_sizes(h0, w0, lm.pyramid()),
                                     dataio.build_pyramid(img, lm.pyramid())):
        pos = dataio.grid_positions(h, w, lm.receptive_field, lm.step)
        if len(pos) == 0:
            continue
        vecs.append(_features_at(layers, level, scaled, pos))
        half = lm.receptive_field / 2.0
        centers.append(np.stack([(pos[:, 0] + half) * (w0 / w), (pos[:, 1] + half) * (h0 / h)], axis=1))
        scales.append(np.full(len(pos), si, dtype=np.int64))
        positions.append(pos)
    if not vecs:
        return FeatureMap(np.zeros((0, lm.num_filters), np.float32), np.zeros((0, 2)), np.zeros(0, np.int64),
                          np.zeros((0, 2), np.int64), (h0, w0))
    # centres are rounded to float32 so exported feature files reproduce them exactly
    return FeatureMap(np.concatenate(vecs).astype(np.float32),
                      np.concatenate(centers).astype(np.float32).astype(np.float64), np.concatenate(scales),
                      np.concatenate(positions), (h0, w0))


# ------------------------------------------------------------------ training

@dataclass
class LayerSample:
    inputs: np.ndarray
    labels: np.ndarray
    image_idx: np.ndarray
    scale_idx: np.ndarray
    positions: np.ndarray


def _sample_positions(img_shape, lc: LayerConfig, budget: int, rng):
    """Uniform draw of ``budget`` (scale, x, y) sites across all scales' grids."""
    sizes = dataio.pyramid_sizes(*img_shape, PyramidConfig(lc.num_scales, 2 ** -0.5, lc.receptive_field, lc.step))
    sites = []
    for si, _, h, w in sizes:
        pos = dataio.grid_positions(h, w, lc.receptive_field, lc.step)
        sites.append(np.column_stack([np.full(len(pos), si), pos]))
    if not sites:
        return np.zeros((0, 3), dtype=np.int64)
    sites = np.concatenate(sites)
    if len(sites) > budget:
        sites = sites[np.sort(rng.choice(len(sites), budget, replace=False))]
    return sites.astype(np.int64)


def collect_layer_sample(images, labels, layers: list[LayerModel], lc: LayerConfig, level: int,
                         patches_per_image: int, rng):
    """Sample training sites and compute the layer's raw (pre-PCA) inputs."""
    raw, lab, img_i, sc, pos = [], [], [], [], []
    for i, img in enumerate(images):
        sites = _sample_positions(img.shape, lc, patches_per_image, rng)
        if len(sites) == 0:
            continue
        pyr = dataio.build_pyramid(img, PyramidConfig(lc.num_scales, 2 ** -0.5, lc.receptive_field, lc.step))
        order = {s: k for k, (s, *_r) in enumerate(dataio.pyramid_sizes(
            *img.shape, PyramidConfig(lc.num_scales, 2 ** -0.5, lc.receptive_field, lc.step)))}
        for s in np.unique(sites[:, 0]):
            p = sites[sites[:, 0] == s][:, 1:]
            scaled = pyr[order[int(s)]]
            if level == 1:
                raw.append(dataio.normalize_vectors(dataio.patches_at(scaled, p, lc.receptive_field)))
            else:
                raw.append(_aggregate_with(layers, lc, level, scaled, p))
            lab.append(np.full(len(p), labels[i]))
            img_i.append(np.full(len(p), i))
            sc.append(np.full(len(p), s))
            pos.append(p)
    if not raw:
        raise ValueError(f"no training sites for layer {level}")
    cat = np.concatenate
    return LayerSample(cat(raw), cat(lab).astype(np.int64), cat(img_i).astype(np.int64),
                       cat(sc).astype(np.int64), cat(pos))


def _aggregate_with(layers, lc: LayerConfig, level, img, positions):
    """Aggregation for a layer that is not in the model yet."""
    stub = LayerModel(level, np.zeros((1, 1)), np.zeros((1, 1)), lc.receptive_field, lc.grid, lc.grid_stride,
                      lc.num_scales, lc.step, np.zeros(lc.grid * lc.grid * layers[-1].num_filters),
                      np.zeros((1, lc.grid * lc.grid * layers[-1].num_filters)))
    return _aggregate(list(layers) + [stub], level, img, positions)


def select_exemplars(x, labels, num_classes, cfg: PipelineConfig, seed: int) -> ExemplarSet:
    if cfg.exemplar_method == "none":
        return ExemplarSet([np.flatnonzero(labels == c) for c in range(num_classes)])
    if cfg.exemplar_method == "nn":
        return nn_select(x, labels, cfg.nn, num_classes, seed=seed)
    a, b = split_candidates(labels, seed)
    res = svm_select(x[a], labels[a], x[b], labels[b], cfg.svm, seed, num_classes)
    pooled = np.concatenate([a, b])
    return ExemplarSet([np.sort(pooled[idx]) for idx in res.per_class], res.info)


def _neighbour_omega(images, sample: LayerSample, rows, layers, lc: LayerConfig, level, m, rng):
    """M spatial neighbours for each selected training site."""
    pyr_cfg = PyramidConfig(lc.num_scales, 2 ** -0.5, lc.receptive_field, lc.step)
    out = np.zeros((len(rows), m, sample.inputs.shape[1]))
    cache = {}
    for n, r in enumerate(rows):
        i, s = int(sample.image_idx[r]), int(sample.scale_idx[r])
        if (i, s) not in cache:
            sizes = dataio.pyramid_sizes(*images[i].shape, pyr_cfg)
            k = [t[0] for t in sizes].index(s)
            cache = {(i, s): dataio.build_pyramid(images[i], pyr_cfg)[k]}
        scaled = cache[(i, s)]
        x, y = (int(v) for v in sample.positions[r])
        if level == 1:
            p = dataio.Patch(sample.inputs[r], i, int(sample.labels[r]), s, x, y, lc.receptive_field)
            nb = dataio.sample_spatial_neighbors(scaled, p, m, int(rng.integers(2**31)))
            out[n] = np.stack([q.values for q in nb])
        else:
            h, w = scaled.shape
            half = lc.receptive_field // 2
            jit = rng.integers(-half, half + 1, size=(m, 2))
            pos = np.stack([np.clip(x + jit[:, 0], 0, w - lc.receptive_field),
                            np.clip(y + jit[:, 1], 0, h - lc.receptive_field)], axis=1)
            out[n] = layer_inputs(layers, level, scaled, pos)
    return out


def sample_first_layer(images, labels, cfg: PipelineConfig, seed: int) -> LayerSample:
    return collect_layer_sample([np.asarray(im, dtype=np.float64) for im in images], np.asarray(labels), [],
                                cfg.layers[0], 1, cfg.patches_per_image, np.random.default_rng([seed, 1, 0]))


def exemplar_seed(seed: int, level: int) -> int:
    return seed * 7919 + level


def train_deep_images(images, labels, num_classes: int, cfg: PipelineConfig, seed: int | None = None,
                      first_layer: tuple[LayerSample, ExemplarSet] | None = None) -> DeepModel:
    """Train every layer of the stack (no codebooks or classifier yet).

    ``first_layer`` optionally supplies the layer-1 training sample and its
    exemplars (as produced by the ``patches`` and ``exemplars`` stages).
    """
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    labels = np.asarray(labels, dtype=np.int64)
    images = [np.asarray(im, dtype=np.float64) for im in images]
    layers: list[LayerModel] = []
    for level, lc in enumerate(cfg.layers, start=1):
        rng = np.random.default_rng([seed, level, 1])
        ex = None
        if level == 1 and first_layer is not None:
            sample, ex = first_layer
        elif level == 1:
            sample = sample_first_layer(images, labels, cfg, seed)
        else:
            sample = collect_layer_sample(images, labels, layers, lc, level, cfg.patches_per_image,
                                          np.random.default_rng([seed, level, 0]))
        pca_mean = pca_comp = None
        if level > 1:
            pca = pca_fit(sample.inputs, lc.pca_dim)
            pca_mean, pca_comp = _f32(pca.mean), _f32(pca.components)
            stub = LayerModel(level, np.zeros((1, lc.pca_dim)), np.zeros((1, 1)), lc.receptive_field, lc.grid,
                              lc.grid_stride, lc.num_scales, lc.step, pca_mean, pca_comp)
            sample.inputs = layer_inputs(layers + [stub], level, None, np.zeros((len(sample.inputs), 2)),
                                         agg=sample.inputs)
        d0 = sample.inputs.shape[1]
        if lc.train:
            if ex is None:
                ex = select_exemplars(sample.inputs, sample.labels, num_classes, cfg, exemplar_seed(seed, level))
            ex_rows = ex.all_indices()
            lu_size = cfg.lu_size or len(ex_rows)
            lu_rows = np.sort(rng.choice(len(sample.inputs), min(lu_size, len(sample.inputs)), replace=False))
            omega = None
            if lc.hyper.xi > 0 and lc.hyper.m > 0:
                partial = layers if level == 1 else layers + [stub]
                omega = _neighbour_omega(images, sample, lu_rows, partial, lc, level, lc.hyper.m, rng)
            batch = TrainBatch(sample.inputs[lu_rows], sample.inputs[ex_rows], sample.labels[ex_rows],
                               num_classes, omega)
            log.info("layer %d: %d sites, %d exemplars, %d reconstruction patches, D0=%d", level,
                     len(sample.inputs), len(ex_rows), len(lu_rows), d0)
            res = train_layer(batch, lc.hyper, lc.num_filters, seed=seed * 31 + level, layer_idx=level)
            w, masks = res.filter_bank.w, res.masks
        else:
            w = init_filters(lc.num_filters, d0, seed * 31 + level)
            masks = np.ones((num_classes, lc.num_filters))
        layers.append(LayerModel(level, w, masks, lc.receptive_field, lc.grid, lc.grid_stride, lc.num_scales,
                                 lc.step, pca_mean, pca_comp))
    return DeepModel(layers, num_classes, llc_knn=cfg.llc_knn, llc_beta=cfg.llc_beta, pool_abs=cfg.pool_abs,
                     meta=f"config_hash={cfg.hash()} seed={seed}")


def train_deep(manifest, cfg: PipelineConfig, seed: int | None = None) -> DeepModel:
    """Layers, codebooks and classifier from the manifest's training split."""
    from .encodeclassify import fit_encoder_and_classifier

    train = manifest.split("train")
    if not train:
        raise ValueError("training split is empty")
    images = [dataio.load_gray_image(manifest.image_path(i)) for i in train]
    labels = manifest.labels(train)
    model = train_deep_images(images, labels, manifest.num_classes, cfg, seed)
    return fit_encoder_and_classifier(model, images, labels, cfg, seed)


# ------------------------------------------------------------------ persistence

class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u8(self, v):
        self.buf.write(struct.pack("<B", int(v)))

    def u32(self, v):
        self.buf.write(struct.pack("<I", int(v)))

    def f64(self, v):
        self.buf.write(struct.pack("<d", float(v)))

    def string(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf.write(raw)

    def matrix(self, m):
        m = np.atleast_2d(_f32(m))
        if m.ndim != 2:
            raise ValueError("matrices must be 2-D")
        self.u32(m.shape[0])
        self.u32(m.shape[1])
        self.buf.write(m.astype("<f4").tobytes(order="C"))


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.data):
            raise TruncatedModelError(f"truncated model file: wanted {n} bytes at offset {self.off}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def string(self):
        return bytes(self.take(self.u32())).decode("utf-8")

    def matrix(self):
        r, c = self.u32(), self.u32()
        return np.frombuffer(bytes(self.take(4 * r * c)), dtype="<f4").reshape(r, c).astype(np.float32)


def dumps(model: DeepModel) -> bytes:
    w = _Writer()
    w.buf.write(MAGIC)
    w.buf.write(struct.pack("<H", FORMAT_VERSION))
    w.string(model.meta)
    w.u32(model.num_classes)
    w.u32(len(model.layers))
    for lm in model.layers:
        for v in (lm.layer_idx, lm.receptive_field, lm.grid, lm.grid_stride, lm.num_scales, lm.step):
            w.u32(v)
        w.matrix(lm.w)
        w.matrix(lm.masks)
        w.u8(lm.pca_mean is not None)
        if lm.pca_mean is not None:
            w.matrix(lm.pca_mean[None, :])
            w.matrix(lm.pca_components)
    w.u32(len(model.codebooks))
    for cb in model.codebooks:
        w.matrix(cb)
    w.u32(model.llc_knn)
    w.f64(model.llc_beta)
    w.u8(model.pool_abs)
    w.u8(model.classifier_w is not None)
    if model.classifier_w is not None:
        w.matrix(model.classifier_w)
        w.matrix(model.classifier_b[None, :])
        w.f64(model.classifier_lambda)
    return w.buf.getvalue()


def loads(data: bytes) -> DeepModel:
    r = _Reader(data)
    if len(data) < len(MAGIC) or bytes(r.take(len(MAGIC))) != MAGIC:
        raise BadMagicError("bad magic: not a DDSFL model file")
    version = r.u16()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, reader supports {FORMAT_VERSION}")
    meta = r.string()
    num_classes = r.u32()
    layers = []
    for _ in range(r.u32()):
        idx, rf, grid, gstride, scales, step = (r.u32() for _ in range(6))
        wm, masks = r.matrix(), r.matrix()
        mean = comp = None
        if r.u8():
            mean, comp = r.matrix()[0], r.matrix()
        layers.append(LayerModel(idx, wm, masks, rf, grid, gstride, scales, step, mean, comp))
    codebooks = [r.matrix() for _ in range(r.u32())]
    knn, beta, pool_abs = r.u32(), r.f64(), bool(r.u8())
    cw = cb_ = None
    lam = 0.0
    if r.u8():
        cw, cb_, lam = r.matrix(), r.matrix()[0], r.f64()
    if r.off != len(r.data):
        raise TrailingDataError(f"trailing data: {len(r.data) - r.off} unread bytes")
    return DeepModel(layers, num_classes, codebooks, cw, cb_, lam, knn, beta, pool_abs, meta, version)


def save_model(model: DeepModel, path) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, dumps(model))


def load_model(path) -> DeepModel:
    return loads(Path(path).read_bytes())


def model_digest(model: DeepModel) -> str:
    import hashlib

    return hashlib.sha256(dumps(model)).hexdigest()
