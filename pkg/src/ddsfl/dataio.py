"""Manifests, grayscale images, scale pyramids and dense patches."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "test", "val")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    path: str
    class_id: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    num_classes: int
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == name]

    def labels(self, indices=None) -> np.ndarray:
        idx = range(len(self.entries)) if indices is None else indices
        return np.array([self.entries[i].class_id for i in idx], dtype=np.int64)

    def image_path(self, i: int) -> Path:
        return self.root / self.entries[i].path


def parse_manifest(text: str, root: Path | str = ".") -> DatasetManifest:
    entries = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"line {lineno}: expected path<TAB>class_id<TAB>split, got {len(parts)} field(s)")
        path, cls, split = parts
        try:
            class_id = int(cls)
        except ValueError:
            raise ManifestError(f"line {lineno}: class_id {cls!r} is not an integer") from None
        if class_id < 0:
            raise ManifestError(f"line {lineno}: negative class_id")
        if split not in SPLITS:
            raise ManifestError(f"line {lineno}: unknown split {split!r}")
        if path in seen:
            raise ManifestError(f"line {lineno}: duplicate path {path!r}")
        seen.add(path)
        entries.append(ManifestEntry(path, class_id, split))
    if not entries:
        raise ManifestError("manifest is empty")
    return DatasetManifest(entries, 1 + max(e.class_id for e in entries), Path(root))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)


def load_gray_image(path) -> np.ndarray:
    """Read a PGM or PNG file as a float array in [0, 1].

    Colour inputs are reduced by averaging channels.
    """
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            if im.mode not in ("L", "RGB", "RGBA", "LA", "P"):
                im = im.convert("RGB")
            if im.mode == "P":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=2) if arr.shape[2] >= 3 else arr[..., 0]
    return np.clip(arr, 0.0, 1.0)


def save_gray_image(img: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


@dataclass
class PyramidConfig:
    num_scales: int = 6
    factor: float = 2 ** -0.5
    patch_size: int = 16
    stride: int = 3

    def __post_init__(self):
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        if not 0 < self.factor <= 1:
            raise ValueError("factor must lie in (0, 1]")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment."""
    h0, w0 = img.shape
    if (h0, w0) == (height, width):
        return img.copy()

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    ylo, yhi, ty = axis(height, h0)
    xlo, xhi, tx = axis(width, w0)
    top = img[ylo][:, xlo] + (img[ylo][:, xhi] - img[ylo][:, xlo]) * tx
    bot = img[yhi][:, xlo] + (img[yhi][:, xhi] - img[yhi][:, xlo]) * tx
    return top + (bot - top) * ty[:, None]


def pyramid_sizes(height: int, width: int, cfg: PyramidConfig) -> list[tuple[int, float, int, int]]:
    """(scale index, factor, height, width) for every retained scale."""
    out = []
    for i in range(cfg.num_scales):
        f = cfg.factor ** i
        h, w = int(math.floor(height * f + 0.5)), int(math.floor(width * f + 0.5))
        if min(h, w) >= cfg.patch_size:
            out.append((i, f, h, w))
    return out


def build_pyramid(img: np.ndarray, cfg: PyramidConfig) -> list[np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    return [img.copy() if i == 0 else resize_bilinear(img, h, w)
            for i, _, h, w in pyramid_sizes(*img.shape, cfg)]


@dataclass
class Patch:
    values: np.ndarray
    image_id: int = 0
    class_id: int = 0
    scale_idx: int = 0
    x: int = 0
    y: int = 0
    size: int = 16


@dataclass
class PatchSet:
    """Column-oriented bag of patches; rows of ``values`` are vectorized patches."""

    values: np.ndarray
    image_id: np.ndarray
    class_id: np.ndarray
    scale_idx: np.ndarray
    x: np.ndarray
    y: np.ndarray
    size: int

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i) -> Patch:
        return Patch(self.values[i], int(self.image_id[i]), int(self.class_id[i]),
                     int(self.scale_idx[i]), int(self.x[i]), int(self.y[i]), self.size)

    def take(self, idx) -> "PatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchSet(self.values[idx], self.image_id[idx], self.class_id[idx],
                        self.scale_idx[idx], self.x[idx], self.y[idx], self.size)

    @staticmethod
    def concat(sets: list["PatchSet"], size: int, dim: int) -> "PatchSet":
        if not sets:
            z = np.zeros(0, dtype=np.int64)
            return PatchSet(np.zeros((0, dim)), z, z, z, z, z, size)
        return PatchSet(np.concatenate([s.values for s in sets]),
                        *(np.concatenate([getattr(s, a) for s in sets])
                          for a in ("image_id", "class_id", "scale_idx", "x", "y")),
                        size)


def grid_positions(height: int, width: int, size: int, stride: int) -> np.ndarray:
    """Top-left (x, y) of every patch on the dense grid, row-major."""
    if size > min(height, width):
        return np.zeros((0, 2), dtype=np.int64)
    xs = np.arange(0, width - size + 1, stride)
    ys = np.arange(0, height - size + 1, stride)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def patches_at(img: np.ndarray, positions: np.ndarray, size: int) -> np.ndarray:
    """Row-major vectorized ``size``x``size`` patches at top-left ``positions``."""
    if len(positions) == 0:
        return np.zeros((0, size * size))
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(img, (size, size))
    return win[positions[:, 1], positions[:, 0]].reshape(len(positions), size * size).astype(np.float64)


def extract_patches(img: np.ndarray, patch_size: int, stride: int, *, image_id=0, class_id=0,
                    scale_idx=0) -> PatchSet:
    img = np.asarray(img, dtype=np.float64)
    pos = grid_positions(*img.shape, patch_size, stride)
    n = len(pos)
    full = lambda v: np.full(n, v, dtype=np.int64)  # noqa: E731
    return PatchSet(patches_at(img, pos, patch_size), full(image_id), full(class_id), full(scale_idx),
                    pos[:, 0].astype(np.int64), pos[:, 1].astype(np.int64), patch_size)


def normalize_vectors(values: np.ndarray, center: bool = True) -> np.ndarray:
    """Mean-subtract (optional) then scale rows to unit L2; near-zero rows become 0."""
    v = np.array(values, dtype=np.float64, ndmin=2)
    if center:
        v = v - v.mean(axis=1, keepdims=True)
    norms = np.sqrt((v * v).sum(axis=1))
    ok = norms >= 1e-8
    v[ok] /= norms[ok, None]
    v[~ok] = 0.0
    return v


def normalize_patch(p):
    """Normalize a single :class:`Patch` or raw vector."""
    if isinstance(p, Patch):
        return Patch(normalize_vectors(p.values)[0], p.image_id, p.class_id, p.scale_idx, p.x, p.y, p.size)
    return normalize_vectors(p)[0]


def sample_spatial_neighbors(img: np.ndarray, p: Patch, m: int, rng_seed) -> list[Patch]:
    """Draw ``m`` multi-size patches from the neighbourhood of ``p``.

    The window is a 2s-sided square centred on the patch, clipped to the
    image; sizes come from {s/2, s, 2s}, and every draw is resized back to
    s x s and normalized.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    s = p.size
    h, w = img.shape
    cx, cy = p.x + s / 2.0, p.y + s / 2.0
    x0, x1 = max(0, int(math.floor(cx - s))), min(w, int(math.ceil(cx + s)))
    y0, y1 = max(0, int(math.floor(cy - s))), min(h, int(math.ceil(cy + s)))
    small = max(1, s // 2)
    if min(x1 - x0, y1 - y0) < small or s < 2:
        return [Patch(p.values.copy(), p.image_id, p.class_id, p.scale_idx, p.x, p.y, s) for _ in range(m)]
    sizes = (small, s, 2 * s)
    out = []
    for _ in range(m):
        size = min(sizes[int(rng.integers(3))], x1 - x0, y1 - y0)
        nx = x0 + int(rng.integers(x1 - x0 - size + 1))
        ny = y0 + int(rng.integers(y1 - y0 - size + 1))
        crop = img[ny:ny + size, nx:nx + size]
        vals = resize_bilinear(crop, s, s).ravel()
        out.append(Patch(normalize_vectors(vals)[0], p.image_id, p.class_id, p.scale_idx, nx, ny, s))
    return out
