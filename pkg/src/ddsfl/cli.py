"""Command-line driver.

Every stage reads its inputs from and writes its outputs to ``--out``:

    patches         patches.npy, patches_meta.tsv
    exemplars       exemplars.tsv
    train           layers.ddsfl
    extract         features_layer{l}.bin
    codebook        encoder.ddsfl
    encode          descriptors.bin, descriptors_index.tsv
    fit-classifier  model.ddsfl
    evaluate        metrics.tsv, confusion.csv

``pipeline`` runs the same stage functions in order; ``sweep`` does a
sequential per-parameter grid search on a validation split.
"""
from __future__ import annotations

import argparse
import contextlib
import io
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, deepstack, encodeclassify
from .config import ConfigError, PipelineConfig, apply_overrides, load_config
from .deepstack import LayerSample
from .exemplar import ExemplarSet
from .io_utils import atomic_write_bytes, atomic_write_text, feature_blocks_bytes, matrix_bytes, read_feature_blocks, read_matrix

log = logging.getLogger("ddsfl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_PARAMS = ("xi", "lambda1", "lambda2", "gamma", "eta")
SWEEP_GRID = (0.0, 0.01, 0.1, 1.0)


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path.name}: run `{stage}` first")
        self.stage = stage


class Context:
    def __init__(self, cfg: PipelineConfig, out: Path, seed: int, manifest: dataio.DatasetManifest | None = None):
        self.cfg = cfg
        self.out = Path(out)
        self.seed = seed
        self._manifest = manifest

    @property
    def manifest(self) -> dataio.DatasetManifest:
        if self._manifest is None:
            if not self.cfg.manifest:
                raise ConfigError("no manifest given ([data] manifest)")
            self._manifest = dataio.load_manifest(self.cfg.manifest)
        return self._manifest

    def need(self, name: str, stage: str) -> Path:
        p = self.out / name
        if not p.exists():
            raise MissingArtifact(p, stage)
        return p

    def rows(self, split: str) -> list[int]:
        return self.manifest.split(split)

    def images(self, rows) -> list[np.ndarray]:
        return [dataio.load_gray_image(self.manifest.image_path(i)) for i in rows]


# ------------------------------------------------------------------ stages

def stage_patches(ctx: Context) -> None:
    rows = ctx.rows("train")
    if not rows:
        raise ValueError("training split is empty")
    s = deepstack.sample_first_layer(ctx.images(rows), ctx.manifest.labels(rows), ctx.cfg, ctx.seed)
    buf = io.BytesIO()
    np.save(buf, s.inputs, allow_pickle=False)
    atomic_write_bytes(ctx.out / "patches.npy", buf.getvalue())
    lines = ["image\tclass_id\tscale\tx\ty"]
    lines += [f"{rows[i]}\t{c}\t{sc}\t{x}\t{y}" for i, c, sc, (x, y)
              in zip(s.image_idx, s.labels, s.scale_idx, s.positions)]
    atomic_write_text(ctx.out / "patches_meta.tsv", "\n".join(lines) + "\n")
    log.info("patches: %d layer-1 training patches", len(s.inputs))


def _load_patches(ctx: Context) -> LayerSample:
    x = np.load(ctx.need("patches.npy", "patches"), allow_pickle=False)
    meta = np.loadtxt(ctx.need("patches_meta.tsv", "patches"), dtype=np.int64, skiprows=1, ndmin=2)
    rows = ctx.rows("train")
    local = {r: k for k, r in enumerate(rows)}
    image_idx = np.array([local[int(r)] for r in meta[:, 0]], dtype=np.int64)
    return LayerSample(x, meta[:, 1].copy(), image_idx, meta[:, 2].copy(), meta[:, 3:5].copy())


def stage_exemplars(ctx: Context) -> None:
    s = _load_patches(ctx)
    ex = deepstack.select_exemplars(s.inputs, s.labels, ctx.manifest.num_classes, ctx.cfg,
                                    deepstack.exemplar_seed(ctx.seed, 1))
    atomic_write_text(ctx.out / "exemplars.tsv", ex.to_tsv())
    log.info("exemplars: %d selected", len(ex.all_indices()))


def stage_train(ctx: Context) -> None:
    s = _load_patches(ctx)
    ex = ExemplarSet.from_tsv(ctx.need("exemplars.tsv", "exemplars").read_text(), ctx.manifest.num_classes)
    rows = ctx.rows("train")
    model = deepstack.train_deep_images(ctx.images(rows), ctx.manifest.labels(rows), ctx.manifest.num_classes,
                                        ctx.cfg, ctx.seed, first_layer=(s, ex))
    deepstack.save_model(model, ctx.out / "layers.ddsfl")


def _load(ctx: Context, name: str, stage: str) -> deepstack.DeepModel:
    return deepstack.load_model(ctx.need(name, stage))


def stage_extract(ctx: Context) -> None:
    model = _load(ctx, "layers.ddsfl", "train")
    images = ctx.images(range(len(ctx.manifest.entries)))
    for level in range(1, len(model.layers) + 1):
        blocks = []
        for i, img in enumerate(images):
            fm = deepstack.extract_features(img, model, level)
            first = True
            for s in np.unique(fm.scale_idx):
                sel = fm.scale_idx == s
                rows = np.column_stack([fm.centers[sel], fm.positions[sel], fm.vectors[sel]])
                blocks.append((str(i), fm.image_hw if first else None, int(s), rows))
                first = False
            if first:
                blocks.append((str(i), fm.image_hw, -1, np.zeros((0, 4 + model.layers[level - 1].num_filters))))
        atomic_write_bytes(ctx.out / f"features_layer{level}.bin", feature_blocks_bytes(blocks))
    log.info("extract: %d images, %d layers", len(images), len(model.layers))


def _feature_maps(ctx: Context, level: int) -> dict[int, deepstack.FeatureMap]:
    blocks, geometry = read_feature_blocks(ctx.need(f"features_layer{level}.bin", "extract"))
    parts: dict[int, list] = {}
    for image, scale, rows in blocks:
        parts.setdefault(int(image), []).append((scale, rows))
    out = {}
    for i, items in parts.items():
        rows = np.concatenate([r for _, r in items]) if items else np.zeros((0, 4))
        scales = np.concatenate([np.full(len(r), s, dtype=np.int64) for s, r in items])
        out[i] = deepstack.FeatureMap(np.ascontiguousarray(rows[:, 4:]), rows[:, :2].astype(np.float64), scales,
                                      rows[:, 2:4].astype(np.int64), geometry[str(i)])
    return out


def stage_codebook(ctx: Context) -> None:
    model = _load(ctx, "layers.ddsfl", "train")
    rows = ctx.rows("train")
    fmaps = []
    for level in range(1, len(model.layers) + 1):
        maps = _feature_maps(ctx, level)
        fmaps.append([maps[i] for i in rows])
    encodeclassify.fit_codebooks(model, fmaps, ctx.cfg, ctx.seed)
    deepstack.save_model(model, ctx.out / "encoder.ddsfl")


def stage_encode(ctx: Context) -> None:
    model = _load(ctx, "encoder.ddsfl", "codebook")
    maps = [_feature_maps(ctx, level) for level in range(1, len(model.layers) + 1)]
    n = len(ctx.manifest.entries)
    desc = np.stack([encodeclassify.describe_feature_maps([m[i] for m in maps], model) for i in range(n)])
    atomic_write_bytes(ctx.out / "descriptors.bin", matrix_bytes(desc))
    lines = ["row\tpath\tclass_id\tsplit"]
    lines += [f"{i}\t{e.path}\t{e.class_id}\t{e.split}" for i, e in enumerate(ctx.manifest.entries)]
    atomic_write_text(ctx.out / "descriptors_index.tsv", "\n".join(lines) + "\n")
    log.info("encode: %d descriptors of length %d", n, desc.shape[1])


def _descriptors(ctx: Context) -> np.ndarray:
    ctx.need("descriptors_index.tsv", "encode")
    return read_matrix(ctx.need("descriptors.bin", "encode"))


def stage_fit_classifier(ctx: Context) -> None:
    model = _load(ctx, "encoder.ddsfl", "codebook")
    desc = _descriptors(ctx)
    rows = ctx.rows("train")
    encodeclassify.fit_classifier(model, desc[rows], ctx.manifest.labels(rows), ctx.cfg, ctx.seed)
    deepstack.save_model(model, ctx.out / "model.ddsfl")


def stage_evaluate(ctx: Context, split: str = "test") -> encodeclassify.Metrics:
    if not (ctx.out / "model.ddsfl").exists():
        ctx.need("layers.ddsfl", "train")
        ctx.need("encoder.ddsfl", "codebook")
        ctx.need("model.ddsfl", "fit-classifier")
    model = deepstack.load_model(ctx.out / "model.ddsfl")
    desc = _descriptors(ctx)
    rows = ctx.rows(split)
    if not rows:
        raise ValueError(f"{split} split is empty")
    pred = encodeclassify.predict_descriptors(model, desc[rows])
    metrics = encodeclassify.compute_metrics(ctx.manifest.labels(rows), pred, model.num_classes)
    atomic_write_text(ctx.out / "metrics.tsv", metrics.to_tsv())
    atomic_write_text(ctx.out / "confusion.csv", metrics.confusion_csv())
    log.info("evaluate: %s accuracy %.4f", split, metrics.accuracy)
    return metrics


STAGES = {
    "patches": stage_patches,
    "exemplars": stage_exemplars,
    "train": stage_train,
    "extract": stage_extract,
    "codebook": stage_codebook,
    "encode": stage_encode,
    "fit-classifier": stage_fit_classifier,
    "evaluate": stage_evaluate,
}


def run_pipeline(ctx: Context) -> encodeclassify.Metrics:
    for name, fn in STAGES.items():
        log.info("stage %s", name)
        metrics = fn(ctx)
    return metrics


def resample_manifest(manifest: dataio.DatasetManifest, seed: int, split_id: int) -> dataio.DatasetManifest:
    """Re-draw train/test per class, keeping each class's original train count."""
    rng = np.random.default_rng([seed, 1000 + split_id])
    entries = [replace(e, path=str(manifest.image_path(i).resolve())) for i, e in enumerate(manifest.entries)]
    for c in range(manifest.num_classes):
        pool = [i for i, e in enumerate(entries) if e.class_id == c and e.split in ("train", "test")]
        n_train = sum(entries[i].split == "train" for i in pool)
        order = rng.permutation(len(pool))
        for rank, k in enumerate(order):
            entries[pool[k]] = replace(entries[pool[k]], split="train" if rank < n_train else "test")
    return dataio.DatasetManifest(entries, manifest.num_classes, Path("/"))


def _manifest_text(m: dataio.DatasetManifest) -> str:
    return "".join(f"{e.path}\t{e.class_id}\t{e.split}\n" for e in m.entries)


def run_splits(ctx: Context, n: int) -> list[float]:
    accs = []
    for k in range(n):
        m = resample_manifest(ctx.manifest, ctx.seed, k)
        sub = Context(ctx.cfg, ctx.out / f"split_{k}", ctx.seed + k, m)
        atomic_write_text(sub.out / "manifest.tsv", _manifest_text(m))
        accs.append(run_pipeline(sub).accuracy)
    mean, std = float(np.mean(accs)), float(np.std(accs))
    lines = [f"split_{k}\t{a:.6f}" for k, a in enumerate(accs)]
    lines += [f"mean\t{mean:.6f}", f"std\t{std:.6f}"]
    atomic_write_text(ctx.out / "summary.tsv", "\n".join(lines) + "\n")
    print(f"accuracy over {n} splits: {mean:.4f} +- {std:.4f}")
    return accs


# ------------------------------------------------------------------ sweep

def validation_rows(manifest: dataio.DatasetManifest, seed: int) -> tuple[list[int], list[int]]:
    """Validation split if the manifest has one, else every 5th training image per class."""
    val = manifest.split("val")
    train = manifest.split("train")
    if val:
        return train, val
    rng = np.random.default_rng([seed, 77])
    fit, held = [], []
    labels = manifest.labels(train)
    for c in range(manifest.num_classes):
        rows = [train[i] for i in np.flatnonzero(labels == c)]
        rows = [rows[i] for i in rng.permutation(len(rows))]
        n_held = max(1, len(rows) // 5) if len(rows) > 1 else 0
        held += rows[:n_held]
        fit += rows[n_held:]
    return sorted(fit), sorted(held)


def validation_accuracy(cfg: PipelineConfig, manifest, fit_rows, val_rows, seed: int, images: dict) -> float:
    tr = [images[i] for i in fit_rows]
    ytr = manifest.labels(fit_rows)
    model = deepstack.train_deep_images(tr, ytr, manifest.num_classes, cfg, seed)
    encodeclassify.fit_encoder_and_classifier(model, tr, ytr, cfg, seed)
    return encodeclassify.evaluate_images(model, [images[i] for i in val_rows], manifest.labels(val_rows)).accuracy


def run_sweep(ctx: Context, grid=SWEEP_GRID, params=SWEEP_PARAMS) -> PipelineConfig:
    """Coordinate search: one parameter at a time, each fixed at its best value before the next.

    Ties keep the earlier grid value.
    """
    manifest = ctx.manifest
    fit_rows, val_rows = validation_rows(manifest, ctx.seed)
    if not val_rows:
        raise ValueError("no validation images available for the sweep")
    images = {i: dataio.load_gray_image(manifest.image_path(i)) for i in fit_rows + val_rows}
    cfg = ctx.cfg
    lines = ["layer\tparam\tvalue\tval_accuracy"]
    for li, lc in enumerate(cfg.layers):
        if not lc.train:
            continue
        for name in params:
            best = None
            for v in grid:
                layers = list(cfg.layers)
                layers[li] = replace(lc, hyper=replace(lc.hyper, **{name: v}))
                trial = replace(cfg, layers=layers)
                acc = validation_accuracy(trial, manifest, fit_rows, val_rows, ctx.seed, images)
                lines.append(f"{li + 1}\t{name}\t{v!r}\t{acc:.6f}")
                log.info("sweep layer %d %s=%g: %.4f", li + 1, name, v, acc)
                if best is None or acc > best[0]:
                    best = (acc, trial)
            cfg = best[1]
            lc = cfg.layers[li]
    atomic_write_text(ctx.out / "sweep.tsv", "\n".join(lines) + "\n")
    atomic_write_text(ctx.out / "best_config.ini", cfg.to_ini())
    return cfg


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI config file")
    common.add_argument("--seed", type=int, default=None, help="overrides [pipeline] seed")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    common.add_argument("--splits", type=int, default=None, help="random train/test splits (pipeline only)")
    common.add_argument("--out", default="out", help="artifact directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="config override, repeatable")
    p = argparse.ArgumentParser(prog="ddsfl", description="Deep discriminative and shareable feature learning")
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["pipeline", "sweep"]:
        sub.add_parser(name, parents=[common])
    return p


def _configure_logging() -> None:
    level = os.environ.get("DDSFL_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    _configure_logging()
    try:
        cfg = apply_overrides(load_config(args.config), args.set)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.splits is not None:
            if args.splits < 1:
                raise ConfigError("--splits must be >= 1")
            cfg = replace(cfg, num_splits=args.splits)
        cfg.validate()
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        log.error("config: %s", exc)
        return EXIT_USAGE
    log.info("config hash %s seed %d", cfg.hash(), cfg.seed)
    ctx = Context(cfg, Path(args.out), cfg.seed)
    try:
        with _thread_limit(args.threads):
            if args.command == "pipeline":
                if cfg.num_splits > 1:
                    run_splits(ctx, cfg.num_splits)
                else:
                    m = run_pipeline(ctx)
                    print(f"accuracy {m.accuracy:.4f}")
            elif args.command == "sweep":
                run_sweep(ctx)
            else:
                result = STAGES[args.command](ctx)
                if isinstance(result, encodeclassify.Metrics):
                    print(f"accuracy {result.accuracy:.4f}")
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except MissingArtifact as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_USAGE
    except (dataio.ManifestError, deepstack.ModelFormatError, OSError, ValueError, KeyError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
