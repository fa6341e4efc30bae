"""Pipeline configuration: dataclasses plus an INI reader/writer.

Sections: ``[data]``, ``[pipeline]``, ``[exemplar]``, ``[layer1]`` ...
``[layerL]``, ``[encode]``, ``[classifier]``. Keys mirror the dataclass
field names; anything missing keeps its default.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .dsfl import LayerHyperparams
from .exemplar import NNSelectConfig, SVMSelectConfig


class ConfigError(ValueError):
    pass


@dataclass
class LayerConfig:
    receptive_field: int = 16
    grid: int = 1
    grid_stride: int = 0
    num_scales: int = 6
    step: int = 3
    num_filters: int = 400
    pca_dim: int | None = None
    train: bool = True
    hyper: LayerHyperparams = field(default_factory=LayerHyperparams)


def default_layers(num_layers: int = 3) -> list[LayerConfig]:
    presets = [
        LayerConfig(16, 1, 0, 6, 3, 400, None),
        LayerConfig(32, 3, 8, 5, 6, 400, 300),
        LayerConfig(64, 3, 16, 3, 6, 400, 300),
    ]
    if not 1 <= num_layers <= len(presets):
        raise ConfigError("num_layers must be 1, 2 or 3")
    return presets[:num_layers]


@dataclass
class PipelineConfig:
    manifest: str | None = None
    layers: list[LayerConfig] = field(default_factory=default_layers)
    patches_per_image: int = 4000
    exemplar_method: str = "nn"
    nn: NNSelectConfig = field(default_factory=NNSelectConfig)
    svm: SVMSelectConfig = field(default_factory=SVMSelectConfig)
    lu_size: int | None = None
    codebook_size: int = 2000
    codebook_samples: int = 100_000
    kmeans_iters: int = 30
    llc_knn: int = 5
    llc_beta: float = 1e-4
    pool_abs: bool = True
    svm_lambda: float = 1e-4
    svm_epochs: int = 20
    seed: int = 0
    num_splits: int = 1

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("at least one layer required")
        if self.exemplar_method not in ("nn", "svm", "none"):
            raise ConfigError(f"unknown exemplar method {self.exemplar_method!r}")
        if self.layers[0].grid != 1 or self.layers[0].pca_dim is not None:
            raise ConfigError("layer 1 works on raw patches: grid must be 1 and pca_dim unset")
        for i, lc in enumerate(self.layers[1:], start=2):
            prev = self.layers[i - 2]
            if lc.pca_dim is None or lc.pca_dim < 1:
                raise ConfigError(f"layer {i} needs pca_dim")
            if lc.grid < 1 or lc.grid_stride < 1:
                raise ConfigError(f"layer {i} needs grid >= 1 and grid_stride >= 1")
            covered = (lc.grid - 1) * lc.grid_stride + prev.receptive_field
            if covered != lc.receptive_field:
                raise ConfigError(f"layer {i}: grid covers {covered}px but receptive_field is {lc.receptive_field}")
            if lc.pca_dim > lc.grid * lc.grid * prev.num_filters:
                raise ConfigError(f"layer {i}: pca_dim exceeds aggregated input dimension")
        if self.llc_knn > self.codebook_size:
            raise ConfigError("llc_knn exceeds codebook_size")
        if self.patches_per_image < 1:
            raise ConfigError("patches_per_image must be >= 1")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["data"] = {} if self.manifest is None else {"manifest": self.manifest}
        cp["pipeline"] = {
            "num_layers": str(len(self.layers)),
            "patches_per_image": str(self.patches_per_image),
            "lu_size": "" if self.lu_size is None else str(self.lu_size),
            "seed": str(self.seed),
            "num_splits": str(self.num_splits),
        }
        ex = {"method": self.exemplar_method}
        ex.update({f"nn_{k}": str(v) for k, v in dataclasses.asdict(self.nn).items()})
        ex.update({f"svm_{k}": "" if v is None else str(v) for k, v in dataclasses.asdict(self.svm).items()})
        cp["exemplar"] = ex
        for i, lc in enumerate(self.layers, start=1):
            sec = {k: "" if v is None else str(v) for k, v in dataclasses.asdict(lc).items() if k != "hyper"}
            sec.update({k: "" if v is None else str(v) for k, v in dataclasses.asdict(lc.hyper).items()})
            cp[f"layer{i}"] = sec
        cp["encode"] = {"codebook_size": str(self.codebook_size), "codebook_samples": str(self.codebook_samples),
                        "kmeans_iters": str(self.kmeans_iters), "llc_knn": str(self.llc_knn),
                        "llc_beta": repr(self.llc_beta), "pool_abs": str(self.pool_abs)}
        cp["classifier"] = {"lambda": repr(self.svm_lambda), "epochs": str(self.svm_epochs)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


def _coerce(value: str, default, annotation: str):
    value = value.strip()
    if value == "" and ("None" in annotation or default is None):
        return None
    if isinstance(default, bool) or annotation.startswith("bool"):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, int) or annotation.startswith("int"):
        return int(value)
    if isinstance(default, float) or annotation.startswith("float"):
        return float(value)
    return value


def _apply(obj, items: dict, prefix: str = "", section: str = ""):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in items.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
        if key not in fields or key == "hyper":
            continue
        f = fields[key]
        try:
            updates[key] = _coerce(raw, getattr(obj, key), str(f.type))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {prefix}{key}: {exc}") from None
    return dataclasses.replace(obj, **updates)


_KNOWN = {
    "data": {"manifest"},
    "pipeline": {"num_layers", "patches_per_image", "lu_size", "seed", "num_splits"},
    "encode": {"codebook_size", "codebook_samples", "kmeans_iters", "llc_knn", "llc_beta", "pool_abs"},
    "classifier": {"lambda", "epochs"},
}


def parse_config(text: str, base_dir: Path | str | None = None) -> PipelineConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for sec, keys in _KNOWN.items():
        if cp.has_section(sec):
            unknown = set(cp[sec]) - keys
            if unknown:
                raise ConfigError(f"[{sec}] unknown keys: {sorted(unknown)}")
    cfg = PipelineConfig()
    if cp.has_option("data", "manifest"):
        m = cp.get("data", "manifest")
        if base_dir is not None and not Path(m).is_absolute():
            m = str(Path(base_dir) / m)
        cfg.manifest = m
    p = cp["pipeline"] if cp.has_section("pipeline") else {}
    n_layers = int(p.get("num_layers", len(cfg.layers)))
    extra = [s for s in cp.sections() if s.startswith("layer") and int(s[5:] or 0) > n_layers]
    if extra:
        raise ConfigError(f"sections {extra} exceed num_layers={n_layers}")
    cfg.layers = default_layers(n_layers)
    cfg = _apply(cfg, {k: v for k, v in p.items() if k != "num_layers"}, section="pipeline")
    if cp.has_section("exemplar"):
        ex = dict(cp["exemplar"])
        cfg.exemplar_method = ex.get("method", cfg.exemplar_method)
        cfg.nn = _apply(cfg.nn, ex, "nn_", "exemplar")
        cfg.svm = _apply(cfg.svm, ex, "svm_", "exemplar")
    layers = []
    for i, lc in enumerate(cfg.layers, start=1):
        if cp.has_section(f"layer{i}"):
            items = dict(cp[f"layer{i}"])
            lc = _apply(lc, items, section=f"layer{i}")
            lc.hyper = _apply(lc.hyper, items, section=f"layer{i}")
        layers.append(lc)
    cfg.layers = layers
    if cp.has_section("encode"):
        cfg = _apply(cfg, dict(cp["encode"]), section="encode")
    if cp.has_section("classifier"):
        c = cp["classifier"]
        if "lambda" in c:
            cfg.svm_lambda = float(c["lambda"])
        if "epochs" in c:
            cfg.svm_epochs = int(c["epochs"])
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


def apply_overrides(cfg: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply ``section.key=value`` overrides by round-tripping through INI."""
    if not overrides:
        return cfg
    cp = configparser.ConfigParser()
    cp.read_string(cfg.to_ini())
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][key] = value
    buf = io.StringIO()
    cp.write(buf)
    return parse_config(buf.getvalue())
