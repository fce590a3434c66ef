"""Experiment configuration: a JSON document checked against :data:`CONFIG_SCHEMA`.

Validation happens before any data is loaded or any model is built. Unknown
keys are rejected at every level.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from ..data import ClassSplitDataset, SyntheticBlobSpec, load_idx, make_blobs, split_retain_forget
from ..errors import ConfigError, UnlearnFairError
from ..nn import ARCH_NAMES, CAPTURE_POINTS, ModelArch
from ..training import OptimizerConfig, TrainConfig
from ..unlearning import METHODS, ScrubConfig, UnlearnMethod

_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}

_OPTIMIZER = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "learning_rate"],
    "properties": {
        "kind": {"enum": ["adam", "sgd"]},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_epsilon": {"type": "number", "exclusiveMinimum": 0},
    },
}

_BLOBS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"const": "blobs"},
        "num_classes": {"type": "integer", "minimum": 2},
        "per_class_n": _pos_int,
        "test_per_class_n": _pos_int,
        "dim": _pos_int,
        "class_center_scale": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "class_sigma": {
            "oneOf": [
                {"type": "number", "minimum": 0},
                {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2},
            ]
        },
        "seed": _nonneg_int,
    },
}

_IDX = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "train_images", "train_labels", "test_images", "test_labels"],
    "properties": {
        "kind": {"const": "idx"},
        "train_images": {"type": "string"},
        "train_labels": {"type": "string"},
        "test_images": {"type": "string"},
        "test_labels": {"type": "string"},
        "num_classes": {"type": ["integer", "null"], "minimum": 2},
    },
}

_ARCH = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name"],
    "properties": {
        "name": {"enum": list(ARCH_NAMES)},
        "widths": {"type": "array", "items": _pos_int, "minItems": 3},
        "image_shape": {"type": ["array", "null"], "items": _pos_int, "minItems": 3, "maxItems": 3},
        "kernel_size": {"type": "integer", "minimum": 1},
        "norm_eps": {"type": "number", "exclusiveMinimum": 0},
        "bn_momentum": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "capture_point": {"enum": list(CAPTURE_POINTS)},
    },
}

_SCRUB = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "max_steps_per_epoch": _nonneg_int,
        "min_steps_per_epoch": _nonneg_int,
        "distill_temperature": {"type": "number", "exclusiveMinimum": 0},
        "retain_ce_weight": {"type": "number", "minimum": 0},
    },
}

_METHOD = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(METHODS)},
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "epochs": _nonneg_int,
        "batch_size": _pos_int,
        "optimizer": _OPTIMIZER,
        "freeze_k": {"type": ["integer", "null"], "minimum": 1},
        "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "eta": {"type": "number", "minimum": 0},
        "static_targets": {"type": "boolean"},
        "scrub": _SCRUB,
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "unlearnfair experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "arch", "forget_class", "train", "methods", "seeds", "etas", "output_dir"],
    "properties": {
        "dataset": {"oneOf": [_BLOBS, _IDX]},
        "arch": _ARCH,
        "forget_class": _nonneg_int,
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["epochs", "optimizer"],
            "properties": {"epochs": _nonneg_int, "batch_size": _pos_int, "optimizer": _OPTIMIZER},
        },
        "methods": {"type": "array", "items": _METHOD},
        "seeds": {"type": "array", "items": _nonneg_int, "minItems": 1, "uniqueItems": True},
        "etas": {"type": "array", "items": {"type": "number", "minimum": 0}, "uniqueItems": True},
        "freeze_k": {"type": ["integer", "null"], "minimum": 1},
        "ddof": {"enum": [0, 1]},
        "output_dir": {"type": "string", "minLength": 1},
    },
}

# Small, quick task used by the acceptance suite. Learning rates are larger
# than the full-scale values because runs are 30-50 epochs on 800 samples.
DEFAULT_CONFIG = {
    "dataset": {
        "kind": "blobs",
        "num_classes": 4,
        "per_class_n": 200,
        "test_per_class_n": 100,
        "dim": 16,
        "class_center_scale": 1.0,
        "class_sigma": 0.2,
        "seed": 0,
    },
    "arch": {"name": "mlp_bn", "widths": [32, 32, 32]},
    "forget_class": 3,
    "train": {
        "epochs": 30,
        "batch_size": 32,
        "optimizer": {"kind": "adam", "learning_rate": 1e-3, "momentum": 0.9, "weight_decay": 5e-4},
    },
    "methods": [
        {"kind": "retrain"},
        {
            "kind": "cf",
            "epochs": 50,
            "optimizer": {"kind": "adam", "learning_rate": 1e-2, "momentum": 0.9, "weight_decay": 5e-4},
        },
        {
            "kind": "rl",
            "epochs": 50,
            "optimizer": {"kind": "adam", "learning_rate": 1e-2, "momentum": 0.9, "weight_decay": 5e-4},
        },
        {
            "kind": "bs",
            "epochs": 50,
            "eta": 0.1,
            "optimizer": {"kind": "sgd", "learning_rate": 1e-4, "momentum": 0.0, "weight_decay": 0.0},
        },
        {
            "kind": "salun",
            "epochs": 50,
            "fraction": 0.5,
            "optimizer": {"kind": "sgd", "learning_rate": 1e-1, "momentum": 0.9, "weight_decay": 5e-4},
        },
        {
            "kind": "scrub",
            "epochs": 50,
            "optimizer": {"kind": "adam", "learning_rate": 1e-2, "momentum": 0.9, "weight_decay": 0.0},
        },
    ],
    "seeds": [0, 1, 2, 3, 4],
    "etas": [0.0, 0.05, 0.2],
    "freeze_k": None,
    "ddof": 0,
    "output_dir": "runs/desk",
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


@dataclass(frozen=True)
class MethodSpec:
    """One configured method; ``name`` tells apart variants of the same kind."""

    name: str
    method: UnlearnMethod

    @property
    def kind(self) -> str:
        return self.method.kind


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    dataset: dict
    arch: ModelArch
    forget_class: int
    train_cfg: TrainConfig
    train_opt: OptimizerConfig
    methods: tuple[MethodSpec, ...]
    seeds: tuple[int, ...]
    etas: tuple[float, ...]
    freeze_k: int | None
    ddof: int
    output_dir: Path
    base_dir: Path = field(default=Path("."))

    @property
    def digest(self) -> str:
        """SHA-256 of the canonical JSON of the config, output directory excluded."""
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def method(self, name: str) -> MethodSpec:
        for m in self.methods:
            if m.name == name:
                return m
        raise ConfigError(f"no method named {name!r} in the config")

    def with_output_dir(self, path) -> "ExperimentConfig":
        raw = dict(self.raw, output_dir=str(path))
        return parse_config(raw, self.base_dir)

    def load_split(self) -> ClassSplitDataset:
        train, test = _load_datasets(self.dataset, self.base_dir)
        return split_retain_forget(train, test, self.forget_class)


def _optimizer(d: dict) -> OptimizerConfig:
    return OptimizerConfig(**d)


def _load_datasets(ds: dict, base: Path):
    if ds["kind"] == "blobs":
        spec = _blob_spec(ds)
        return make_blobs(spec, "train"), make_blobs(spec, "test")
    C = ds.get("num_classes")
    paths = [base / ds[k] for k in ("train_images", "train_labels", "test_images", "test_labels")]
    train = load_idx(paths[0], paths[1], C)
    test = load_idx(paths[2], paths[3], C if C is not None else train.num_classes)
    return train, test


def _blob_spec(ds: dict) -> SyntheticBlobSpec:
    kw = {k: v for k, v in ds.items() if k != "kind"}
    if isinstance(kw.get("class_sigma"), list):
        kw["class_sigma"] = tuple(kw["class_sigma"])
    spec = SyntheticBlobSpec(**kw)
    spec.validate()
    return spec


def _schema_error(err: jsonschema.ValidationError) -> ConfigError:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return ConfigError(f"config invalid at {where}: {err.message}")


def validate_config(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise _schema_error(errors[0])


def parse_config(raw: dict, base_dir=".") -> ExperimentConfig:
    """Validate ``raw`` and build typed configs.

    Relative dataset paths resolve against ``base_dir`` (the config file's
    directory when loaded from disk); IDX training files are read once to
    learn the input shape. Retraining is the reference for every other
    method, so a non-empty method list always gets it, in first position.
    """
    validate_config(raw)
    raw = copy.deepcopy(raw)
    base = Path(base_dir)
    ds = raw["dataset"]
    try:
        if ds["kind"] == "blobs":
            spec = _blob_spec(ds)
            num_classes, input_shape = spec.num_classes, (spec.dim,)
        else:
            num_classes, input_shape = _idx_header(ds, base)
        a = dict(raw["arch"])
        if a["name"] == "cnn_bn" and a.get("image_shape") is None:
            if len(input_shape) == 2:
                a["image_shape"] = (1, *input_shape)
            elif len(input_shape) == 3:
                a["image_shape"] = input_shape
        arch = ModelArch(input_shape=input_shape, num_classes=num_classes, **a)
        arch.validate()
        f = raw["forget_class"]
        if f >= num_classes:
            raise ConfigError(f"forget_class {f} outside [0, {num_classes})")
        tr = raw["train"]
        train_cfg = TrainConfig(epochs=tr["epochs"], batch_size=tr.get("batch_size", 32))
        train_opt = _optimizer(tr["optimizer"])
        default_k = raw.get("freeze_k")
        methods = []
        seen = set()
        for m in raw["methods"]:
            name = m.get("name", m["kind"])
            if name in seen:
                raise ConfigError(f"duplicate method name {name!r}; give variants distinct names")
            seen.add(name)
            kw = {k: v for k, v in m.items() if k not in ("name", "optimizer", "scrub")}
            if "optimizer" in m:
                kw["optimizer"] = _optimizer(m["optimizer"])
            if "scrub" in m:
                kw["scrub"] = ScrubConfig(**m["scrub"])
            kw.setdefault("freeze_k", default_k)
            if kw["freeze_k"] is not None and kw["freeze_k"] > len(arch.widths) + 1:
                raise ConfigError(f"freeze_k {kw['freeze_k']} exceeds {len(arch.widths) + 1}")
            methods.append(MethodSpec(name, UnlearnMethod(**kw)))
        if "original" in seen:
            raise ConfigError("'original' is reserved for the trained model")
        retrains = [m for m in methods if m.kind == "retrain"]
        if len(retrains) > 1:
            raise ConfigError("retrain may be listed at most once")
        if methods and not retrains:
            retrains = [MethodSpec("retrain", UnlearnMethod("retrain"))]
        methods = retrains + [m for m in methods if m.kind != "retrain"]
    except ConfigError:
        raise
    except (UnlearnFairError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        raw=raw,
        dataset=ds,
        arch=arch,
        forget_class=f,
        train_cfg=train_cfg,
        train_opt=train_opt,
        methods=tuple(methods),
        seeds=tuple(raw["seeds"]),
        etas=tuple(float(e) for e in raw["etas"]),
        freeze_k=default_k,
        ddof=raw.get("ddof", 0),
        output_dir=Path(raw["output_dir"]) if Path(raw["output_dir"]).is_absolute() else base / raw["output_dir"],
        base_dir=base,
    )


def _idx_header(ds: dict, base: Path) -> tuple[int, tuple[int, ...]]:
    train = load_idx(base / ds["train_images"], base / ds["train_labels"], ds.get("num_classes"))
    return train.num_classes, tuple(train.inputs.shape[1:])


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(raw, path.parent)
