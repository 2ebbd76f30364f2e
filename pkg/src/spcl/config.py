"""Strict JSON experiment configuration.

Unknown keys are errors with their dotted path; every field is
range-checked. CLI flags override config keys one-to-one. The resolved
spec round-trips through ``to_dict`` unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .trainer import METHODS, SETTINGS, TrainConfig

DEFAULT_SEEDS = (1231, 1232, 1233, 1234, 1235)

TRAIN_REQUIRED = ("lr", "method", "setting", "buffer_capacity")
TRAIN_OPTIONAL = {
    "batch_size": 32,
    "epochs_per_task": 50,
    "metasp_last_epochs": 5,
    "pseudo_iterations": 1,
    "val_batch_sizes": (32, 32),
    "val_pool_fraction": 0.1,
    "hidden_dims": (32,),
    "activation": "relu",
}

STREAM_SCHEMAS = {
    "split_gaussians": {
        "required": ("num_tasks", "classes_per_task", "dim", "n_train", "n_test", "separation", "seed"),
        "optional": {},
    },
    "split_digits": {
        "required": ("num_tasks", "seed", "path"),
        "optional": {},
    },
}


@dataclass(frozen=True)
class StreamConfig:
    kind: str
    params: tuple  # sorted (key, value) pairs

    def as_dict(self) -> dict:
        return {"kind": self.kind, **dict(self.params)}

    def build(self):
        from . import data

        kwargs = dict(self.params)
        if self.kind == "split_gaussians":
            return data.make_split_gaussians(**kwargs)
        return data.make_split_digits(**kwargs)


@dataclass(frozen=True)
class ExperimentSpec:
    stream: StreamConfig
    train: tuple  # sorted (key, value) pairs, no seed
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    out_dir: str

    def train_kwargs(self) -> dict:
        return dict(self.train)

    def train_config(self, method: str, seed: int) -> TrainConfig:
        kwargs = self.train_kwargs()
        kwargs["method"] = method
        return TrainConfig(seed=seed, **kwargs)

    def to_dict(self) -> dict:
        train = dict(self.train)
        train["val_batch_sizes"] = list(train["val_batch_sizes"])
        train["hidden_dims"] = list(train["hidden_dims"])
        return {
            "stream": self.stream.as_dict(),
            "train": train,
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
        }


def _require_keys(section: dict, required, optional, path: str) -> dict:
    unknown = set(section) - set(required) - set(optional)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{path}.{key}: unknown key")
    for key in required:
        if key not in section:
            raise ConfigError(f"{path}.{key}: missing required field")
    merged = dict(optional)
    merged.update(section)
    return merged


def _as_int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return value


def _as_number(value, path, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected number, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(f"{path}: must be positive, got {value}")
    return float(value)


def parse_stream(section, path="stream") -> StreamConfig:
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected object")
    kind = section.get("kind")
    if kind not in STREAM_SCHEMAS:
        raise ConfigError(
            f"{path}.kind: expected one of {sorted(STREAM_SCHEMAS)}, got {kind!r}"
        )
    schema = STREAM_SCHEMAS[kind]
    body = {k: v for k, v in section.items() if k != "kind"}
    merged = _require_keys(body, schema["required"], schema["optional"], path)
    if kind == "split_gaussians":
        for key in ("num_tasks", "classes_per_task", "dim", "n_train", "n_test", "seed"):
            merged[key] = _as_int(merged[key], f"{path}.{key}", minimum=0 if key == "seed" else 1)
        merged["separation"] = _as_number(merged["separation"], f"{path}.separation", positive=True)
    else:
        merged["num_tasks"] = _as_int(merged["num_tasks"], f"{path}.num_tasks", minimum=1)
        merged["seed"] = _as_int(merged["seed"], f"{path}.seed", minimum=0)
        if not isinstance(merged["path"], str):
            raise ConfigError(f"{path}.path: expected string path")
    return StreamConfig(kind=kind, params=tuple(sorted(merged.items())))


def parse_train(section, path="train") -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected object")
    merged = _require_keys(section, TRAIN_REQUIRED, TRAIN_OPTIONAL, path)
    merged["lr"] = _as_number(merged["lr"], f"{path}.lr", positive=True)
    if merged["method"] not in METHODS:
        raise ConfigError(f"{path}.method: expected one of {METHODS}, got {merged['method']!r}")
    if merged["setting"] not in SETTINGS:
        raise ConfigError(f"{path}.setting: expected one of {SETTINGS}, got {merged['setting']!r}")
    for key in ("buffer_capacity", "batch_size", "epochs_per_task", "pseudo_iterations"):
        merged[key] = _as_int(merged[key], f"{path}.{key}", minimum=1)
    merged["metasp_last_epochs"] = _as_int(
        merged["metasp_last_epochs"], f"{path}.metasp_last_epochs", minimum=0
    )
    if merged["metasp_last_epochs"] > merged["epochs_per_task"]:
        raise ConfigError(
            f"{path}.metasp_last_epochs: must be <= epochs_per_task "
            f"({merged['metasp_last_epochs']} > {merged['epochs_per_task']})"
        )
    vbs = merged["val_batch_sizes"]
    if not isinstance(vbs, (list, tuple)) or len(vbs) != 2:
        raise ConfigError(f"{path}.val_batch_sizes: expected a pair of integers")
    merged["val_batch_sizes"] = tuple(
        _as_int(v, f"{path}.val_batch_sizes[{i}]", minimum=1) for i, v in enumerate(vbs)
    )
    merged["val_pool_fraction"] = _as_number(
        merged["val_pool_fraction"], f"{path}.val_pool_fraction", positive=True
    )
    if merged["val_pool_fraction"] > 1.0:
        raise ConfigError(f"{path}.val_pool_fraction: must be <= 1.0")
    hd = merged["hidden_dims"]
    if not isinstance(hd, (list, tuple)):
        raise ConfigError(f"{path}.hidden_dims: expected a list of integers")
    merged["hidden_dims"] = tuple(_as_int(h, f"{path}.hidden_dims[{i}]", minimum=1) for i, h in enumerate(hd))
    if merged["activation"] not in ("relu", "tanh"):
        raise ConfigError(f"{path}.activation: expected relu or tanh")
    return merged


def parse_spec(doc: dict) -> ExperimentSpec:
    if not isinstance(doc, dict):
        raise ConfigError("config root: expected object")
    merged = _require_keys(
        doc,
        ("stream", "train"),
        {"methods": None, "seeds": list(DEFAULT_SEEDS), "out_dir": "runs/experiment"},
        "config",
    )
    stream = parse_stream(merged["stream"])
    train = parse_train(merged["train"])
    methods = merged["methods"]
    if methods is None:
        methods = [train["method"]]
    if not isinstance(methods, (list, tuple)) or not methods:
        raise ConfigError("config.methods: expected a non-empty list")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"config.methods: expected one of {METHODS}, got {m!r}")
    seeds = merged["seeds"]
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise ConfigError("config.seeds: expected a non-empty list of integers")
    seeds = tuple(_as_int(s, f"config.seeds[{i}]", minimum=0) for i, s in enumerate(seeds))
    if not isinstance(merged["out_dir"], str) or not merged["out_dir"]:
        raise ConfigError("config.out_dir: expected a non-empty string")
    return ExperimentSpec(
        stream=stream,
        train=tuple(sorted(train.items())),
        methods=tuple(methods),
        seeds=seeds,
        out_dir=merged["out_dir"],
    )


def parse_config(path) -> ExperimentSpec:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_spec(doc)


_FLAG_TO_KEY = {
    "method": ("train", "method"),
    "setting": ("train", "setting"),
    "buffer_size": ("train", "buffer_capacity"),
    "epochs": ("train", "epochs_per_task"),
    "metasp_epochs": ("train", "metasp_last_epochs"),
    "pseudo_iters": ("train", "pseudo_iterations"),
}


def apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    """Fold CLI flags back into the spec (flag name = dotted key path)."""
    doc = spec.to_dict()
    for flag, (section, key) in _FLAG_TO_KEY.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[section][key] = value
    if getattr(args, "method", None) is not None:
        doc["methods"] = [args.method]
    if getattr(args, "seeds", None):
        doc["seeds"] = list(args.seeds)
    if getattr(args, "seed", None) is not None:
        doc["seeds"] = [args.seed]
    if getattr(args, "out", None) is not None:
        doc["out_dir"] = args.out
    return parse_spec(doc)
