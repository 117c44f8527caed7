"""One-file TOML experiment configuration.

Sections [data], [transforms], [model], [objective], [optim], [eval] map onto
the generator, view pipeline, architecture, objective, optimizer, and
evaluation settings.  Unknown keys are rejected, every default is
materialized into the resolved config echoed by the CLI, and validation
errors name the offending section.key.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bagstore import BagError, SyntheticSpec
from .errors import ConfigError
from .objectives import ObjectiveConfig, ObjectiveError
from .trainer import ModelConfig, TrainConfig
from .transforms import TransformConfig, TransformError

__all__ = ["ExperimentConfig", "EvalSettings", "load_config", "config_from_dict", "config_help"]

_BOOL, _INT, _FLOAT, _STR = "bool", "int", "float", "str"
_PAIR = "pair of numbers"
_MATRIX = "list of rows of numbers"

# (type, default, help); defaults of None mean "derived", noted in help.
_SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "num_classes": (_INT, 3, "number of classes in the synthetic dataset"),
        "bags_per_class": (_INT, 100, "training bags generated per class"),
        "val_bags_per_class": (_INT, 0, "validation bags per class (0: bags_per_class // 2)"),
        "grid_side": (_INT, 20, "slide grid is grid_side x grid_side cells"),
        "tokens_per_bag": (_INT, 256, "tokens per bag (distinct grid cells)"),
        "dim": (_INT, 16, "embedding width of generated tokens"),
        "num_phenotypes": (_INT, 4, "Gaussian phenotype centers shared across classes"),
        "phenotype_separation": (_FLOAT, 1.0, "center scale; 0 removes all class signal"),
        "class_mixture": (_MATRIX, None, "per-class phenotype proportions (default: peaked)"),
        "noise_sigma": (_FLOAT, 1.0, "per-token isotropic noise level"),
        "seed": (_INT, 0, "generator seed"),
    },
    "transforms": {
        "use_split": (_BOOL, False, "partition tokens into two disjoint views first"),
        "split_ratio": (_FLOAT, 0.5, "fraction of tokens assigned to the first view"),
        "use_crop": (_BOOL, True, "keep tokens inside a random coordinate rectangle"),
        "crop_area_range": (_PAIR, [16.0, 100.0], "crop area range, grid cells squared"),
        "crop_aspect_range": (_PAIR, [0.75, 4.0 / 3.0], "crop aspect ratio range"),
        "use_mask": (_BOOL, True, "keep a random token subset"),
        "mask_ratio_range": (_PAIR, [0.3, 0.8], "mask keep-ratio range, in (0, 1]"),
        "max_token_limit": (_INT, 64, "cap on tokens per view (0: unbounded)"),
    },
    "model": {
        "d_model": (_INT, 128, "transformer width"),
        "n_layers": (_INT, 6, "transformer blocks"),
        "n_heads": (_INT, 4, "attention heads"),
        "ffn_mult": (_INT, 4, "feed-forward width multiplier"),
        "d_proj": (_INT, 64, "projection head output width"),
        "fourier_dim": (_INT, 64, "positional Fourier feature width (even)"),
        "pos_hidden": (_INT, 0, "positional MLP hidden width (0: 2 * d_model)"),
        "freq_init_std": (_FLOAT, 2.0**-0.5, "stddev of Fourier frequency init"),
    },
    "objective": {
        "name": (_STR, "simclr", "one of simclr, byol, vicreg, supcon"),
        "temperature": (_FLOAT, 0.1, "softmax temperature (simclr, supcon)"),
        "vicreg_invariance": (_FLOAT, 25.0, "vicreg invariance coefficient"),
        "vicreg_variance": (_FLOAT, 25.0, "vicreg variance-hinge coefficient"),
        "vicreg_covariance": (_FLOAT, 1.0, "vicreg covariance coefficient"),
        "vicreg_gamma": (_FLOAT, 1.0, "vicreg target standard deviation"),
        "vicreg_eps": (_FLOAT, 1e-4, "vicreg variance epsilon"),
        "byol_momentum": (_FLOAT, 0.99, "target-network EMA momentum, in [0, 1)"),
    },
    "optim": {
        "batch_size": (_INT, 64, "bags per optimizer step (last partial batch dropped)"),
        "epochs": (_INT, 100, "passes over the training bags"),
        "lr_max": (_FLOAT, 1e-3, "peak learning rate after warmup"),
        "lr_min": (_FLOAT, 1e-6, "final learning rate of the cosine decay"),
        "warmup_frac": (_FLOAT, 0.1, "fraction of steps spent in linear warmup"),
        "weight_decay": (_FLOAT, 1e-4, "decoupled weight decay"),
        "beta1": (_FLOAT, 0.9, "Adam first-moment decay"),
        "beta2": (_FLOAT, 0.999, "Adam second-moment decay"),
        "adam_eps": (_FLOAT, 1e-8, "Adam denominator epsilon"),
        "seed": (_INT, 0, "training seed (init, shuffles, view draws)"),
        "checkpoint_every": (_INT, 0, "periodic checkpoint interval in steps (0: final only)"),
    },
    "eval": {
        "k": (_INT, 5, "neighbors for the kNN protocol"),
        "metric": (_STR, "cosine", "kNN distance: cosine or euclidean"),
        "probe_l2": (_FLOAT, 1e-3, "linear probe L2 penalty"),
        "probe_max_iter": (_INT, 2000, "linear probe iteration cap"),
        "probe_tol": (_FLOAT, 1e-6, "linear probe gradient-norm tolerance"),
        "workers": (_INT, 0, "feature-extraction workers (0: logical cores)"),
        "heatmap_layer": (_INT, -1, "attention layer for heatmaps (-1: last)"),
        "heatmap_head": (_STR, "mean", "attention head for heatmaps: 'mean' or an index"),
    },
}


@dataclass
class EvalSettings:
    k: int = 5
    metric: str = "cosine"
    probe_l2: float = 1e-3
    probe_max_iter: int = 2000
    probe_tol: float = 1e-6
    workers: int = 0
    heatmap_layer: int = -1
    heatmap_head: str = "mean"

    def resolved_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


@dataclass
class ExperimentConfig:
    """Typed view of one resolved TOML file."""

    data: SyntheticSpec
    train: TrainConfig
    eval: EvalSettings
    resolved: dict

    def train_seeded(self, seed: int | None = None) -> TrainConfig:
        if seed is not None:
            self.train.seed = seed
        return self.train


def _check_type(section: str, key: str, kind: str, value):
    where = f"{section}.{key}"
    if kind == _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if kind == _STR:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if kind == _PAIR:
        if (not isinstance(value, (list, tuple)) or len(value) != 2
                or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value)):
            raise ConfigError(f"{where} must be a [min, max] pair of numbers, got {value!r}")
        return [float(value[0]), float(value[1])]
    if kind == _MATRIX:
        if value is None:
            return None
        if (not isinstance(value, list)
                or any(not isinstance(row, list) for row in value)
                or any(isinstance(v, bool) or not isinstance(v, (int, float))
                       for row in value for v in row)):
            raise ConfigError(f"{where} must be a list of numeric rows, got {value!r}")
        return [[float(v) for v in row] for row in value]
    raise AssertionError(kind)


def _resolve(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table of sections")
    for section in raw:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(raw[section], dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in raw[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key: {section}.{key}")
    resolved = {}
    for section, keys in _SCHEMA.items():
        resolved[section] = {}
        for key, (kind, default, _help) in keys.items():
            value = raw.get(section, {}).get(key, default)
            if value is not None:
                value = _check_type(section, key, kind, value)
            resolved[section][key] = value
    return resolved


def config_from_dict(raw: dict) -> ExperimentConfig:
    resolved = _resolve(raw)
    d = resolved["data"]
    data = SyntheticSpec(
        num_classes=d["num_classes"], bags_per_class=d["bags_per_class"],
        grid_side=d["grid_side"], tokens_per_bag=d["tokens_per_bag"], dim=d["dim"],
        num_phenotypes=d["num_phenotypes"], phenotype_separation=d["phenotype_separation"],
        class_mixture=None if d["class_mixture"] is None else np.asarray(d["class_mixture"]),
        noise_sigma=d["noise_sigma"], seed=d["seed"],
        val_bags_per_class=d["val_bags_per_class"] or None,
    )
    t = resolved["transforms"]
    transform = TransformConfig(
        use_split=t["use_split"], split_ratio=t["split_ratio"], use_crop=t["use_crop"],
        crop_area_range=tuple(t["crop_area_range"]),
        crop_aspect_range=tuple(t["crop_aspect_range"]),
        use_mask=t["use_mask"], mask_ratio_range=tuple(t["mask_ratio_range"]),
        max_token_limit=t["max_token_limit"] or None,
    )
    m = resolved["model"]
    model = ModelConfig(
        d_model=m["d_model"], n_layers=m["n_layers"], n_heads=m["n_heads"],
        ffn_mult=m["ffn_mult"], d_proj=m["d_proj"], fourier_dim=m["fourier_dim"],
        pos_hidden=m["pos_hidden"] or None, freq_init_std=m["freq_init_std"],
    )
    o = resolved["objective"]
    objective = ObjectiveConfig(
        name=o["name"], temperature=o["temperature"],
        vicreg_invariance=o["vicreg_invariance"], vicreg_variance=o["vicreg_variance"],
        vicreg_covariance=o["vicreg_covariance"], vicreg_gamma=o["vicreg_gamma"],
        vicreg_eps=o["vicreg_eps"], byol_momentum=o["byol_momentum"],
    )
    op = resolved["optim"]
    train = TrainConfig(
        model=model, objective=objective, transform=transform,
        batch_size=op["batch_size"], epochs=op["epochs"], lr_max=op["lr_max"],
        lr_min=op["lr_min"], warmup_frac=op["warmup_frac"],
        weight_decay=op["weight_decay"], beta1=op["beta1"], beta2=op["beta2"],
        adam_eps=op["adam_eps"], seed=op["seed"], checkpoint_every=op["checkpoint_every"],
    )
    ev = resolved["eval"]
    if ev["metric"] not in ("cosine", "euclidean"):
        raise ConfigError(f"eval.metric must be 'cosine' or 'euclidean', got {ev['metric']!r}")
    eval_settings = EvalSettings(**ev)

    try:
        data.validate()
    except BagError as exc:
        raise ConfigError(f"[data] {exc}") from exc
    try:
        train.validate()
    except (TransformError, ObjectiveError) as exc:
        raise ConfigError(f"[transforms/objective] {exc}") from exc
    return ExperimentConfig(data=data, train=train, eval=eval_settings, resolved=resolved)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return config_from_dict(raw)


def config_help() -> str:
    """Every config key with its default, for --help."""
    lines = ["configuration keys (TOML):"]
    for section, keys in _SCHEMA.items():
        lines.append(f"  [{section}]")
        for key, (kind, default, help_text) in keys.items():
            shown = "none" if default is None else repr(default)
            lines.append(f"    {f'{key} = {shown}':42s}  {help_text} ({kind})")
    return "\n".join(lines)
