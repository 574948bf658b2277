"""Experiment configs: TOML files describing a (variant x seed) run matrix.

Layout::

    mdp = "grid5x5"
    demos = "demos/grid5x5-3demos.demos.jsonl"   # relative to the config file
    task = "grid5x5-3demos"                       # runs/<task>/...; defaults to mdp

    [trainer]            # TrainerConfig fields, named after their symbols
    alpha = 0.01
    c = 0.25

    [matrix]
    methods = ["rize", "bc", "coupled-0"]
    seeds = [0, 1, 2, 3, 4]

    [variant.coupled-0]  # named method variants with their own overrides
    method = "coupled"
    lambda_E_init = 0.0

A plain method name in ``matrix.methods`` runs with the shared ``[trainer]``
table. Variant names become the method directory in the runs tree.
"""
from __future__ import annotations

import dataclasses
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .trainer import METHODS, TrainerConfig

TOP_LEVEL_KEYS = {"mdp", "demos", "task", "trainer", "matrix", "variant"}
MATRIX_KEYS = {"methods", "seeds"}
TRAINER_KEYS = {f.name for f in dataclasses.fields(TrainerConfig)} - {"seed"}
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class RunSpec:
    task: str
    mdp_id: str
    demos_path: Path
    name: str  # method or variant label
    trainer: TrainerConfig


@dataclass
class ExperimentConfig:
    mdp: str
    demos: Path
    task: str
    trainer: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: ["rize"])
    seeds: list = field(default_factory=lambda: [0])
    variants: dict = field(default_factory=dict)
    source: Path | None = None

    def runs(self) -> list[RunSpec]:
        specs = []
        for name in self.methods:
            values = dict(self.trainer)
            if name in self.variants:
                values.update(self.variants[name])
            else:
                values["method"] = name
            for seed in self.seeds:
                try:
                    cfg = TrainerConfig(**values, seed=int(seed))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{name}: {exc}") from None
                specs.append(RunSpec(self.task, self.mdp, self.demos, name, cfg))
        return specs


def parse_value(text: str):
    """Parse an override value as a TOML scalar/array, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_override(item: str) -> tuple[str, object]:
    key, sep, value = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    return key, parse_value(value.strip())


def _check_keys(table: dict, allowed: set, where: str):
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def from_dict(doc: dict, base_dir: Path = Path("."), source: Path | None = None) -> ExperimentConfig:
    _check_keys(doc, TOP_LEVEL_KEYS, "config")
    for key in ("mdp", "demos"):
        if key not in doc:
            raise ConfigError(f"config is missing required key {key!r}")
    trainer = dict(doc.get("trainer", {}))
    _check_keys(trainer, TRAINER_KEYS, "[trainer]")
    matrix = dict(doc.get("matrix", {}))
    _check_keys(matrix, MATRIX_KEYS, "[matrix]")
    variants = {}
    for name, table in doc.get("variant", {}).items():
        _check_keys(table, TRAINER_KEYS, f"[variant.{name}]")
        if table.get("method") not in METHODS:
            raise ConfigError(f"[variant.{name}] needs a method in {METHODS}")
        variants[name] = dict(table)
    methods = list(matrix.get("methods", ["rize"]))
    for name in methods:
        if name not in variants and name not in METHODS:
            raise ConfigError(f"unknown method or variant {name!r}")
        if not _NAME_RE.match(name):
            raise ConfigError(f"method label {name!r} is not usable as a directory name")
    seeds = matrix.get("seeds", [0])
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("matrix.seeds must be a nonempty list of integers")
    demos = Path(doc["demos"])
    if not demos.is_absolute():
        demos = base_dir / demos
    task = doc.get("task", doc["mdp"])
    if not _NAME_RE.match(task):
        raise ConfigError(f"task {task!r} is not usable as a directory name")
    return ExperimentConfig(doc["mdp"], demos, task, trainer, methods, list(seeds), variants,
                            source)


def apply_overrides(doc: dict, overrides) -> dict:
    """Return a copy of ``doc`` with ``key=value`` overrides applied.

    Trainer fields go to ``[trainer]`` (and every variant, so an override
    wins everywhere); ``methods``/``seeds`` go to ``[matrix]``; dotted keys
    address tables directly.
    """
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    doc["variant"] = {k: dict(v) for k, v in doc.get("variant", {}).items()}
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        if "." in key:
            table, _, sub = key.rpartition(".")
            node = doc
            for part in table.split("."):
                node = node.setdefault(part, {})
            node[sub] = value
        elif key in MATRIX_KEYS:
            doc.setdefault("matrix", {})[key] = value
        elif key in TRAINER_KEYS:
            doc.setdefault("trainer", {})[key] = value
            for table in doc["variant"].values():
                if key != "method":
                    table[key] = value
        else:
            doc[key] = value
    return doc


def read_toml(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    doc = apply_overrides(read_toml(path), overrides)
    return from_dict(doc, path.parent, path)
