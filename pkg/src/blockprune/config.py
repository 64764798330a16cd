"""Run configuration: a sectioned ``key = value`` text file.

Grammar (``configparser`` INI dialect, no interpolation)::

    [section]
    key = value      ; comments start with ';' or '#'

Sections and keys are fixed by :data:`SCHEMA`; anything else is rejected.
Lists (shapes, channel widths) are comma-separated integers and booleans
accept ``true/false/yes/no/1/0``.  ``seed`` is mandatory in ``[data]`` and
``[train]``.  Every other key has the default listed in the schema.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .baselines import AwgConfig
from .blocks import BlockSpec
from .data import Dataset, gen_blobs, load_idx
from .models import ModelSpec
from .smart import ConfigError, SmartConfig, TempSchedule
from .training import TrainConfig

REQUIRED = object()
METHODS = ("smart", "awg", "magnitude")


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from exc


def _names(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "same") else float(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _str(text: str) -> str:
    return text.strip()


SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "model": {
        "architecture": (_str, "tiny_cnn"),
        "input_shape": (_ints, (1, 8, 8)),
        "channels": (_ints, (8, 16, 16)),
        "hidden": (int, 96),
        "classes": (int, 4),
        "prunable": (_names, ()),
    },
    "data": {
        "source": (_str, "blobs"),
        "seed": (int, REQUIRED),
        "per_class": (int, 1000),
        "train_images": (_str, ""),
        "train_labels": (_str, ""),
        "test_images": (_str, ""),
        "test_labels": (_str, ""),
    },
    "train": {
        "lr": (float, 0.02),
        "momentum": (float, 0.9),
        "weight_decay": (float, 5e-4),
        "epochs": (int, 20),
        "batch_size": (int, 32),
        "seed": (int, REQUIRED),
    },
    "prune": {
        "method": (_str, "smart"),
        "r": (float, 0.5),
        "bo": (int, 16),
        "bi": (int, 8),
        "schedule": (_str, "exponential"),
        "tau_start": (float, 1.0),
        "tau_end": (float, 1e-5),
        "si": (_opt_int, None),
        "mask_init": (_str, "mean_abs"),
        "mask_type": (_str, "deterministic"),
        "weights_frozen": (_bool, False),
        "s": (int, 0),
        "l": (int, 10),
        "finetune_epochs": (int, 5),
        "mask_lr": (_opt_float, None),
        "mask_momentum": (_opt_float, None),
        "mask_weight_decay": (_opt_float, 0.0),
        "S": (int, 4),
        "gamma": (float, 0.9),
        "P": (int, 2),
        "Q": (int, 5),
        "mspl": (float, 1.0),
    },
}


def _jsonable(value):
    return list(value) if isinstance(value, tuple) else value


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration (every key present, typed)."""

    values: dict
    source: str = "<defaults>"

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def resolved(self) -> dict:
        return {sec: {k: _jsonable(v) for k, v in keys.items()} for sec, keys in self.values.items()}

    @property
    def hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def model_spec(self) -> ModelSpec:
        m = self["model"]
        return ModelSpec(m["architecture"], tuple(m["input_shape"]), tuple(m["channels"]),
                         m["hidden"], m["classes"])

    def prunable(self):
        return list(self["model"]["prunable"]) or None

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        t = self["train"]
        return TrainConfig(t["lr"], t["momentum"], t["weight_decay"], t["batch_size"], t["seed"],
                           t["epochs"] if epochs is None else epochs)

    def block(self) -> BlockSpec:
        return BlockSpec(self["prune"]["bo"], self["prune"]["bi"])

    def smart_config(self) -> SmartConfig:
        p = self["prune"]
        return SmartConfig(
            r=p["r"],
            pretrain_epochs=p["s"],
            search_end_epoch=p["l"],
            finetune_epochs=p["finetune_epochs"],
            schedule=TempSchedule(p["schedule"], p["tau_start"], p["tau_end"], p["si"]),
            mask_init=p["mask_init"],
            weights_frozen=p["weights_frozen"],
            mask_type=p["mask_type"],
            block=self.block(),
            train=self.train_config(),
            mask_lr=p["mask_lr"],
            mask_momentum=p["mask_momentum"],
            mask_weight_decay=p["mask_weight_decay"],
        )

    def awg_config(self) -> AwgConfig:
        p = self["prune"]
        return AwgConfig(p["r"], p["S"], p["gamma"], p["P"], p["Q"], p["mspl"], self.block(),
                         self.train_config())

    def load_data(self) -> tuple[Dataset, Dataset]:
        d = self["data"]
        if d["source"] == "blobs":
            m = self["model"]
            return gen_blobs(m["classes"], tuple(m["input_shape"]), d["per_class"], d["seed"])
        if d["source"] == "idx":
            paths = [d[k] for k in ("train_images", "train_labels", "test_images", "test_labels")]
            if not all(paths):
                raise ConfigError("[data] source=idx needs train_/test_ images and labels paths")
            train = load_idx(paths[0], paths[1])
            test = load_idx(paths[2], paths[3])
            return train, Dataset(test.features, test.labels, "test")
        raise ConfigError(f"[data] unknown source {d['source']!r} (blobs | idx)")


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keep "S", "P", "Q" distinct from lowercase keys
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = [s for s in parser.sections() if s not in SCHEMA]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}")
    values = {}
    for section, keys in SCHEMA.items():
        given = dict(parser[section]) if parser.has_section(section) else {}
        extra = sorted(set(given) - set(keys))
        if extra:
            raise ConfigError(f"{source}: unknown key(s) {extra} in [{section}]")
        resolved = {}
        for key, (conv, default) in keys.items():
            if key in given:
                try:
                    resolved[key] = conv(given[key])
                except ValueError as exc:
                    raise ConfigError(f"{source}: [{section}] {key}: {exc}") from exc
            elif default is REQUIRED:
                raise ConfigError(f"{source}: [{section}] {key} is required")
            else:
                resolved[key] = default
        values[section] = resolved
    if values["prune"]["method"] not in METHODS:
        raise ConfigError(f"{source}: unknown prune method {values['prune']['method']!r}")
    cfg = RunConfig(values, source)
    # construct the typed configs once so invalid combinations fail at load time
    try:
        cfg.model_spec()
        cfg.train_config()
        cfg.smart_config()
        cfg.awg_config()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    """Serialise a resolved config back to the text format."""
    lines = []
    for section, keys in cfg.values.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = "none"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
