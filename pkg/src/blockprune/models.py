"""Desk-scale models written against the autodiff engine.

Models are functional: parameters live in an ordered ``dict`` of numpy
arrays and ``forward(params, x)`` takes a matching dict of tensors.  That lets
a pruner substitute masked weights without touching the model object.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "tiny_cnn"
    input_shape: tuple = (1, 8, 8)
    channels: tuple = (8, 16, 16)
    hidden: int = 96
    classes: int = 4

    def __post_init__(self):
        if self.architecture not in ("mlp", "tiny_cnn"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.classes < 2:
            raise ValueError("a classifier needs at least 2 classes")


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Model:
    spec: ModelSpec
    params: dict
    prunable: list

    def forward(self, params: Mapping[str, ad.Tensor], x: ad.Tensor) -> ad.Tensor:
        raise NotImplementedError

    def weight_layers(self) -> list:
        return [(name, self.params[name].shape) for name in self.prunable]

    def macs_per_element(self) -> dict:
        return {name: 1 for name in self.prunable}

    def tensors(self, requires_grad: bool = False) -> dict:
        return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def logits(self, x: np.ndarray, multipliers: Mapping[str, np.ndarray] | None = None):
        params = {}
        for name, value in self.params.items():
            if multipliers is not None and name in multipliers:
                value = value * multipliers[name]
            params[name] = ad.Tensor(value)
        return self.forward(params, ad.Tensor(x)).data

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "Model":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone


class MLP(Model):
    """Fully connected ReLU network; ``channels`` are the hidden widths."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        widths = [int(np.prod(spec.input_shape)), *spec.channels, spec.classes]
        self.params = {}
        for j, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"fc{j + 1}.weight"] = _he(rng, (fan_out, fan_in), fan_in)
            self.params[f"fc{j + 1}.bias"] = np.zeros(fan_out)
        self.n_layers = len(widths) - 1
        self.prunable = [f"fc{j + 1}.weight" for j in range(self.n_layers - 1)]

    def forward(self, params, x):
        h = ad.flatten(x) if x.data.ndim > 2 else x
        for j in range(1, self.n_layers + 1):
            h = ad.linear(h, params[f"fc{j}.weight"], params[f"fc{j}.bias"])
            if j < self.n_layers:
                h = ad.relu(h)
        return h


class TinyCNN(Model):
    """conv3x3 -> conv3x3 -> 2x2 mean-pool -> conv3x3 -> fc -> classifier."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        c_in, h, w = spec.input_shape
        if h % 2 or w % 2:
            raise ValueError(f"tiny_cnn needs even spatial extents, got {h}x{w}")
        c1, c2, c3 = spec.channels
        p = {}
        for name, (o, i) in {"conv1": (c1, c_in), "conv2": (c2, c1), "conv3": (c3, c2)}.items():
            p[f"{name}.weight"] = _he(rng, (o, i, 3, 3), i * 9)
            p[f"{name}.bias"] = np.zeros(o)
        flat = c3 * (h // 2) * (w // 2)
        p["fc1.weight"] = _he(rng, (spec.hidden, flat), flat)
        p["fc1.bias"] = np.zeros(spec.hidden)
        p["fc2.weight"] = _he(rng, (spec.classes, spec.hidden), spec.hidden)
        p["fc2.bias"] = np.zeros(spec.classes)
        self.params = p
        self.prunable = ["conv1.weight", "conv2.weight", "conv3.weight", "fc1.weight"]

    def macs_per_element(self) -> dict:
        _, h, w = self.spec.input_shape
        return {
            "conv1.weight": h * w,
            "conv2.weight": h * w,
            "conv3.weight": (h // 2) * (w // 2),
            "fc1.weight": 1,
        }

    def forward(self, params, x):
        h = ad.relu(ad.conv2d(x, params["conv1.weight"], params["conv1.bias"], padding=1))
        h = ad.relu(ad.conv2d(h, params["conv2.weight"], params["conv2.bias"], padding=1))
        h = ad.mean_pool2d(h, 2)
        h = ad.relu(ad.conv2d(h, params["conv3.weight"], params["conv3.bias"], padding=1))
        h = ad.relu(ad.linear(ad.flatten(h), params["fc1.weight"], params["fc1.bias"]))
        return ad.linear(h, params["fc2.weight"], params["fc2.bias"])


def build_model(spec: ModelSpec, seed: int, prunable: Sequence[str] | None = None) -> Model:
    rng = np.random.default_rng([seed, 0])
    model = MLP(spec, rng) if spec.architecture == "mlp" else TinyCNN(spec, rng)
    if prunable is not None:
        unknown = set(prunable) - set(model.params)
        if unknown:
            raise ValueError(f"unknown prunable layers: {sorted(unknown)}")
        model.prunable = list(prunable)
    return model
