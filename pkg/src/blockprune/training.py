"""Training plumbing shared by the pruning drivers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .blocks import BlockPartition, expand_mask


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    seed: int = 0
    epochs: int = 20

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("weight_decay, batch_size and epochs must be non-negative")

    def optimizer(self) -> ad.SGD:
        return ad.SGD(self.lr, self.momentum, self.weight_decay)


def masked_params(model, params: Mapping[str, ad.Tensor], multipliers) -> dict:
    if not multipliers:
        return dict(params)
    out = dict(params)
    for name, mult in multipliers.items():
        out[name] = params[name] * (mult if isinstance(mult, ad.Tensor) else ad.Tensor(mult))
    return out


def train_step(model, opt: ad.SGD, x, y, multipliers=None) -> float:
    """Forward (optionally with fixed per-element multipliers), backward, update."""
    params = model.tensors(requires_grad=True)
    graph = ad.Graph(params)
    loss = graph.forward(
        lambda p, xb: ad.softmax_cross_entropy(
            model.forward(masked_params(model, p, multipliers), xb), y
        ),
        ad.Tensor(x),
    )
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite training loss {value}")
    opt.step(model.params, graph.backward())
    return value


def apply_hard_mask(model, part: BlockPartition, mask, opt: Optional[ad.SGD] = None) -> dict:
    """Zero pruned weights (and their momentum) so they stay exactly zero."""
    mult = expand_mask(part, mask)
    for name, m in mult.items():
        model.params[name] *= m
        if opt is not None and name in opt.velocity:
            opt.velocity[name] = opt.velocity[name] * m
    return mult


def format_csv_row(record: Mapping, columns) -> str:
    return ",".join(repr(float(record[c])) if c != "iter" else str(int(record[c])) for c in columns)


DIAG_COLUMNS = ("iter", "tau", "t", "loss", "drift", "monitor_frac")


def write_diagnostics(path, records, columns=DIAG_COLUMNS) -> None:
    lines = [",".join(columns)] + [format_csv_row(r, columns) for r in records]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
