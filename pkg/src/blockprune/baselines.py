"""Reference pruners: AWG (accumulated weight x gradient) and one-shot magnitude."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .blocks import BlockPartition, BlockSpec, block_reduce, expand_mask, partition
from .data import Dataset, batches, evaluate
from .dtopk import hard_topk
from .smart import ConfigError, compute_k
from .training import TrainConfig, apply_hard_mask, masked_params, train_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AwgConfig:
    r: float = 0.5
    steps: int = 4
    gamma: float = 0.9
    finetune_epochs_per_step: int = 2
    final_finetune_epochs: int = 5
    #: maximum block sparsity per layer, applied after each threshold update
    mspl: float = 1.0
    block: BlockSpec = BlockSpec(16, 8)
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("AWG needs at least one step (S >= 1)")
        if not 0 <= self.gamma < 1:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0 <= self.r <= 1 or not 0 < self.mspl <= 1:
            raise ConfigError("r must lie in [0, 1] and mspl in (0, 1]")
        if self.finetune_epochs_per_step < 0 or self.final_finetune_epochs < 0:
            raise ConfigError("fine-tune epoch counts must be non-negative")


@dataclass
class PruneResult:
    model: object
    partition: BlockPartition
    hard_mask: np.ndarray
    report: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)


def layer_scale(part: BlockPartition, mask) -> np.ndarray:
    """Per-block factor (blocks in layer) / (unpruned blocks in layer).

    A fully pruned layer gets the largest possible factor, its block count.
    """
    mask = np.asarray(mask, dtype=np.float64)
    total = np.bincount(part.layer_of_block, minlength=len(part.layers)).astype(np.float64)
    alive = np.bincount(part.layer_of_block, weights=mask, minlength=len(part.layers))
    dead = alive == 0
    if dead.any():
        logger.info("AWG: %d fully pruned layer(s); scale clamped", int(dead.sum()))
    scale = total / np.where(dead, 1.0, alive)
    return scale[part.layer_of_block]


def awg_importance(grad_w, weights, mask, part: BlockPartition) -> np.ndarray:
    acc = np.zeros(part.n_blocks)
    for layer in part.layers:
        prod = np.abs(np.asarray(grad_w[layer.name]) * np.asarray(weights[layer.name]))
        acc += np.bincount(layer.index.ravel(), weights=prod.ravel(), minlength=part.n_blocks)
    return acc * layer_scale(part, mask)


def awg_ema_update(imp, raw, gamma: float, first_batch: bool) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if first_batch:
        return raw.copy()
    imp = np.asarray(imp, dtype=np.float64)
    if imp.shape != raw.shape:
        raise ValueError(f"importance {imp.shape} vs raw {raw.shape}")
    return gamma * imp + (1.0 - gamma) * raw


def scheduled_zeros(r: float, step: int, steps: int, n_blocks: int) -> int:
    # rounded first: floor(0.57 * 100) must be 57, not 56
    return int(math.floor(round(r * step / steps * n_blocks, 9)))


def awg_threshold(imp, step: int, steps: int, r: float) -> np.ndarray:
    """Binary mask pruning the ``floor(r * step / steps * N)`` least important blocks."""
    if not 1 <= step <= steps:
        raise ValueError(f"step must lie in [1, {steps}], got {step}")
    imp = np.asarray(imp, dtype=np.float64)
    zeros = scheduled_zeros(r, step, steps, imp.size)
    return hard_topk(imp, imp.size - zeros)


def cap_layer_sparsity(mask, imp, part: BlockPartition, mspl: float) -> np.ndarray:
    """Revive the most important pruned blocks of any layer sparser than ``mspl``."""
    mask = np.array(mask, dtype=np.float64)
    if mspl >= 1:
        return mask
    for j, _ in enumerate(part.layers):
        ids = np.flatnonzero(part.layer_of_block == j)
        allowed = int(math.floor(round(mspl * ids.size, 9)))
        pruned = ids[mask[ids] == 0]
        excess = pruned.size - allowed
        if excess > 0:
            revive = pruned[np.argsort(-imp[pruned], kind="stable")[:excess]]
            mask[revive] = 1.0
    return mask


def _finetune(model, part, mask, train, test, cfg: TrainConfig, opt, epoch0, epochs, history, tag):
    mult = expand_mask(part, mask)
    for e in range(epoch0, epoch0 + epochs):
        losses = [train_step(model, opt, x, y, multipliers=mult)
                  for x, y in batches(train, cfg.batch_size, cfg.seed, e)]
        metrics = evaluate(model, test, mask, part)
        metrics.update(epoch=e, phase=tag, train_loss=float(np.mean(losses)))
        history.append(metrics)
    return epoch0 + epochs


def run_awg(model, train: Dataset, test: Dataset, cfg: AwgConfig,
            part: Optional[BlockPartition] = None) -> PruneResult:
    """Iterative AWG pruning of a pretrained model."""
    if part is None:
        part = partition(model.weight_layers(), cfg.block, model.macs_per_element())
    tc = cfg.train
    opt = tc.optimizer()
    mask = np.ones(part.n_blocks)
    imp = np.zeros(part.n_blocks)
    history, diagnostics = [], []
    epoch, it = 0, 0
    for step in range(1, cfg.steps + 1):
        mult = expand_mask(part, mask)
        losses = []
        for b, (x, y) in enumerate(batches(train, tc.batch_size, tc.seed, epoch)):
            params = model.tensors(requires_grad=True)
            graph = ad.Graph(params)
            loss = graph.forward(
                lambda p, xb: ad.softmax_cross_entropy(
                    model.forward(masked_params(model, p, mult), xb), y
                ),
                ad.Tensor(x),
            )
            grads = graph.backward()
            raw = awg_importance(grads, model.params, mask, part)
            new_imp = awg_ema_update(imp, raw, cfg.gamma, first_batch=b == 0)
            drift = float(np.abs(new_imp - imp).sum())
            imp = new_imp
            opt.step(model.params, grads)
            losses.append(float(loss.data))
            diagnostics.append({"iter": it, "tau": math.nan, "t": math.nan,
                                "loss": float(loss.data), "drift": drift,
                                "monitor_frac": float(mask.mean())})
            it += 1
        mask = awg_threshold(imp, step, cfg.steps, cfg.r)
        mask = cap_layer_sparsity(mask, imp, part, cfg.mspl)
        apply_hard_mask(model, part, mask, opt)
        metrics = evaluate(model, test, mask, part)
        metrics.update(epoch=epoch, phase=f"awg-track-{step}", train_loss=float(np.mean(losses)))
        history.append(metrics)
        epoch += 1
        epoch = _finetune(model, part, mask, train, test, tc, opt, epoch,
                          cfg.finetune_epochs_per_step, history, f"awg-finetune-{step}")
    _finetune(model, part, mask, train, test, tc, opt, epoch, cfg.final_finetune_epochs,
              history, "awg-final")
    report = evaluate(model, test, mask, part)
    return PruneResult(model, part, mask, report, history, diagnostics)


def magnitude_mask(part: BlockPartition, weights, r: float) -> np.ndarray:
    """Keep the ``ceil((1-r) N)`` blocks with the largest l1 norms."""
    return hard_topk(block_reduce(part, weights, "l1"), compute_k(r, part.n_blocks))


def run_magnitude(model, train: Dataset, test: Dataset, r: float, finetune_epochs: int,
                  train_cfg: TrainConfig = TrainConfig(), block: BlockSpec = BlockSpec(16, 8),
                  part: Optional[BlockPartition] = None) -> PruneResult:
    """One-shot l1 block pruning followed by fine-tuning with the mask frozen."""
    if part is None:
        part = partition(model.weight_layers(), block, model.macs_per_element())
    mask = magnitude_mask(part, model.params, r)
    opt = train_cfg.optimizer()
    apply_hard_mask(model, part, mask, opt)
    history = []
    _finetune(model, part, mask, train, test, train_cfg, opt, 0, finetune_epochs, history,
              "magnitude-finetune")
    report = evaluate(model, test, mask, part)
    return PruneResult(model, part, mask, report, history)
