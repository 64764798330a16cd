"""Block partitions of prunable weight tensors.

A weight of shape ``(O, I)`` or ``(O, I, Kh, Kw)`` is tiled into
``bo x bi`` channel tiles at every kernel position.  When ``O`` or ``I`` is
not a multiple of the tile, the trailing tiles are simply smaller; no
padding is introduced, so every block maps to real weights.

Blocks are numbered globally: layer order first, then output-tile index,
input-tile index, and kernel row/column.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockSpec:
    bo: int = 16
    bi: int = 8

    def __post_init__(self):
        if self.bo < 1 or self.bi < 1:
            raise ValueError(f"block extents must be >= 1, got {self.bo}x{self.bi}")


@dataclass(frozen=True)
class LayerBlocks:
    name: str
    shape: tuple
    bo: int
    bi: int
    offset: int
    #: global block id for every weight element, same shape as the weight
    index: np.ndarray = field(repr=False, compare=False)
    macs_per_element: int = 1

    @property
    def grid(self) -> tuple:
        o, i = self.shape[:2]
        kh, kw = self.shape[2:] if len(self.shape) == 4 else (1, 1)
        return (math.ceil(o / self.bo), math.ceil(i / self.bi), kh, kw)

    @property
    def n_blocks(self) -> int:
        return int(np.prod(self.grid))

    @property
    def block_ids(self) -> range:
        return range(self.offset, self.offset + self.n_blocks)


def _layer_index(shape: tuple, bo: int, bi: int, offset: int) -> np.ndarray:
    o, i = shape[:2]
    kh, kw = shape[2:] if len(shape) == 4 else (1, 1)
    nbi = math.ceil(i / bi)
    ob = (np.arange(o) // bo)[:, None, None, None]
    ib = (np.arange(i) // bi)[None, :, None, None]
    kr = np.arange(kh)[None, None, :, None]
    kc = np.arange(kw)[None, None, None, :]
    idx = offset + ((ob * nbi + ib) * kh + kr) * kw + kc
    return idx.reshape(shape).astype(np.int64)


class BlockPartition:
    """Immutable mapping from weight elements to global block ids."""

    def __init__(self, layers: Sequence[LayerBlocks]):
        self.layers = tuple(layers)
        self.n_blocks = sum(layer.n_blocks for layer in self.layers)
        sizes = np.zeros(self.n_blocks)
        layer_of = np.zeros(self.n_blocks, dtype=np.int64)
        macs = np.zeros(self.n_blocks)
        for j, layer in enumerate(self.layers):
            counts = np.bincount(layer.index.ravel(), minlength=self.n_blocks)
            sizes += counts
            layer_of[layer.offset : layer.offset + layer.n_blocks] = j
            macs += counts * layer.macs_per_element
        self.block_sizes = sizes
        self.layer_of_block = layer_of
        self.block_macs = macs

    def __len__(self) -> int:
        return self.n_blocks

    @property
    def names(self) -> list:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> LayerBlocks:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def describe(self) -> dict:
        """JSON-serialisable descriptor (stored in checkpoints)."""
        return {
            "n_blocks": self.n_blocks,
            "layers": [
                {
                    "name": layer.name,
                    "shape": list(layer.shape),
                    "block": [layer.bo, layer.bi],
                    "offset": layer.offset,
                    "n_blocks": layer.n_blocks,
                    "macs_per_element": layer.macs_per_element,
                }
                for layer in self.layers
            ],
        }


def partition(
    layers: Sequence[tuple],
    spec: BlockSpec,
    macs_per_element: Mapping[str, int] | None = None,
) -> BlockPartition:
    """Partition ``(name, shape)`` weight descriptors into blocks."""
    if not layers:
        raise ValueError("partition needs at least one prunable weight tensor")
    macs_per_element = macs_per_element or {}
    out, offset = [], 0
    for name, shape in layers:
        shape = tuple(int(s) for s in shape)
        if len(shape) not in (2, 4):
            raise ValueError(f"layer {name!r}: expected a 2-D or 4-D weight, got {shape}")
        o, i = shape[:2]
        bo, bi = spec.bo, spec.bi
        if bo > o and bi > i:
            logger.warning(
                "block %dx%d exceeds layer %r channels %dx%d; clamping", bo, bi, name, o, i
            )
        bo, bi = min(bo, o), min(bi, i)
        index = _layer_index(shape, bo, bi, offset)
        layer = LayerBlocks(name, shape, bo, bi, offset, index, int(macs_per_element.get(name, 1)))
        out.append(layer)
        offset += layer.n_blocks
    return BlockPartition(out)


def block_reduce(part: BlockPartition, weights: Mapping[str, np.ndarray], reduction="mean_abs"):
    """One scalar per block: ``l1``, ``l2`` or ``mean_abs`` of its weights."""
    acc = np.zeros(part.n_blocks)
    for layer in part.layers:
        w = np.asarray(weights[layer.name], dtype=np.float64)
        if w.shape != layer.shape:
            raise ValueError(f"layer {layer.name!r}: weight {w.shape} vs partition {layer.shape}")
        vals = w * w if reduction == "l2" else np.abs(w)
        acc += np.bincount(layer.index.ravel(), weights=vals.ravel(), minlength=part.n_blocks)
    if reduction == "l1":
        return acc
    if reduction == "l2":
        return np.sqrt(acc)
    if reduction == "mean_abs":
        return acc / part.block_sizes
    raise ValueError(f"unknown reduction {reduction!r}")


def block_sum(part: BlockPartition, tensors: Mapping[str, np.ndarray]) -> np.ndarray:
    """Signed per-block sum of element values."""
    acc = np.zeros(part.n_blocks)
    for layer in part.layers:
        acc += np.bincount(
            layer.index.ravel(), weights=np.ravel(tensors[layer.name]), minlength=part.n_blocks
        )
    return acc


def expand_mask(part: BlockPartition, block_values) -> dict:
    """Per-layer multiplier tensors carrying each block's scalar."""
    values = np.asarray(block_values, dtype=np.float64)
    if values.shape != (part.n_blocks,):
        raise ValueError(f"expected {part.n_blocks} block values, got shape {values.shape}")
    return {layer.name: values[layer.index] for layer in part.layers}


def sparsity_report(part: BlockPartition, hard_mask) -> dict:
    mask = np.asarray(hard_mask, dtype=np.float64)
    if mask.shape != (part.n_blocks,):
        raise ValueError(f"expected {part.n_blocks} mask entries, got shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("sparsity_report needs a binary mask")
    pruned = mask == 0
    per_layer = {}
    for j, layer in enumerate(part.layers):
        sel = part.layer_of_block == j
        per_layer[layer.name] = float(pruned[sel].sum() / sel.sum())
    return {
        "n_blocks": int(part.n_blocks),
        "zero_blocks": int(pruned.sum()),
        "block_sparsity": float(pruned.sum() / part.n_blocks),
        "element_sparsity": float(part.block_sizes[pruned].sum() / part.block_sizes.sum()),
        "mac_reduction": float(part.block_macs[pruned].sum() / part.block_macs.sum()),
        "layer_block_sparsity": per_layer,
    }
