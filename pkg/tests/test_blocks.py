import logging

import numpy as np
import pytest

from blockprune.blocks import (
    BlockSpec,
    block_reduce,
    block_sum,
    expand_mask,
    partition,
    sparsity_report,
)


def test_linear_layer_ordering_and_edge_blocks():
    part = partition([("fc", (5, 7))], BlockSpec(2, 3))
    layer = part.layers[0]
    assert layer.grid == (3, 3, 1, 1)
    expected = np.array([[(o // 2) * 3 + i // 3 for i in range(7)] for o in range(5)])
    np.testing.assert_array_equal(layer.index, expected)
    # edge blocks contain only real weights
    assert part.block_sizes.tolist() == [6, 6, 2, 6, 6, 2, 3, 3, 1]
    assert part.block_sizes.sum() == 35


def test_conv_blocks_are_per_kernel_position():
    part = partition([("conv", (4, 4, 3, 3))], BlockSpec(2, 2))
    layer = part.layers[0]
    assert part.n_blocks == 2 * 2 * 9
    # out-tile, in-tile, kernel row, kernel column
    assert layer.index[0, 0, 0, 0] == 0
    assert layer.index[0, 0, 0, 1] == 1
    assert layer.index[0, 0, 1, 0] == 3
    assert layer.index[0, 2, 0, 0] == 9
    assert layer.index[2, 0, 0, 0] == 18
    assert np.all(part.block_sizes == 4)


def test_global_offsets_follow_layer_order():
    part = partition([("a", (4, 4)), ("b", (2, 8, 3, 3))], BlockSpec(2, 4))
    assert part.layers[0].offset == 0
    assert part.layers[1].offset == part.layers[0].n_blocks
    assert part.n_blocks == 2 + 1 * 2 * 9
    ids = np.concatenate([layer.index.ravel() for layer in part.layers])
    assert set(ids.tolist()) == set(range(part.n_blocks))


def test_oversized_block_warns_and_clamps(caplog):
    with caplog.at_level(logging.WARNING):
        part = partition([("tiny", (2, 3))], BlockSpec(16, 8))
    assert part.n_blocks == 1
    assert "clamping" in caplog.text


def test_reductions(rng):
    part = partition([("w", (4, 6))], BlockSpec(2, 4))
    w = {"w": rng.normal(size=(4, 6))}
    l1 = block_reduce(part, w, "l1")
    mean_abs = block_reduce(part, w, "mean_abs")
    np.testing.assert_allclose(l1, mean_abs * part.block_sizes, rtol=1e-14)
    np.testing.assert_allclose(l1[0], np.abs(w["w"][:2, :4]).sum(), rtol=1e-14)
    np.testing.assert_allclose(block_reduce(part, w, "l2")[3], np.linalg.norm(w["w"][2:, 4:]))
    np.testing.assert_allclose(block_sum(part, w)[1], w["w"][:2, 4:].sum())
    with pytest.raises(ValueError):
        block_reduce(part, w, "max")


def test_expand_mask_and_report():
    part = partition([("a", (4, 4)), ("b", (4, 2))], BlockSpec(2, 2), {"a": 10, "b": 1})
    mask = np.array([1, 0, 1, 1, 0, 0])
    mult = expand_mask(part, mask)
    assert mult["a"][:2, 2:].sum() == 0 and mult["a"][:2, :2].sum() == 4
    rep = sparsity_report(part, mask)
    assert rep["zero_blocks"] == 3
    assert rep["block_sparsity"] == 0.5
    assert rep["element_sparsity"] == pytest.approx(12 / 24)
    # pruned MACs: one block of a (4 elements x 10) plus all of b (8 x 1)
    assert rep["mac_reduction"] == pytest.approx((40 + 8) / (160 + 8))
    assert rep["layer_block_sparsity"] == {"a": 0.25, "b": 1.0}
    with pytest.raises(ValueError):
        sparsity_report(part, np.full(6, 0.5))
    with pytest.raises(ValueError):
        expand_mask(part, np.ones(5))


def test_invalid_specs():
    with pytest.raises(ValueError):
        BlockSpec(0, 2)
    with pytest.raises(ValueError):
        partition([], BlockSpec())
    with pytest.raises(ValueError):
        partition([("v", (3,))], BlockSpec())
