import math

import numpy as np
import pytest

from blockprune.baselines import (
    AwgConfig,
    awg_ema_update,
    awg_importance,
    awg_threshold,
    cap_layer_sparsity,
    layer_scale,
    magnitude_mask,
    run_awg,
    run_magnitude,
    scheduled_zeros,
)
from blockprune.blocks import BlockSpec, block_reduce, partition
from blockprune.data import batches
from blockprune.models import ModelSpec, build_model
from blockprune.smart import ConfigError
from blockprune.training import TrainConfig, train_step


@pytest.fixture
def two_layer():
    return partition([("a", (4, 4)), ("b", (2, 4))], BlockSpec(2, 2))  # 4 + 2 blocks


def test_layer_scale(two_layer):
    mask = np.array([1, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(layer_scale(two_layer, mask), [4, 4, 4, 4, 2, 2])
    np.testing.assert_allclose(layer_scale(two_layer, np.ones(6)), np.ones(6))


def test_importance_is_scaled_block_sum_of_abs_products(two_layer, rng):
    w = {"a": rng.normal(size=(4, 4)), "b": rng.normal(size=(2, 4))}
    g = {"a": rng.normal(size=(4, 4)), "b": rng.normal(size=(2, 4))}
    mask = np.array([1, 1, 0, 1, 1, 0])
    imp = awg_importance(g, w, mask, two_layer)
    assert imp[0] == pytest.approx(np.abs(g["a"][:2, :2] * w["a"][:2, :2]).sum() * 4 / 3)
    assert imp[5] == pytest.approx(np.abs(g["b"][:, 2:] * w["b"][:, 2:]).sum() * 2 / 1)


def test_ema():
    raw = np.array([1.0, 2.0])
    np.testing.assert_array_equal(awg_ema_update(np.zeros(2), raw, 0.9, True), raw)
    np.testing.assert_allclose(awg_ema_update(np.array([10.0, 0.0]), raw, 0.9, False), [9.1, 0.2])


@pytest.mark.parametrize("r, step, steps, n, zeros", [
    (0.57, 1, 1, 100, 57), (0.3, 1, 1, 10, 3), (0.5, 1, 4, 10, 1), (0.5, 4, 4, 10, 5),
    (0.3, 1, 3, 10, 1), (1.0, 2, 2, 7, 7), (0.0, 1, 1, 7, 0)])
def test_floor_rule(r, step, steps, n, zeros):
    assert scheduled_zeros(r, step, steps, n) == zeros
    imp = np.arange(n, dtype=float)[::-1]
    assert int((awg_threshold(imp, step, steps, r) == 0).sum()) == zeros


def test_threshold_prunes_least_important_with_index_ties():
    imp = np.array([3.0, 1.0, 1.0, 5.0, 1.0])
    np.testing.assert_array_equal(awg_threshold(imp, 1, 1, 0.4), [1, 1, 0, 1, 0])
    with pytest.raises(ValueError):
        awg_threshold(imp, 0, 1, 0.4)


def test_mspl_clamp_revives_most_important(two_layer):
    mask = np.array([0, 0, 0, 1, 1, 1.0])
    imp = np.array([0.3, 0.1, 0.2, 1, 1, 1])
    capped = cap_layer_sparsity(mask, imp, two_layer, 0.5)
    np.testing.assert_array_equal(capped, [1, 0, 0, 1, 1, 1])
    np.testing.assert_array_equal(cap_layer_sparsity(mask, imp, two_layer, 1.0), mask)


def test_config_errors():
    for kw in (dict(steps=0), dict(gamma=1.0), dict(r=1.5), dict(mspl=0.0),
               dict(final_finetune_epochs=-1)):
        with pytest.raises(ConfigError):
            AwgConfig(**kw)


@pytest.mark.parametrize("r, steps", [(0.5, 2), (0.3, 1)])
def test_run_awg_exact_floor_sparsity(small_blobs, r, steps):
    tr, te = small_blobs
    cfg = AwgConfig(r=r, steps=steps, finetune_epochs_per_step=1, final_finetune_epochs=1,
                    block=BlockSpec(4, 4), train=TrainConfig(seed=0))
    res = run_awg(build_model(ModelSpec(), 0), tr, te, cfg)
    n = res.partition.n_blocks
    assert res.report["zero_blocks"] == math.floor(r * n)
    assert len(res.history) == steps * 2 + 1
    assert len(res.diagnostics) == steps * math.ceil(len(tr) / 32)
    again = run_awg(build_model(ModelSpec(), 0), tr, te, cfg)
    assert again.history == res.history


def test_magnitude_mask_keeps_largest_l1(rng):
    part = partition([("w", (4, 4))], BlockSpec(2, 2))
    w = {"w": rng.normal(size=(4, 4))}
    mask = magnitude_mask(part, w, 0.5)
    norms = block_reduce(part, w, "l1")
    assert mask.sum() == 2
    assert norms[mask == 1].min() >= norms[mask == 0].max()


def test_magnitude_zero_sparsity_is_plain_fine_tuning(small_blobs):
    tr, te = small_blobs
    tc = TrainConfig(seed=0)
    res = run_magnitude(build_model(ModelSpec(), 0), tr, te, 0.0, 2, tc, BlockSpec(4, 4))
    plain = build_model(ModelSpec(), 0)
    opt = tc.optimizer()
    for epoch in range(2):
        for x, y in batches(tr, 32, 0, epoch):
            train_step(plain, opt, x, y)
    for name in plain.params:
        np.testing.assert_array_equal(plain.params[name], res.model.params[name])
    assert res.report["block_sparsity"] == 0.0
