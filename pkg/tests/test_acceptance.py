"""Acceptance criteria 1-12.

Each test prints one ``CRITERION <n> PASS|FAIL: ...`` line straight to the
terminal (bypassing capture) and then asserts.  Run just this module with::

    pytest tests/test_acceptance.py -v

Criteria 8-10 share one desk experiment (3 seeds, pretrain once per seed),
which takes roughly two minutes on one core.
"""

from __future__ import annotations

import json
import math
import statistics
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from blockprune.baselines import AwgConfig, run_awg, run_magnitude
from blockprune.blocks import BlockSpec, partition
from blockprune.checkpoint import load_checkpoint, save_checkpoint
from blockprune.data import batches, evaluate, gen_blobs, n_batches
from blockprune.dtopk import solve_threshold, topk_forward, topk_jacobian
from blockprune.models import ModelSpec, build_model
from blockprune.smart import (
    MaskState,
    SmartConfig,
    TempSchedule,
    compute_k,
    harden,
    resolve_schedule,
    run_from_checkpoint,
    run_smart,
    run_to_checkpoint,
    schedule_value,
)
from blockprune.tolerances import TOL
from blockprune.training import TrainConfig, train_step
from blockprune.verify import grad_identity_check, suite_grad_identity, suite_jacobian, suite_limit, suite_sum

SEEDS = (0, 1, 2)
DESK_BLOCK = BlockSpec(4, 4)
DESK_R = 0.5
PRETRAIN_EPOCHS, SEARCH_EPOCHS, FINETUNE_EPOCHS = 20, 10, 5


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        assert ok, f"criterion {n}: {detail}"

    return emit


# -- 1-6: operator and schedule properties ------------------------------------


def test_criterion_01_operator_limit(verdict):
    res = suite_limit(n_cases=1000)
    ok = res["pass"] and res["seconds"] < 10
    verdict(1, ok, f"{res['cases']} vectors, max deviation {res['max_deviation']:.2e} "
                   f"(<= {TOL['limit_dev']}), {res['seconds']:.2f}s (< 10s)")


def test_criterion_02_sum_constraint(verdict):
    res = suite_sum(n_random=10000)
    ok = res["pass"] and res["seconds"] < 10
    verdict(2, ok, f"{res['cases']} solves, max |sum f - k|/N {res['max_error_per_n']:.2e} "
                   f"(<= {TOL['sum_per_n']}), {res['seconds']:.2f}s (< 10s)")


def test_criterion_03_jacobian(verdict):
    res = suite_jacobian(n_cases=100)
    ok = res["pass"] and res["seconds"] < 30
    verdict(3, ok, f"rel {res['max_rel_error']:.2e} (<= {TOL['jac_rel']}), "
                   f"sym {res['max_asymmetry']:.1e}, rowsum {res['max_row_sum']:.1e}, "
                   f"min eig {res['min_eigenvalue']:.1e}, {res['seconds']:.2f}s (< 30s)")


def test_criterion_04_closed_form_anchors(verdict):
    x = [1.0, 2.0]
    t = solve_threshold(x, 1, 1.0)
    f = topk_forward(x, 1, 1.0).f
    jac = topk_jacobian(x, 1, 1.0)
    want_j = np.array([[0.117502, -0.117502], [-0.117502, 0.117502]])
    errs = {
        "t": abs(t + 1.5),
        "f": float(np.abs(f - [0.377541, 0.622459]).max()),
        "J": float(np.abs(jac - want_j).max()),
    }
    ok = all(e <= TOL["anchor"] for e in errs.values())
    verdict(4, ok, ", ".join(f"{k} err {v:.1e}" for k, v in errs.items())
            + f" (<= {TOL['anchor']})")


def test_criterion_05_gradient_identities(verdict):
    res = suite_grad_identity()
    zero = all(grad_identity_check(seed, 3, upstream=0.0)["all_zero"] for seed in range(5))
    ok = (res["pass"] and zero and res["max_err_w"] <= TOL["identity_w"]
          and res["max_err_m"] <= TOL["identity_m"])
    verdict(5, ok, f"dL/dw err {res['max_err_w']:.1e} (<= {TOL['identity_w']}), "
                   f"dL/dm err {res['max_err_m']:.1e} (<= {TOL['identity_m']}), "
                   f"zero upstream gives exact zeros: {zero}")


def test_criterion_06_schedule(verdict):
    worst = 0.0
    for family in ("linear", "exponential", "inverse_exponential"):
        for ts, te, si in ((1.0, 1e-4, 4), (0.5, 1e-5, 35000), (1.5, 0.6, 7), (1.0, 1e-5, 1)):
            sched = TempSchedule(family, ts, te, si)
            worst = max(worst, abs(schedule_value(sched, 0) - ts),
                        abs(schedule_value(sched, si) - te))
    mid = abs(schedule_value(TempSchedule("exponential", 1.0, 1e-4, 4), 2) - 0.01)
    ok = worst <= TOL["schedule"] and mid <= TOL["schedule"]
    verdict(6, ok, f"max endpoint error {worst:.1e}, exponential tau(2) error {mid:.1e} "
                   f"(<= {TOL['schedule']})")


# -- 7: exact sparsity ---------------------------------------------------------


def _exact_zeros(r: float, n_w: int, rule) -> int:
    # exact rationals: in floats (1 - 0.7) * 1770 is 531.0000000000001
    frac = Fraction(str(r))
    return n_w - math.ceil((1 - frac) * n_w) if rule == "ceil" else math.floor(frac * n_w)


def test_criterion_07_exact_sparsity(verdict, small_blobs):
    rng = np.random.default_rng(7)
    model = build_model(ModelSpec(), 0)
    bad = []
    sizes = []
    for block in (DESK_BLOCK, BlockSpec(16, 8), BlockSpec(2, 1)):
        n_w = partition(model.weight_layers(), block).n_blocks
        sizes.append(n_w)
        for r in (0.3, 0.5, 0.7, 0.93):
            k = compute_k(r, n_w)
            for tau in (1.0, 1e-3, 1e-7):
                m = rng.normal(size=n_w)
                m[: n_w // 4] = m[0]  # ties must not change the count
                zeros = int((harden(MaskState(m, tau, k)) == 0).sum())
                if zeros != _exact_zeros(r, n_w, "ceil"):
                    bad.append(("smart-harden", block, r, tau, zeros))

    tr, te = small_blobs
    train = TrainConfig(seed=0)
    for r in (0.3, 0.5, 0.7, 0.93):
        run = run_smart(build_model(ModelSpec(), 0), tr, te,
                        SmartConfig(r=r, pretrain_epochs=1, search_end_epoch=2,
                                    finetune_epochs=1, block=DESK_BLOCK, train=train))
        n_w = run.partition.n_blocks
        if run.report["zero_blocks"] != _exact_zeros(r, n_w, "ceil"):
            bad.append(("smart-run", r, run.report["zero_blocks"]))
        for steps in (1, 3):
            res = run_awg(build_model(ModelSpec(), 0), tr, te,
                          AwgConfig(r=r, steps=steps, finetune_epochs_per_step=1,
                                    final_finetune_epochs=1, block=DESK_BLOCK, train=train))
            if res.report["zero_blocks"] != _exact_zeros(r, n_w, "floor"):
                bad.append(("awg-run", r, steps, res.report["zero_blocks"]))
    verdict(7, not bad, f"n_w in {sizes}, r in (0.3, 0.5, 0.7, 0.93); "
                        f"mismatches: {bad or 'none'}")


# -- 8-10: desk experiment -----------------------------------------------------


@pytest.fixture(scope="module")
def desk():
    """Dense, SMART (default schedule), fixed-tau SMART and magnitude per seed."""
    started = time.process_time()
    rows = []
    for seed in SEEDS:
        tr, te = gen_blobs(4, (1, 8, 8), 1000, seed)
        tc = TrainConfig(seed=seed)
        dense = build_model(ModelSpec(), seed)
        opt = tc.optimizer()
        for epoch in range(PRETRAIN_EPOCHS):
            for x, y in batches(tr, tc.batch_size, seed, epoch):
                train_step(dense, opt, x, y)
        row = {"seed": seed, "dense": evaluate(dense, te)["accuracy"]}

        def smart(schedule):
            cfg = SmartConfig(r=DESK_R, pretrain_epochs=0, search_end_epoch=SEARCH_EPOCHS,
                              finetune_epochs=FINETUNE_EPOCHS, block=DESK_BLOCK, train=tc,
                              schedule=schedule)
            return run_smart(dense.copy(), tr, te, cfg)

        run = smart(TempSchedule())
        row["smart"] = run.report["accuracy"]
        row["diagnostics"] = run.diagnostics
        row["si"] = SEARCH_EPOCHS * n_batches(tr, tc.batch_size)
        row["fixed"] = smart(TempSchedule("fixed", 1e-6, 1e-6)).report["accuracy"]
        mag = run_magnitude(dense.copy(), tr, te, DESK_R, SEARCH_EPOCHS + FINETUNE_EPOCHS, tc,
                            DESK_BLOCK)
        row["magnitude"] = mag.report["accuracy"]
        rows.append(row)
    return rows, time.process_time() - started


def _median(rows, key):
    return statistics.median(r[key] for r in rows)


@pytest.mark.slow
def test_criterion_08_desk_end_to_end(verdict, desk):
    rows, cpu = desk
    dense_min = min(r["dense"] for r in rows)
    dense, smart, mag = (_median(rows, k) for k in ("dense", "smart", "magnitude"))
    ok = dense_min >= 0.95 and dense - smart <= 0.03 and smart >= mag and cpu < 600
    per_seed = "; ".join(f"seed {r['seed']}: dense {r['dense']:.4f} smart {r['smart']:.4f} "
                         f"magnitude {r['magnitude']:.4f}" for r in rows)
    verdict(8, ok, f"min dense {dense_min:.4f} (>= 0.95), median dense-smart "
                   f"{dense - smart:+.4f} (<= 0.03), median smart {smart:.4f} >= magnitude "
                   f"{mag:.4f}, {cpu:.0f}s CPU (< 600s) [{per_seed}]")


@pytest.mark.slow
def test_criterion_09_fixed_temperature_ablation(verdict, desk):
    rows, _ = desk
    smart, fixed = _median(rows, "smart"), _median(rows, "fixed")
    per_seed = ", ".join(f"{r['fixed']:.4f}/{r['smart']:.4f}" for r in rows)
    verdict(9, fixed < smart, f"median fixed tau=1e-6 {fixed:.4f} < exponential {smart:.4f} "
                              f"(fixed/exponential per seed: {per_seed})")


@pytest.mark.slow
def test_criterion_10_convergence_proxy(verdict, desk):
    rows, _ = desk
    ratios, logged = [], True
    for r in rows:
        diag = r["diagnostics"]
        logged &= len(diag) == r["si"] and all("monitor_frac" in d for d in diag)
        window = max(1, math.ceil(0.1 * len(diag)))
        drift = [d["drift"] for d in diag]
        early, late = sum(drift[:window]), sum(drift[-window:])
        ratios.append(late / early if early > 0 else math.inf)
    ratio = statistics.median(ratios)
    ok = ratio <= 0.01 and logged
    verdict(10, ok, f"median late/early drift {ratio:.2e} (<= 1e-2), per seed "
                    f"{[f'{x:.1e}' for x in ratios]}, monitor_frac every iteration: {logged}")


# -- 11: determinism and persistence -------------------------------------------


def test_criterion_11_determinism_and_persistence(verdict, tmp_path):
    tr, te = gen_blobs(4, (1, 8, 8), 250, 3)
    tc = TrainConfig(seed=3)
    cfg = SmartConfig(r=0.5, pretrain_epochs=1, search_end_epoch=9, finetune_epochs=1,
                      block=DESK_BLOCK, train=tc)

    def fresh():
        return build_model(ModelSpec(), 3)

    full = run_smart(fresh(), tr, te, cfg)
    again = run_smart(fresh(), tr, te, cfg)
    logs_equal = (json.dumps([full.history, full.diagnostics, full.report])
                  == json.dumps([again.history, again.diagnostics, again.report]))

    per_epoch = math.ceil(len(tr) / tc.batch_size)
    si = resolve_schedule(cfg, tr).schedule.si
    stop = per_epoch + si // 2
    part = run_smart(fresh(), tr, te, cfg, stop_at=stop)
    first, second = tmp_path / "mid.bpck", tmp_path / "copy.bpck"
    save_checkpoint(first, *run_to_checkpoint(part, "h"))
    ck = load_checkpoint(first)
    save_checkpoint(second, ck.tensors, ck.meta)
    tensors, _ = run_to_checkpoint(part, "h")
    round_trip = first.read_bytes() == second.read_bytes() and all(
        ck.tensors[name].tobytes() == value.tobytes() and ck.tensors[name].dtype == value.dtype
        for name, value in tensors.items()
    )

    model = fresh()
    resumed = run_smart(model, tr, te, cfg,
                        run=run_from_checkpoint(model, resolve_schedule(cfg, tr), ck.tensors,
                                                ck.meta, "h"))
    same_loss = resumed.report["loss"] == full.report["loss"]
    ok = logs_equal and round_trip and same_loss and part.mask.iter == si // 2
    verdict(11, ok, f"bit-identical logs: {logs_equal}, bit-exact checkpoint round trip: "
                    f"{round_trip}, resume at search iteration {part.mask.iter}/{si} final loss "
                    f"{resumed.report['loss']!r} vs {full.report['loss']!r}")


# -- 12: validate command ------------------------------------------------------


def _validate(*extra):
    started = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "blockprune.cli", "validate", *extra],
                          capture_output=True, text=True, timeout=300)
    return proc, time.perf_counter() - started


def test_criterion_12_validate_command(verdict):
    clean, t_clean = _validate()
    broken, t_broken = _validate("--inject", "jacobian-sign-flip")
    failed = json.loads(broken.stdout).get("failed", []) if broken.stdout else []
    ok = (clean.returncode == 0 and broken.returncode == 1 and "jacobian_fd" in failed
          and t_clean < 120 and t_broken < 120)
    verdict(12, ok, f"clean exit {clean.returncode} in {t_clean:.1f}s, sign-flip exit "
                    f"{broken.returncode} in {t_broken:.1f}s failing {failed} (< 120s each)")
