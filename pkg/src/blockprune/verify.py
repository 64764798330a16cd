"""Brute-force oracles and the suites run by ``blockprune validate``.

The oracles deliberately avoid :mod:`blockprune.dtopk`'s solver: the
threshold comes from :func:`scipy.optimize.brentq`, the Jacobian is
reassembled from the closed form, hard top-k comes from a full sort, and
AWG zero counts use exact decimal arithmetic.
"""

from __future__ import annotations

import itertools
import math
import time
from fractions import Fraction
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from . import autodiff as ad
from .baselines import awg_threshold
from .blocks import BlockSpec, partition
from .dtopk import soft_topk, topk_forward, topk_jacobian
from .smart import TempSchedule, schedule_value
from .tolerances import TOL


# ---------------------------------------------------------------- oracles

def oracle_threshold(x, k: int, tau: float) -> float:
    z = np.asarray(x, dtype=np.float64) / tau
    g = lambda t: float(expit(z + t).sum()) - k  # noqa: E731
    lo, hi = -z.max() - 60.0, -z.min() + 60.0
    return brentq(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def oracle_forward(x, k: int, tau: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return expit(x / tau + oracle_threshold(x, k, tau))


def oracle_jacobian(x, k: int, tau: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    f = oracle_forward(x, k, tau)
    v = f * (1.0 - f)
    return (np.diag(v) - np.outer(v, v) / v.sum()) / tau


def oracle_hard_topk(x, k: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ranked = sorted(range(x.size), key=lambda i: (-x[i], i))
    out = np.zeros(x.size)
    out[ranked[:k]] = 1.0
    return out


def fd_jacobian(x, k: int, tau: float, h: float = TOL["fd_h"],
                forward: Callable = oracle_forward) -> np.ndarray:
    """Central differences of ``forward`` (columns are d f / d x_j)."""
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"step h must lie in [1e-8, 1e-4], got {h}")
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((forward(x + e, k, tau) - forward(x - e, k, tau)) / (2 * h))
    return np.stack(cols, axis=1)


def topk_gap(x, k: int) -> float:
    s = np.sort(np.asarray(x, dtype=np.float64))[::-1]
    return float(s[k - 1] - s[k])


def limit_check(x, k: int, tau: float = TOL["limit_tau"]) -> float:
    """Max |f_tau(x) - hard_topk(x)|; requires a top-k gap of at least ``limit_gap``."""
    if topk_gap(x, k) < TOL["limit_gap"]:
        raise ValueError("limit_check needs a top-k gap >= %g" % TOL["limit_gap"])
    return float(np.abs(topk_forward(x, k, tau).f - oracle_hard_topk(x, k)).max())


def awg_oracle_mask(imp, step: int, steps: int, r: float) -> np.ndarray:
    imp = np.asarray(imp, dtype=np.float64)
    zeros = math.floor(Fraction(str(r)) * step / steps * imp.size)
    order = sorted(range(imp.size), key=lambda i: (imp[i], -i))
    mask = np.ones(imp.size)
    mask[order[:zeros]] = 0.0
    return mask


def toy_problem(seed: int = 0):
    """Two fully connected layers carved into 6 blocks of 2x2."""
    rng = np.random.default_rng([seed, 7])
    params = {
        "w1": rng.normal(size=(4, 3)),
        "b1": rng.normal(size=4) * 0.1,
        "w2": rng.normal(size=(2, 4)),
        "b2": np.zeros(2),
    }
    x = rng.normal(size=(5, 3))
    y = rng.integers(0, 2, size=5)
    m = rng.normal(size=6)
    return params, x, y, m


def _toy_loss(p, x, y):
    h = ad.relu(ad.linear(x, p["w1"], p["b1"]))
    return ad.softmax_cross_entropy(ad.linear(h, p["w2"], p["b2"]), y)


def _toy_block_index(shape, bo, bi, offset):
    o, i = shape
    per_row = -(-i // bi)
    rows, cols = np.indices(shape)
    return offset + (rows // bo) * per_row + cols // bi


def grad_identity_check(seed: int = 0, k: int = 3, tau: float = 0.5, upstream: float = 1.0,
              jacobian: Callable = oracle_jacobian) -> dict:
    """Autodiff gradients of the masked toy vs explicit assembly from dL/dw_hat."""
    params, x, y, m0 = toy_problem(seed)
    part = partition([("w1", (4, 3)), ("w2", (2, 4))], BlockSpec(2, 2))
    if part.n_blocks > 8:
        raise AssertionError("toy problem must have at most 8 blocks")

    tensors = {n: ad.Tensor(v, requires_grad=True) for n, v in params.items()}
    m = ad.Tensor(m0, requires_grad=True)
    f, _ = soft_topk(m, k, tau)
    graph = ad.Graph({**tensors, "m": m})

    def masked(p, xb):
        q = dict(p)
        for layer in part.layers:
            q[layer.name] = p[layer.name] * ad.gather(f, layer.index)
        return _toy_loss(q, xb, y)

    graph.forward(masked, ad.Tensor(x))
    auto = graph.backward(upstream)

    # explicit side, sharing only the Tensor engine
    idx = {"w1": _toy_block_index((4, 3), 2, 2, 0), "w2": _toy_block_index((2, 4), 2, 2, 4)}
    f_or = oracle_forward(m0, k, tau)
    w_hat = {n: (params[n] * f_or[idx[n]] if n in idx else params[n]) for n in params}
    leaf = {n: ad.Tensor(v, requires_grad=True) for n, v in w_hat.items()}
    g2 = ad.Graph(leaf)
    g2.forward(lambda p, xb: _toy_loss(p, xb, y), ad.Tensor(x))
    d_hat = g2.backward(upstream)
    g = np.zeros(m0.size)
    err_w = 0.0
    for n, ix in idx.items():
        err_w = max(err_w, float(np.abs(auto[n] - d_hat[n] * f_or[ix]).max()))
        np.add.at(g, ix.ravel(), (d_hat[n] * params[n]).ravel())
    d_m = jacobian(m0, k, tau).T @ g
    err_m = float(np.abs(auto["m"] - d_m).max())
    zero = upstream == 0 and all(not np.any(v) for v in auto.values())
    return {"err_w": err_w, "err_m": err_m, "all_zero": bool(zero)}


# ---------------------------------------------------------------- suites

def _verdict(name, ok, cases, started, **extra):
    out = {"suite": name, "pass": bool(ok), "cases": int(cases),
           "seconds": round(time.perf_counter() - started, 3)}
    out.update(extra)
    return out


def suite_limit(n_cases: int = 1000, seed: int = 11) -> dict:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 0])
    worst, bad, done = 0.0, None, 0
    while done < n_cases:
        n = int(rng.integers(4, 257))
        k = int(rng.integers(1, n))
        x = rng.normal(size=n)
        if topk_gap(x, k) < TOL["limit_gap"]:
            continue
        dev = limit_check(x, k)
        if dev > worst:
            worst = dev
        if dev > TOL["limit_dev"] and bad is None:
            bad = {"n": n, "k": k, "deviation": dev}
        done += 1
    sweep = [limit_check([1.0, 2.0, 3.0], 2, t) for t in (1e-2, 1e-4, 1e-6)]
    monotone = sweep[0] >= sweep[1] >= sweep[2]
    return _verdict("topk_limit", bad is None and monotone, done, t0, max_deviation=worst,
                    tolerance=TOL["limit_dev"], sweep=sweep, counterexample=bad)


def suite_sum(n_random: int = 10000, seed: int = 12) -> dict:
    t0 = time.perf_counter()
    worst, bad, cases = 0.0, None, 0

    def check(x, k, tau):
        nonlocal worst, bad, cases
        f = topk_forward(x, k, tau).f
        err = abs(float(f.sum()) - k) / len(x)
        worst = max(worst, err)
        if err > TOL["sum_per_n"] and bad is None:
            bad = {"x": [float(v) for v in x], "k": k, "tau": tau, "sum": float(f.sum())}
        cases += 1

    for n in range(2, 7):
        for x in itertools.product((-1.0, 0.0, 1.0), repeat=n):
            for k in range(1, n):
                for tau in (1.0, 1e-3):
                    check(np.array(x), k, tau)
    rng = np.random.default_rng([seed, 0])
    for _ in range(n_random):
        n = int(rng.integers(2, 65))
        x = rng.normal(size=n) * rng.choice([0.1, 1.0, 10.0])
        check(x, int(rng.integers(1, n)), float(10.0 ** rng.uniform(-6, 1)))
    return _verdict("sum_constraint", bad is None, cases, t0, max_error_per_n=worst,
                    tolerance=TOL["sum_per_n"], counterexample=bad)


def suite_jacobian(n_cases: int = 100, seed: int = 13,
                   jacobian: Callable = topk_jacobian) -> dict:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 0])
    stats = {"rel": 0.0, "sym": 0.0, "rowsum": 0.0, "min_eig": math.inf}
    bad = None
    for case in range(n_cases):
        n = int(rng.integers(2, 17))
        k = int(rng.integers(1, n))
        tau = (0.1, 1.0)[case % 2]
        x = rng.normal(size=n)
        ja = jacobian(x, k, tau)
        jf = fd_jacobian(x, k, tau)
        rel = float(np.abs(ja - jf).max() / np.abs(jf).max())
        sym = float(np.abs(ja - ja.T).max())
        rows = float(np.abs(ja.sum(axis=1)).max())
        stats["rel"], stats["sym"], stats["rowsum"] = (
            max(stats["rel"], rel), max(stats["sym"], sym), max(stats["rowsum"], rows))
        fails = [rel > TOL["jac_rel"], sym > TOL["jac_sym"], rows > TOL["jac_rowsum"]]
        if n <= 8:
            eig = float(np.linalg.eigvalsh((ja + ja.T) / 2).min())
            stats["min_eig"] = min(stats["min_eig"], eig)
            fails.append(eig < TOL["jac_min_eig"])
        if any(fails) and bad is None:
            bad = {"x": x.tolist(), "k": k, "tau": tau, "rel_err": rel, "sym": sym, "rowsum": rows}
    return _verdict("jacobian_fd", bad is None, n_cases, t0, max_rel_error=stats["rel"],
                    max_asymmetry=stats["sym"], max_row_sum=stats["rowsum"],
                    min_eigenvalue=stats["min_eig"], tolerance=TOL["jac_rel"],
                    counterexample=bad)


def suite_anchor() -> dict:
    t0 = time.perf_counter()
    sol = topk_forward([1.0, 2.0], 1, 1.0)
    s = float(expit(0.5))
    expect_f = np.array([1 - s, s])
    c = s * (1 - s) / 2
    expect_j = np.array([[c, -c], [-c, c]])
    errs = {
        "t": abs(sol.t - (-1.5)),
        "f": float(np.abs(sol.f - expect_f).max()),
        "J": float(np.abs(topk_jacobian([1.0, 2.0], 1, 1.0) - expect_j).max()),
    }
    ok = all(e <= TOL["anchor"] for e in errs.values())
    return _verdict("closed_form_anchor", ok, 1, t0, errors=errs, tolerance=TOL["anchor"],
                    counterexample=None if ok else errs)


def suite_grad_identity(seeds=range(5)) -> dict:
    t0 = time.perf_counter()
    worst_w = worst_m = 0.0
    bad = None
    for seed in seeds:
        for k in (1, 3, 5):
            res = grad_identity_check(seed, k)
            worst_w, worst_m = max(worst_w, res["err_w"]), max(worst_m, res["err_m"])
            if (res["err_w"] > TOL["identity_w"] or res["err_m"] > TOL["identity_m"]) and bad is None:
                bad = {"seed": seed, "k": k, **res}
        zero = grad_identity_check(seed, 3, upstream=0.0)
        if not zero["all_zero"] and bad is None:
            bad = {"seed": seed, "zero_upstream": zero}
    return _verdict("gradient_identity", bad is None, len(seeds) * 4, t0, max_err_w=worst_w,
                    max_err_m=worst_m, tolerance=[TOL["identity_w"], TOL["identity_m"]],
                    counterexample=bad)


def suite_schedule(seed: int = 14) -> dict:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 0])
    worst, bad, cases = 0.0, None, 0
    for _ in range(50):
        te = float(10.0 ** rng.uniform(-6, -2))
        ts = float(rng.uniform(0.05, 1.0))
        si = int(rng.integers(1, 5000))
        for fam in ("linear", "exponential", "inverse_exponential"):
            sched = TempSchedule(fam, ts, te, si)
            err = max(abs(schedule_value(sched, 0) - ts), abs(schedule_value(sched, si) - te))
            worst = max(worst, err)
            if err > TOL["schedule"] and bad is None:
                bad = {"family": fam, "tau_start": ts, "tau_end": te, "si": si, "error": err}
            cases += 1
    mid = abs(schedule_value(TempSchedule("exponential", 1.0, 1e-4, 4), 2) - 0.01)
    if mid > TOL["schedule"] and bad is None:
        bad = {"family": "exponential", "tau(2)": mid}
    return _verdict("schedule_boundaries", bad is None, cases + 1, t0, max_error=max(worst, mid),
                    tolerance=TOL["schedule"], counterexample=bad)


def suite_awg(n_cases: int = 500, seed: int = 15) -> dict:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 0])
    bad = None
    for _ in range(n_cases):
        n = int(rng.integers(1, 200))
        steps = int(rng.integers(1, 6))
        step = int(rng.integers(1, steps + 1))
        r = round(float(rng.uniform(0, 1)), int(rng.integers(1, 4)))
        # coarse rounding creates ties
        imp = np.round(np.abs(rng.normal(size=n)), int(rng.integers(0, 3)))
        got = awg_threshold(imp, step, steps, r)
        want = awg_oracle_mask(imp, step, steps, r)
        if not np.array_equal(got, want) and bad is None:
            bad = {"n": n, "r": r, "step": step, "steps": steps,
                   "zeros_got": int((got == 0).sum()), "zeros_want": int((want == 0).sum())}
    return _verdict("awg_quantile", bad is None, n_cases, t0, counterexample=bad)


def run_all(inject: Optional[str] = None) -> list:
    """Run every suite; ``inject='jacobian-sign-flip'`` negates the analytic Jacobian."""
    jac = topk_jacobian
    if inject == "jacobian-sign-flip":
        jac = lambda x, k, tau: -topk_jacobian(x, k, tau)  # noqa: E731
    elif inject is not None:
        raise ValueError(f"unknown fault injection {inject!r}")
    return [
        suite_anchor(),
        suite_limit(),
        suite_sum(),
        suite_jacobian(jacobian=jac),
        suite_grad_identity(),
        suite_schedule(),
        suite_awg(),
    ]
