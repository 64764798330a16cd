"""Sigmoid-based differentiable top-k with a solved threshold offset.

``f_i(x) = sigmoid(x_i / tau + t)`` where the scalar ``t`` is found by
bisection so that ``sum(f) == k``.  As ``tau -> 0`` the output approaches the
0/1 indicator of the ``k`` largest entries.  The Jacobian is

    J = (diag(v) - v v^T / |v|_1) / tau,    v_i = sigmoid'(x_i / tau + t)

which is symmetric, so the vector-Jacobian product is also the
Jacobian-vector product and costs O(N).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .autodiff import Tensor, custom

#: bisection stops once |sum(f) - k| <= SOLVE_RTOL * k
SOLVE_RTOL = 1e-12
MAX_BISECT = 200
#: |v|_1 below this counts as fully saturated (zero Jacobian)
SATURATION_FLOOR = 1e-300


def sigmoid(z):
    # expit branches on sign internally; never overflows
    return expit(z)


def sigmoid_grad(z):
    return expit(z) * expit(-z)


def _check_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input vector contains non-finite values")
    return x


def _check_k(k: int, n: int) -> int:
    if int(k) != k:
        raise ValueError(f"k must be an integer, got {k!r}")
    k = int(k)
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}], got {k}")
    return k


def hard_topk(x, k: int) -> np.ndarray:
    """0/1 indicator of the ``k`` largest entries; ties keep the lower index."""
    x = _check_vector(x)
    k = _check_k(k, x.size)
    # stable sort on -x: equal values keep index order, so lower index first
    order = np.argsort(-x, kind="stable")
    out = np.zeros(x.size)
    out[order[:k]] = 1.0
    return out


def _log_sum_sigmoid(z: np.ndarray) -> float:
    # scipy's logsumexp costs ~60us per call in dispatch alone; this is hot
    if not z.size:
        return -math.inf
    logs = log_expit(z)
    top = logs.max()
    return float(top + np.log(np.exp(logs - top).sum()))


def _excess(z: np.ndarray, k: int) -> tuple[float, float]:
    """Signed ``sum(sigmoid(z)) - k`` plus a tie-break key for the saturated case.

    Entries are split by sign so the small tails ``A = sum_{z<0} sigmoid(z)``
    and ``B = sum_{z>=0} sigmoid(-z)`` keep full relative precision.  When
    both tails are below the solve tolerance the float excess is flat, and
    the second value (``log A - log B``) still orders ``t`` correctly.
    """
    neg = z < 0
    upper = int(z.size - np.count_nonzero(neg))
    a_terms = z[neg]
    b_terms = -z[~neg]
    a = float(expit(a_terms).sum())
    b = float(expit(b_terms).sum())
    excess = (upper - k) + (a - b)
    if upper != k or max(a, b) >= SOLVE_RTOL * k:
        return excess, math.nan
    return excess, _log_sum_sigmoid(a_terms) - _log_sum_sigmoid(b_terms)


def solve_threshold(x, k: int, tau: float) -> float:
    """Offset ``t`` with ``sum(sigmoid(x / tau + t)) == k``.

    Valid for ``1 <= k <= N - 1``.  The bracket comes from the k-th and
    (k+1)-th largest entries and is bisected until the
    sum is within ``SOLVE_RTOL * k`` of ``k`` or ``MAX_BISECT`` steps.  In the
    fully saturated regime (tiny ``tau``) every ``t`` on a plateau meets the
    tolerance; there the bisection keeps going on the log-tail balance so it
    lands on the actual root rather than an arbitrary plateau point.
    """
    x = _check_vector(x)
    n = x.size
    k = _check_k(k, n)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not 1 <= k <= n - 1:
        raise ValueError(f"solve_threshold needs 1 <= k <= N-1, got k={k}, N={n}")

    z = x / tau
    tol = SOLVE_RTOL * k

    def direction(t):
        # >0: sum too large (t too big); <0: too small; 0: accept
        e = float(expit(z + t).sum()) - k
        if abs(e) > tol:
            return e
        e, balance = _excess(z + t, k)
        if math.isnan(balance):
            return 0.0 if abs(e) <= tol else e
        if abs(balance) <= SOLVE_RTOL * max(1.0, abs(z).max()):
            return 0.0
        return balance

    # with L > log N, sum < k at -z_(k) - L and sum > k at -z_(k+1) + L
    # (z_(j) = j-th largest), so the root is bracketed without a search
    part = np.partition(z, (n - k - 1, n - k))
    pad = math.log(n) + 1.0
    lo, hi = -part[n - k] - pad, -part[n - k - 1] + pad
    while direction(lo) > 0:  # guards against rounding only
        lo -= pad
    while direction(hi) < 0:
        hi += pad

    mid = 0.5 * (lo + hi)
    for _ in range(MAX_BISECT):
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break  # bracket is down to adjacent floats
        d = direction(mid)
        if d == 0:
            break
        if d > 0:
            hi = mid
        else:
            lo = mid
    # one Newton step polishes the unsaturated case to machine precision
    f = expit(z + mid)
    slope = float((f * (1.0 - f)).sum())
    err = float(f.sum()) - k
    if slope > SATURATION_FLOOR and err:
        cand = mid - err / slope
        if abs(float(expit(z + cand).sum()) - k) < abs(err):
            mid = cand
    return float(mid)


@dataclass(frozen=True)
class TopkSolution:
    t: float
    f: np.ndarray
    #: sigmoid'(x / tau + t); empty for the short-circuited k=0 / k=N cases
    v: np.ndarray
    tau: float


def topk_forward(x, k: int, tau: float) -> TopkSolution:
    """Soft top-k values ``f`` summing to ``k``.

    ``k == 0`` and ``k == N`` return the all-zeros / all-ones vector: no
    finite offset satisfies the constraint there.
    """
    x = _check_vector(x)
    n = x.size
    k = _check_k(k, n)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if k == 0 or k == n:
        t = -math.inf if k == 0 else math.inf
        return TopkSolution(t, np.full(n, float(k == n)), np.zeros(n), tau)
    t = solve_threshold(x, k, tau)
    z = x / tau + t
    return TopkSolution(t, sigmoid(z), sigmoid_grad(z), tau)


def topk_jacobian(x, k: int, tau: float) -> np.ndarray:
    sol = topk_forward(x, k, tau)
    return jacobian_from_solution(sol)


def jacobian_from_solution(sol: TopkSolution) -> np.ndarray:
    v = sol.v
    norm = v.sum()
    if norm < SATURATION_FLOOR:
        return np.zeros((v.size, v.size))
    return (np.diag(v) - np.outer(v, v) / norm) / sol.tau


def vjp_from_solution(sol: TopkSolution, upstream) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != sol.v.shape:
        raise ValueError(f"upstream has shape {upstream.shape}, expected {sol.v.shape}")
    v = sol.v
    norm = v.sum()
    if norm < SATURATION_FLOOR:
        return np.zeros_like(v)
    return v * (upstream - (v @ upstream) / norm) / sol.tau


def topk_vjp(x, k: int, tau: float, upstream) -> np.ndarray:
    """``J @ upstream`` in O(N) without forming J."""
    return vjp_from_solution(topk_forward(x, k, tau), upstream)


def soft_topk(x: Tensor, k: int, tau: float) -> tuple[Tensor, TopkSolution]:
    """Autodiff-aware soft top-k; returns the output tensor and the solution."""
    sol = topk_forward(x.data, k, tau)
    out = custom(x, sol.f, lambda g: vjp_from_solution(sol, g), "soft_topk")
    return out, sol
