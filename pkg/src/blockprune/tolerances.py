"""Single tolerance table shared by the oracle suites and the acceptance tests."""

TOL = {
    # soft top-k limit as tau -> 0
    "limit_tau": 1e-6,
    "limit_dev": 1e-4,
    "limit_gap": 1e-3,
    # |sum f - k| <= sum_per_n * N
    "sum_per_n": 1e-9,
    # Jacobian vs central differences
    "fd_h": 1e-6,
    "jac_rel": 1e-5,
    "jac_sym": 1e-10,
    "jac_rowsum": 1e-10,
    "jac_min_eig": -1e-10,
    # closed-form anchors
    "anchor": 1e-5,
    # explicit gradient identities (weights, masks)
    "identity_w": 1e-10,
    "identity_m": 1e-8,
    "schedule": 1e-12,
    # autodiff primitives vs central differences
    "grad_rel": 1e-6,
}
