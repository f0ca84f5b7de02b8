"""Shared test oracles: finite differences and gradient comparison."""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-5
FD_RTOL = 1e-4
# Coordinates whose gradient is below this floor are compared absolutely:
# central differences carry ~1e-10 of roundoff noise at our loss scales, so a
# pure ratio test on a near-zero coordinate measures noise, not correctness.
FD_FLOOR = 1e-3


def finite_difference(f, params: dict[str, np.ndarray], h: float = FD_STEP):
    """Central-difference gradients of scalar f(params) per coordinate."""
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + h
            hi = f(params)
            arr[ix] = orig - h
            lo = f(params)
            arr[ix] = orig
            g[ix] = (hi - lo) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FD_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def assert_grads_close(analytic: dict, numeric: dict, rtol: float = FD_RTOL):
    assert set(analytic) == set(numeric)
    for name in analytic:
        err = max_relative_error(np.asarray(analytic[name]), numeric[name])
        assert err < rtol, f"gradient mismatch on {name!r}: rel err {err:.3e}"
