"""Shared finite-difference gradient checking over parameter dicts."""

import numpy as np


def fd_param_max_err(loss_np, params: dict, analytic: dict, eps: float = 1e-6) -> float:
    """Worst relative error between ``analytic`` grads and central differences.

    ``loss_np(params) -> float`` re-evaluates the loss from mutated arrays;
    every entry of every parameter is probed.  Relative error is
    |a - n| / max(1, |n|), matching the autograd grad_check convention.
    """
    worst = 0.0
    for name, arr in params.items():
        ana = np.asarray(analytic[name]).ravel()
        # index through the array itself: ravel() would copy (and the probe
        # would silently no-op) whenever the parameter is a transposed view
        for i in range(arr.size):
            idx = np.unravel_index(i, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            hi = loss_np(params)
            arr[idx] = orig - eps
            lo = loss_np(params)
            arr[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(ana[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
