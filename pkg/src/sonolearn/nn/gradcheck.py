"""Finite-difference gradient verification.

check_gradients runs a scalar-valued function twice per input coordinate
(central differences, 64-bit inputs) and compares against the analytic
gradients produced by backward(). Intended for ad-hoc verification when
adding or modifying ops.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def max_relative_error(analytic, numeric, floor=1e-2):
    """Elementwise |a - n| / max(|a|, |n|, floor), reduced to the maximum.

    The floor turns the comparison absolute for near-zero gradients, so a
    disconnected parameter (both sides zero) scores 0 instead of 0/0.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn, inputs, h=1e-3):
    """Compare analytic and central-difference gradients of a scalar map.

    fn takes the list of Tensors and returns a scalar Tensor; inputs must be
    float64 leaves with requires_grad set. Returns the max relative error
    over all coordinates of all inputs.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checking requires float64 tensors")
        t.zero_grad()
    loss = fn(inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(inputs).data)
            flat[i] = orig - h
            down = float(fn(inputs).data)
            flat[i] = orig
            num[i] = (up - down) / (2.0 * h)
        worst = max(worst, max_relative_error(ana.reshape(-1), num))
    return worst
