"""LARS and Adam optimizers over named parameter lists.

Both take [(name, Tensor)] at construction, keep per-parameter moment
buffers, and check every gradient for non-finite values before touching any
parameter; a bad gradient aborts the whole step with the offending
parameter named.

Parameters tagged "bias" or "norm" are exempt from weight decay, and in
LARS also from trust-ratio scaling.
"""

from __future__ import annotations

import numpy as np


class OptimizerError(RuntimeError):
    """A step could not be applied (e.g. non-finite gradient)."""


def _is_exempt(tensor):
    return tensor.tag in ("bias", "norm")


class _OptimizerBase:
    def __init__(self, named_params):
        self.named_params = list(named_params)
        if not self.named_params:
            raise ValueError("optimizer needs at least one parameter")

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def _gather_grads(self):
        """All gradients, validated before any parameter is mutated."""
        grads = []
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {name!r}")
            grads.append(g)
        return grads


class Lars(_OptimizerBase):
    """Layer-wise adaptive rate scaling with momentum.

    Per parameter: g' = g + wd*w; trust = eta*||w|| / (||g'|| + eps) unless
    the parameter is exempt or either norm is zero (then trust = 1);
    buf = momentum*buf + trust*g'; w -= lr*buf.
    """

    def __init__(self, named_params, lr=0.2, weight_decay=1.5e-6,
                 momentum=0.9, trust_coefficient=0.001, eps=1e-8):
        super().__init__(named_params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.momentum = float(momentum)
        self.trust_coefficient = float(trust_coefficient)
        self.eps = float(eps)
        self._momentum_buffers = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        grads = self._gather_grads()
        for (name, p), g, buf in zip(self.named_params, grads, self._momentum_buffers):
            exempt = _is_exempt(p)
            if self.weight_decay != 0.0 and not exempt:
                g = g + self.weight_decay * p.data
            trust = 1.0
            if not exempt:
                w_norm = float(np.linalg.norm(p.data.astype(np.float64)))
                g_norm = float(np.linalg.norm(g.astype(np.float64)))
                if w_norm > 0.0 and g_norm > 0.0:
                    trust = self.trust_coefficient * w_norm / (g_norm + self.eps)
            buf *= self.momentum
            buf += trust * g
            p.data -= (self.lr * buf).astype(p.data.dtype)


class Adam(_OptimizerBase):
    """Adam with classic coupled weight decay (decay added to the gradient)
    and bias-corrected moment estimates."""

    def __init__(self, named_params, lr=1e-4, weight_decay=1e-4,
                 betas=(0.9, 0.999), eps=1e-8):
        super().__init__(named_params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.named_params]
        self._v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        grads = self._gather_grads()
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (name, p), g, m, v in zip(self.named_params, grads, self._m, self._v):
            if self.weight_decay != 0.0 and not _is_exempt(p):
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)
