"""Adam over a list of numpy parameter arrays, updated in place."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


class Adam:
    """Standard Adam (bias-corrected); parameters are modified in place."""

    def __init__(self, params, lr=1e-2, betas=(0.9, 0.999), eps=1e-15):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.ascontiguousarray(g, dtype=p.dtype).reshape(-1)
            _adam_update(p.reshape(-1), g, m.reshape(-1), v.reshape(-1), lr, self.b1, self.b2, c1, c2, self.eps)

    def compact(self, index, which=0):
        """Keep only rows ``index`` of parameter ``which`` (after pruning)."""
        self.params[which] = np.ascontiguousarray(self.params[which][index])
        self.m[which] = np.ascontiguousarray(self.m[which][index])
        self.v[which] = np.ascontiguousarray(self.v[which][index])
        return self.params[which]
