import numpy as np


class Adam:
    """Adam over a dict of named numpy arrays (updated in place)."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for key, grad in grads.items():
            if grad is None:
                continue
            p = params[key]
            m = self.m.get(key)
            if m is None:
                m = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            self.m[key] = m
            self.v[key] = v
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
