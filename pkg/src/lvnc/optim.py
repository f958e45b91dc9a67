"""
Rectified Adam optimiser for lists of tensors.
"""

import numpy as np


class RAdam:
    """Rectified Adam with decoupled weight decay.

    Parameters
    ----------
    params : list of Tensor
        Tensors updated in place by :meth:`step`.
    lr : float
        Learning rate.
    betas : tuple of float
        Decay rates of the first and second moment estimates.
    eps : float
        Added to the square root of the second moment.
    weight_decay : float
        Parameters are multiplied by ``1 - lr * weight_decay`` before each update.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=5e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.rho_inf = 2.0 / (1.0 - self.beta2) - 1.0

    def rectification(self, t=None):
        """Return (rho_t, r_t); r_t is None while the variance estimate is untrustworthy."""
        t = self.t if t is None else t
        b2t = self.beta2 ** t
        rho_t = self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)
        if rho_t <= 4.0:
            return rho_t, None
        ri = self.rho_inf
        r = np.sqrt((rho_t - 4) * (rho_t - 2) * ri / ((ri - 4) * (ri - 2) * rho_t))
        return rho_t, r

    def step(self, grads=None):
        """Apply one update using ``grads`` (defaults to each parameter's ``.grad``)."""
        if grads is None:
            grads = [p.grad for p in self.params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        _, r = self.rectification()
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m_hat = m / bc1
            if r is None:
                p.data -= self.lr * m_hat
            else:
                p.data -= self.lr * r * m_hat / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}
