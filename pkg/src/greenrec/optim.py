"""Adam optimizer over named parameters."""

import numpy as np

from .tensor import NonFiniteError


class Adam:
    """Standard Adam with bias correction.

    Parameters with ``grad is None`` are skipped; a non-finite gradient is
    a hard error. State is keyed per parameter object.
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = {
            id(p): {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for p in self.params
        }

    def step(self):
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"adam: non-finite gradient for {getattr(p, 'name', '<param>')}")
            st = self.state[id(p)]
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            mhat = st["m"] / (1.0 - self.beta1 ** st["t"])
            vhat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
