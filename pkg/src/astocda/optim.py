import numpy as np

from .errors import InvariantError


def poly_lr(base_lr, step, total_steps, power=0.9):
    """Polynomial decay: base_lr * (1 - step/total)^power, floored at 0."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


class SGD:
    """Heavy-ball SGD with weight decay folded into the gradient.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise InvariantError(f"parameter {p.name or p.shape} has no gradient; call backward first")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= lr * v
