"""Adam over named parameter groups, with a piecewise-halved learning rate.

The schedule halves the initial rate a fixed number of times at equally
spaced points of the configured horizon; accepted updates advance the
moment estimates, rejected steps leave them untouched.
"""

import numpy as np

from .autodiff import Variable
from .errors import ContractViolation


class LrSchedule:
    """lr(t) = initial / 2**k with k = floor(t * (halvings + 1) / total), capped."""

    def __init__(self, initial, halvings=0, total_steps=1):
        if initial <= 0:
            raise ContractViolation("learning rate must be positive")
        if halvings < 0 or total_steps < 1:
            raise ContractViolation("halvings must be >= 0 and total_steps >= 1")
        self.initial = float(initial)
        self.halvings = int(halvings)
        self.total_steps = int(total_steps)

    def at(self, step):
        if step < 0:
            raise ContractViolation("schedule queried before step 0")
        k = min(self.halvings, (step * (self.halvings + 1)) // self.total_steps)
        return self.initial * 0.5 ** k


class OptimizerState:
    """Adam moments keyed by parameter name.

    `params` maps names to leaf Variables; updates mutate the Variable
    values in place. `step_count` counts accepted updates only.
    """

    def __init__(self, params, schedule, beta1=0.9, beta2=0.999, eps=1e-8):
        for name, p in params.items():
            if not isinstance(p, Variable):
                raise ContractViolation(f"parameter {name!r} is not a Variable")
            if not p.requires_grad:
                raise ContractViolation(f"parameter {name!r} does not carry gradients")
        self.params = dict(params)
        self.schedule = schedule
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def lr_for(self, iteration):
        return self.schedule.at(iteration)

    def apply(self, grads, lr):
        """One Adam update from `grads` (name -> array); missing names are skipped."""
        if lr < 0:
            raise ContractViolation("learning rate must be nonnegative")
        t = self.step_count + 1
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            if name not in self.params:
                raise ContractViolation(f"gradient for unknown parameter {name!r}")
            p = self.params[name]
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.value.shape:
                raise ContractViolation(f"gradient shape mismatch for {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.step_count = t
