"""Adam with decoupled weight decay.

Moment buffers persist inside the optimizer across steps and are keyed by
parameter name, so parameter tensors can be replaced functionally on every
step (tensors are immutable; the store is the mutable container).
"""

from array import array

from .. import kernels
from ..errors import NumericRangeError
from .tensor import Tensor


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, store, grads, lr=None):
        """Apply one update to every named gradient; returns the store.

        ``grads`` maps parameter name -> flat gradient array. Parameters
        without a gradient this step are left untouched (no decay either).
        """
        if lr is not None:
            self.lr = lr
        self.t += 1
        for name in sorted(grads):
            g = grads[name]
            p = store[name]
            if len(g) != p.size:
                raise ValueError(f"gradient size mismatch for {name}")
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = array("d", bytes(8 * p.size))
                self._v[name] = array("d", bytes(8 * p.size))
            v = self._v[name]
            out = array("d", bytes(8 * p.size))
            kernels.adam_update(
                p.data, g, m, v, self.t, self.lr, self.beta1, self.beta2,
                self.eps, self.weight_decay, out,
            )
            if not kernels.all_finite(out):
                raise NumericRangeError(f"non-finite parameter {name} after Adam step")
            store.replace(name, Tensor(p.shape, out))
        return store
