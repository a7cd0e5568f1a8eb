import math

import numpy as np


def glorot_init(shape, rng):
    """Uniform Glorot/Xavier initialization.

    The bound is ``sqrt(6 / (fan_in + fan_out))``; for a 1-D shape the sum of
    fans is the vector length.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (1, 2) or min(shape) < 1:
        raise ValueError(f"glorot_init supports 1-D or 2-D shapes, got {shape}")
    bound = math.sqrt(6.0 / sum(shape))
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    """Named float64 parameters, each paired with a gradient buffer of the same shape."""

    def __init__(self):
        self._values = {}
        self._grads = {}

    def add(self, name, value):
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64, copy=True)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def names(self):
        return list(self._values)

    def value(self, name):
        return self._values[name]

    def grad(self, name):
        return self._grads[name]

    def items(self):
        return self._values.items()

    def accumulate_grad(self, name, g):
        self._grads[name] += g

    def zero_grad(self):
        for g in self._grads.values():
            g.fill(0.0)

    def scale_grads(self, factor):
        for g in self._grads.values():
            g *= factor

    def grad_norm(self):
        return math.sqrt(sum(float(np.vdot(g, g)) for g in self._grads.values()))

    def set_value(self, name, value):
        cur = self._values[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != cur.shape:
            raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs {cur.shape}")
        cur[...] = value

    def copy(self):
        other = ParameterStore()
        for name, v in self._values.items():
            other.add(name, v)
        return other

    def state_dict(self):
        return {name: v.copy() for name, v in self._values.items()}

    def load_state_dict(self, state):
        missing = set(self._values) ^ set(state)
        if missing:
            raise KeyError(f"parameter set mismatch: {sorted(missing)}")
        for name, v in state.items():
            self.set_value(name, v)
