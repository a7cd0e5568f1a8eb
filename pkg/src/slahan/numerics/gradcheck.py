"""Central finite-difference gradient checking against the tape."""

import numpy as np


def relative_error(analytic, numeric, floor=1e-5):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    Central differences at eps=1e-5 on an O(10) loss carry ~1e-10 of float64
    rounding noise, so entries with true gradient below ``floor`` are judged
    on absolute error instead.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(loss_fn, store, name, eps=1e-5):
    value = store.value(name)
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = loss_fn()
        flat[i] = orig - eps
        minus = loss_fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


def check_gradients(build_loss, store, names=None, eps=1e-5, floor=1e-5):
    """Compare tape gradients with central differences for every parameter.

    ``build_loss(tape)`` must construct the scalar loss node on ``tape``.
    Returns ``{name: max relative error}``.
    """
    from .tape import Tape

    names = store.names() if names is None else list(names)
    store.zero_grad()
    tape = Tape()
    tape.backward(build_loss(tape))
    analytic = {n: store.grad(n).copy() for n in names}
    store.zero_grad()

    def value():
        return float(build_loss(Tape(record=False)).value)

    report = {}
    for n in names:
        num = numeric_gradient(value, store, n, eps)
        report[n] = float(relative_error(analytic[n], num, floor).max(initial=0.0))
    return report
