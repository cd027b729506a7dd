"""Shared oracles for the test suite.

The finite-difference gradient checker is the independent oracle for
every autodiff assertion: it only ever calls forward passes, so it
cannot share a bug with the backward machinery it validates.
"""

import math
from array import array

from fedcast.tensor import Tensor


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_grad(loss_fn, t: Tensor, h: float = 1e-5) -> list[float]:
    """Central finite differences of loss_fn() w.r.t. every entry of t."""
    grads = []
    for i in range(t.size):
        orig = t.data[i]
        t.data[i] = orig + h
        plus = loss_fn()
        t.data[i] = orig - h
        minus = loss_fn()
        t.data[i] = orig
        grads.append((plus - minus) / (2.0 * h))
    return grads


def check_grads(loss_fn, tensors, tol: float, h: float = 1e-5) -> float:
    """Assert autodiff grads (already populated) match finite differences.

    Returns the worst relative error seen, for reporting.
    """
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, f"no gradient on {t.name or t.shape}"
        fd = fd_grad(loss_fn, t, h)
        for i, (ad, num) in enumerate(zip(t.grad, fd)):
            err = rel_err(ad, num)
            worst = max(worst, err)
            assert err <= tol, (
                f"gradient mismatch on {t.name or t.shape}[{i}]: "
                f"autodiff={ad!r} fd={num!r} rel={err:.3g} > {tol}")
    return worst


def max_abs_diff(a, b) -> float:
    la = list(a.data) if isinstance(a, Tensor) else list(a)
    lb = list(b.data) if isinstance(b, Tensor) else list(b)
    assert len(la) == len(lb)
    return max((abs(x - y) for x, y in zip(la, lb)), default=0.0)


def params_max_diff(p1, p2) -> float:
    assert p1.names() == p2.names()
    return max(max_abs_diff(p1.tensors[k], p2.tensors[k]) for k in p1.tensors)


def params_equal_bits(p1, p2) -> bool:
    return p1.names() == p2.names() and all(
        p1.tensors[k].data == p2.tensors[k].data for k in p1.tensors)


def softmax_list(row):
    hi = max(row)
    exps = [math.exp(v - hi) for v in row]
    s = sum(exps)
    return [e / s for e in exps]


def rand_tensor(rng, shape, lo=-1.0, hi=1.0, requires_grad=False, name=None):
    n = 1
    for s in shape:
        n *= s
    return Tensor(shape, array("d", [rng.uniform(lo, hi) for _ in range(n)]),
                  requires_grad=requires_grad, name=name)
