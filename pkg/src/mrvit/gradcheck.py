"""Central finite-difference gradient checking.

Run the checks in float64: build the inputs as float64 tensors and every op
downstream stays in float64. ``h`` defaults to 1e-5 and relative error uses
max(|a|, |b|, 1e-8) as the denominator.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def numerical_gradient(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f / d t by central differences, one element at a time."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Compare tape gradients of ``f()`` against central differences for every
    element of every tensor in ``wrt``; returns the worst relative error."""
    for t in wrt:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    tape_grads = [np.array(t.grad, copy=True) for t in wrt]

    def scalar_f() -> float:
        return f().item()

    worst = 0.0
    for t, tg in zip(wrt, tape_grads):
        ng = numerical_gradient(scalar_f, t, h=h)
        worst = max(worst, relative_error(tg, ng))
    return worst


def check_gradients_sampled(
    f: Callable[[], Tensor],
    wrt: Sequence[tuple[str, Tensor]],
    n_samples: int,
    rng: np.random.Generator,
    h: float = 1e-5,
) -> tuple[float, int]:
    """Check ``n_samples`` randomly chosen parameter elements drawn across all
    tensors in ``wrt`` (weighted by size). Returns (worst rel err, n checked)."""
    for _, t in wrt:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    grads = {name: np.array(t.grad, copy=True) for name, t in wrt}

    sizes = np.array([t.size for _, t in wrt])
    probs = sizes / sizes.sum()

    def scalar_f() -> float:
        return f().item()

    worst = 0.0
    for _ in range(n_samples):
        which = rng.choice(len(wrt), p=probs)
        name, t = wrt[which]
        flat = t.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + h
        fp = scalar_f()
        flat[i] = orig - h
        fm = scalar_f()
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        tape_g = grads[name].reshape(-1)[i]
        worst = max(worst, relative_error(np.asarray(tape_g), np.asarray(num)))
    return worst, n_samples
