"""Gradients over a :class:`ParamStore` and a central-difference checker."""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .autograd import Tensor, no_grad
from .params import ParamStore

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def value_and_grad(
    loss_fn: LossFn, store: ParamStore, names: Iterable[str]
) -> tuple[float, dict[str, np.ndarray], object]:
    """Evaluate ``loss_fn`` on the store and differentiate w.r.t. ``names``.

    Every requested name gets a gradient array; parameters the loss does not
    touch (or touches only under :func:`no_grad`) get zeros. ``loss_fn`` may
    return ``(loss, aux)``; ``aux`` is passed through.
    """
    names = list(names)
    leaves = store.leaves(trainable=names)
    out = loss_fn(leaves)
    loss, aux = out if isinstance(out, tuple) else (out, None)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for n in names:
        g = leaves[n].grad
        grads[n] = np.zeros_like(store[n]) if g is None else g
        if not np.all(np.isfinite(grads[n])):
            raise FloatingPointError(f"non-finite gradient for {n!r}")
    return value, grads, aux


def _scalar(loss_fn: LossFn, store: ParamStore) -> float:
    with no_grad():
        out = loss_fn(store.leaves())
    loss = out[0] if isinstance(out, tuple) else out
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite forward value {value}")
    return value


def grad_check(
    loss_fn: LossFn,
    store: ParamStore,
    names: Iterable[str] | None = None,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max of ``|analytic - central| / max(1, |central|)`` over probed coordinates.

    Coordinates are perturbed one at a time. ``max_coords`` caps the number
    probed per tensor (sampled with ``rng``); ``None`` probes all of them.
    The store is restored before returning.
    """
    names = store.names() if names is None else list(names)
    _, grads, _ = value_and_grad(loss_fn, store, names)
    worst = 0.0
    for n in names:
        arr = store.arrays[n]
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        g_flat = grads[n].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(loss_fn, store)
            flat[i] = orig - h
            down = _scalar(loss_fn, store)
            flat[i] = orig
            central = (up - down) / (2.0 * h)
            err = abs(g_flat[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
