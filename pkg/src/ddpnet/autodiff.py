"""Reverse-mode differentiation over the recorded tape, and a finite-difference oracle."""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from ddpnet._tape import Tape, active_tape, is_tracked
from ddpnet.errors import UsageError
from ddpnet.tensor import Tensor

__all__ = ["Tape", "GradientSet", "backward", "gradients", "finite_diff_check", "active_tape"]


class GradientSet(dict):
    """Parameter name -> gradient array, one entry per trainable parameter."""

    def max_abs(self) -> float:
        return max((float(np.abs(g).max()) for g in self.values() if g.size), default=0.0)


def _propagate(loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    owners: dict[int, Tensor] = {id(loss): loss}
    node = loss._node
    if node is not None:
        for nd in reversed(node.tape.nodes[: node.index + 1]):
            key = id(nd.output)
            g = grads.get(key)
            if g is None:
                continue
            if nd.output is not loss and not nd.output.requires_grad:
                del grads[key]
            for t, gi in zip(nd.inputs, nd.backward_fn(g)):
                if gi is None or not is_tracked(t):
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
                    owners[k] = t
    return {k: (owners[k], g) for k, g in grads.items()}


def gradients(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """d loss / d t for each t in ``wrt``; unreachable tensors get zeros."""
    table = _propagate(loss)
    out = []
    for t in wrt:
        entry = table.get(id(t))
        g = np.zeros_like(t.data) if entry is None else np.asarray(entry[1], dtype=t.dtype).reshape(t.shape)
        out.append(g)
    return out


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]) -> GradientSet:
    """Gradients for every named parameter; unreachable ones are zero."""
    if isinstance(params, Mapping):
        items = list(params.items())
    else:
        items = [(p.name, p) for p in params]
    grads = gradients(loss, [t for _, t in items])
    return GradientSet((name, g) for (name, _), g in zip(items, grads))


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray | Tensor,
    eps: float = 1e-4,
    indices: Iterable[int] | None = None,
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``indices`` restricts the numeric side to a subset of flat positions.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor.wrap(base.copy(), requires_grad=True)
    with Tape():
        loss = f(xt)
    (analytic,) = gradients(loss, [xt])
    analytic = analytic.reshape(-1)
    flat = base.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        fp = f(Tensor.wrap(plus.reshape(base.shape))).item()
        fm = f(Tensor.wrap(minus.reshape(base.shape))).item()
        numeric = (fp - fm) / (2 * eps)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
