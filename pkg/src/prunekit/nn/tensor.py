"""A minimal reverse-mode autodiff tensor over numpy arrays.

The op set is intentionally closed: the layers in :mod:`prunekit.nn.ops`
construct the graph, and ``Tensor.backward`` walks it in reverse topological
order accumulating gradients into ``.grad``.  Everything is stored in the
array's native dtype; the package standardises on float64 so that numerical
tests and training share one code path.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from ..errors import ShapeError

__all__ = ["Tensor", "Parameter", "no_grad", "is_grad_enabled"]

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (used for eval passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-d array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Iterable["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape},{tag} requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Run reverse-mode accumulation from this tensor.

        ``grad`` defaults to 1 for scalars; non-scalar roots must supply an
        explicit upstream gradient.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar root")
            grad = np.ones_like(self.data)
        # Topological order over the subgraph that actually requires grad.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate_grad(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- helpers --------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)


class Parameter(Tensor):
    """A trainable tensor; always requires grad and carries a registry name."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


def make_result(
    data: np.ndarray,
    parents: tuple,
    backward: Optional[Callable[[np.ndarray], None]],
) -> Tensor:
    """Build an op result, dropping graph edges when grad mode is off."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)
