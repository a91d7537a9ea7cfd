"""Ordered layer stacks with cached reverse-mode backward."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from splitlab.nn.layers import Layer, ShapeError

_stack_ids = itertools.count()


class StackShapeError(ShapeError):
    def __init__(self, index: int, layer: Layer, message: str):
        super().__init__(f"layer {index} ({layer.kind}): {message}")
        self.index = index


class StaleCacheError(RuntimeError):
    """A cache was handed to a stack that did not produce it, or params changed since."""


@dataclass
class Cache:
    stack_id: int
    version: int
    entries: list = field(default_factory=list)


class Grads(NamedTuple):
    input: np.ndarray
    params: dict
    style: np.ndarray | None


class Stack:
    """A feed-forward chain of layers; the unit of forward/backward.

    Parameters are addressed as ``"<layer index>.<name>"``. Replacing them via
    :meth:`set_params` invalidates outstanding caches.
    """

    def __init__(self, layers=()):
        self.layers: list[Layer] = list(layers)
        self._id = next(_stack_ids)
        self._version = 0

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return f"Stack({self.layers!r})"

    @property
    def uses_style(self) -> bool:
        return any(layer.uses_style for layer in self.layers)

    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for key, value in params.items():
            i, name = key.split(".", 1)
            layer = self.layers[int(i)]
            if name not in layer.params:
                raise KeyError(key)
            if layer.params[name].shape != value.shape:
                raise ShapeError(f"parameter {key}: expected {layer.params[name].shape}, got {value.shape}")
            layer.params[name] = value
        self._version += 1

    def astype(self, dtype) -> "Stack":
        """Copy of this stack with every parameter cast to ``dtype``."""
        import copy

        clone = copy.deepcopy(self)
        clone._id = next(_stack_ids)
        for layer in clone.layers:
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
        return clone

    def output_shape(self, shape):
        shape = tuple(shape)
        for i, layer in enumerate(self.layers):
            try:
                layer.check_input(shape)
            except ShapeError as e:
                raise StackShapeError(i, layer, str(e)) from None
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x: np.ndarray, w: np.ndarray | None = None):
        cache = Cache(self._id, self._version)
        for i, layer in enumerate(self.layers):
            try:
                layer.check_input(x.shape)
                x, c = layer.forward(x, w)
            except ShapeError as e:
                raise StackShapeError(i, layer, str(e)) from None
            cache.entries.append(c)
        return x, cache

    def __call__(self, x, w=None):
        return self.forward(x, w)[0]

    def backward(self, cache: Cache, g: np.ndarray, need_params: bool = True) -> Grads:
        if cache.stack_id != self._id or cache.version != self._version or len(cache.entries) != len(self.layers):
            raise StaleCacheError("cache does not belong to this stack's current parameters")
        grads = {}
        dw = None
        for i in range(len(self.layers) - 1, -1, -1):
            g, pg, sg = self.layers[i].backward(cache.entries[i], g, need_params)
            for k, v in pg.items():
                grads[f"{i}.{k}"] = v
            if sg is not None:
                dw = sg if dw is None else dw + sg
        return Grads(g, grads, dw)


def param_checksum(*stacks: Stack) -> str:
    """Content hash over all parameters of the given stacks."""
    import hashlib

    h = hashlib.sha256()
    for stack in stacks:
        for key, value in sorted(stack.params().items()):
            h.update(key.encode())
            h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()
