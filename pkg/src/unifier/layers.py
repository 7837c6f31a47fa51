"""Parameter containers: a minimal Module base, Linear and LayerNorm."""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor, layer_norm, tensor_init
from .exceptions import ShapeError


def child_seed(rng):
    return int(rng.integers(0, 2**63 - 1))


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def checksum(self):
        """SHA-256 over parameter names and raw bytes."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        """Copy arrays into parameters by name; every parameter must be present."""
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(name)
            if state[name].shape != p.data.shape:
                raise ShapeError(f"{name}: expected {p.data.shape}, got {state[name].shape}")
            p.data = state[name].copy()


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, std=0.02, zero=False):
        mode = "zeros" if zero else "normal"
        seed = child_seed(rng)
        self.weight = tensor_init((d_in, d_out), mode, seed=None if zero else seed, std=std, requires_grad=True)
        self.bias = tensor_init((d_out,), "zeros", requires_grad=True) if bias else None

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got {list(x.shape)}")
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gain = tensor_init((d,), "ones", requires_grad=True)
        self.bias = tensor_init((d,), "zeros", requires_grad=True)
        self._eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self._eps)
