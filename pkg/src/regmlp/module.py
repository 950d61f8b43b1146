"""Minimal parameter-container hierarchy for the learned blocks.

A ``Module`` owns named :class:`~regmlp.autodiff.Parameter` leaves and child
modules; parameter names are slash-free dotted paths, unique within a model,
and fix the layout of checkpoints.
"""

from __future__ import annotations

import numpy as np

from .autodiff import DTYPE, Parameter, Tensor, gelu, matmul


class Module:
    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, array):
        p = Parameter(np.asarray(array, dtype=DTYPE), name)
        self._params[name] = p
        return p

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """Affine map on the last axis: y = x @ W + b.

    `scale` overrides the default 1/sqrt(fan_in) init; `zero_init` makes the
    layer an exact zero map, the residual-safety convention used by every
    block's output projection.
    """

    def __init__(self, d_in, d_out, rng, zero_init=False, scale=None):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            s = (1.0 / np.sqrt(d_in)) if scale is None else scale
            w = rng.normal(0.0, s, size=(d_in, d_out))
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(d_out))

    def __call__(self, x):
        return matmul(x, self.w) + self.b


class ChannelMlp(Module):
    """Two-layer pointwise MLP with GELU; the output layer is zero-initialized
    so a fresh block contributes nothing past its residual connection."""

    def __init__(self, channels, hidden, rng):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(channels, hidden, rng))
        self.fc2 = self.child("fc2", Linear(hidden, channels, rng, zero_init=True))

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self.eps = eps

    def __call__(self, x):
        from .autodiff import layer_norm

        return layer_norm(x, self.gamma, self.beta, self.eps)


def parameter_names(module):
    names = [n for n, _ in module.named_parameters()]
    if len(names) != len(set(names)):
        raise ValueError("duplicate parameter names in model")
    return names
