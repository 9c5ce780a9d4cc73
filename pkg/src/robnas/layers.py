"""Parameterized layers and small reference models built on the tensor core."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["Module", "Conv2d", "BatchNorm2d", "Linear", "LinearModel", "MLP"]


class Module:
    """Named-parameter container; subclasses register via _params/_children."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name, tensor):
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def parameters(self, prefix=""):
        """Trainable (name, Tensor) pairs in deterministic order."""
        out = []
        for name, p in self._params.items():
            out.append((prefix + name, p))
        for name, child in self._children.items():
            out.extend(child.parameters(prefix + name + "."))
        return out

    def buffers(self, prefix=""):
        """Non-trainable state (running statistics), for checkpointing."""
        out = []
        for name, child in self._children.items():
            out.extend(child.buffers(prefix + name + "."))
        return out

    def state_arrays(self):
        arrays = {name: p for name, p in self.parameters()}
        arrays.update({name: b for name, b in self.buffers()})
        return arrays

    def load_state_arrays(self, arrays):
        own = dict(self.parameters()) | dict(self.buffers())
        missing = set(own) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:4]} ...")
        for name, t in own.items():
            src = np.asarray(arrays[name])
            if tuple(src.shape) != t.shape:
                raise ValueError(f"shape mismatch for '{name}': {src.shape} vs {t.shape}")
            t.data[...] = src.astype(t.data.dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1,
                 groups=1, bias=False):
        super().__init__()
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        fan_in = (cin // groups) * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(cout, cin // groups, kernel, kernel))
        self.weight = self.add_param("weight", Tensor(w))
        self.bias = None
        if bias:
            self.bias = self.add_param("bias", Tensor(np.zeros(cout)))

    def __call__(self, x, training=False):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding,
                        self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = self.add_param("gamma", Tensor(np.ones(channels)))
        self.beta = self.add_param("beta", Tensor(np.zeros(channels)))
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def buffers(self, prefix=""):
        return [(prefix + "running_mean", self.running_mean),
                (prefix + "running_var", self.running_var)]

    def __call__(self, x, training=False):
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, self.eps, training, self.momentum)

    def affine_constants(self):
        """Inference-mode scale/shift: y = scale * x + shift (per channel)."""
        inv = 1.0 / np.sqrt(self.running_var.data + self.eps)
        scale = self.gamma.data * inv
        shift = self.beta.data - self.gamma.data * self.running_mean.data * inv
        return scale, shift


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True):
        super().__init__()
        std = np.sqrt(1.0 / din)
        self.weight = self.add_param("weight", Tensor(rng.normal(0.0, std, size=(dout, din))))
        self.bias = None
        if bias:
            self.bias = self.add_param("bias", Tensor(np.zeros(dout)))

    def __call__(self, x, training=False):
        y = T.matmul(x, T.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (1, self.weight.shape[0])))
        return y


class LinearModel(Module):
    """Flatten then a single affine map; logits are exactly linear in the input."""

    def __init__(self, in_shape, classes, rng, bias=True):
        super().__init__()
        self.in_shape = tuple(in_shape)
        self.classes = classes
        din = int(np.prod(in_shape))
        self.fc = self.add_child("fc", Linear(din, classes, rng, bias=bias))

    def forward(self, x, training=False):
        n = x.shape[0]
        return self.fc(T.reshape(x, (n, int(np.prod(self.in_shape)))))

    def __call__(self, x, training=False):
        return self.forward(x, training)


class MLP(Module):
    """Flatten -> affine -> ReLU -> affine; the smallest nonlinear test model."""

    def __init__(self, in_shape, hidden, classes, rng):
        super().__init__()
        self.in_shape = tuple(in_shape)
        self.classes = classes
        din = int(np.prod(in_shape))
        self.fc1 = self.add_child("fc1", Linear(din, hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(hidden, classes, rng))

    def forward(self, x, training=False):
        n = x.shape[0]
        h = T.relu(self.fc1(T.reshape(x, (n, int(np.prod(self.in_shape))))))
        return self.fc2(h)

    def __call__(self, x, training=False):
        return self.forward(x, training)
