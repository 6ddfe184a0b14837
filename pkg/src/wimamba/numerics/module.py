import numpy as np

from .tensor import Tensor, get_default_dtype, linear, parameter


class Module:
    """Parameter container: walks attributes for trainable tensors and sub-modules."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


def uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape).astype(get_default_dtype()))


def zeros(shape):
    return parameter(np.zeros(shape, dtype=get_default_dtype()))


def ones(shape):
    return parameter(np.ones(shape, dtype=get_default_dtype()))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero=False):
        self.weight = zeros((n_out, n_in)) if zero else uniform_fan_in(rng, (n_out, n_in), n_in)
        if bias:
            self.bias = zeros((n_out,)) if zero else uniform_fan_in(rng, (n_out,), n_in)
        else:
            self.bias = None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)
