"""Parameter containers and the handful of layers the models are built from."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor


class Module:
    """Collects ``Param`` attributes, child modules and numpy buffers by name.

    Attribute insertion order fixes the traversal order, which keeps
    checkpoints and optimizer state deterministic.
    """

    _buffers: tuple[str, ...] = ()

    def named_params(self, prefix: str = "") -> dict[str, Param]:
        out: dict[str, Param] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_params(name + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.update(m.named_params(f"{name}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}{b}": getattr(self, b) for b in self._buffers}
        for key, val in vars(self).items():
            if isinstance(val, Module):
                out.update(val.named_buffers(f"{prefix}{key}."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.update(m.named_buffers(f"{prefix}{key}.{i}."))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: p.value for k, p in self.named_params().items()}
        arrays.update(self.named_buffers())
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.named_params().items():
            src = arrays[prefix + k]
            if src.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {p.value.shape}")
            p.value[...] = src
        self._load_buffers(arrays, prefix)

    def _load_buffers(self, arrays, prefix):
        for b in self._buffers:
            getattr(self, b)[...] = arrays[prefix + b]
        for key, val in vars(self).items():
            if isinstance(val, Module):
                val._load_buffers(arrays, f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    m._load_buffers(arrays, f"{prefix}{key}.{i}.")

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.named_params().values():
            p.requires_grad = flag


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init: str = "he",
                 name: str = "linear"):
        if init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            gain = 2.0 if init == "he" else 1.0
            w = rng.normal(0.0, np.sqrt(gain / n_in), size=(n_in, n_out))
        self.W = Param(w, f"{name}.W")
        self.b = Param(np.zeros(n_out), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.W, self.b)


def linear_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.shape[1] != W.shape[0]:
        raise ValueError(f"linear: input has {x.shape[1]} columns, weight expects {W.shape[0]}")
    return ad.matmul(x, W) + b


class MLP(Module):
    """ReLU MLP; no activation after the last layer."""

    def __init__(self, dims: list[int], rng: np.random.Generator, zero_last: bool = False,
                 name: str = "mlp"):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng,
                   init="zeros" if (zero_last and i == len(dims) - 2) else "he",
                   name=f"{name}.{i}")
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class BatchNorm(Module):
    """Feature-wise batch normalisation.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(np.ones(dim), f"{name}.gamma")
        self.beta = Param(np.zeros(dim), f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm_forward(x, self, train)


def batchnorm_forward(x: Tensor, st: BatchNorm, train: bool) -> Tensor:
    if x.shape[1] != st.dim:
        raise ValueError(f"batchnorm: expected {st.dim} columns, got {x.shape[1]}")
    if not train:
        return ad.batchnorm_infer(x, st.gamma, st.beta, st.running_mean, st.running_var, st.eps)
    if x.shape[0] < 2:
        raise ValueError("batchnorm in train mode needs at least 2 rows")
    out, mu, var = ad.batchnorm_train(x, st.gamma, st.beta, st.eps)
    m = st.momentum
    st.running_mean[...] = m * st.running_mean + (1.0 - m) * mu
    st.running_var[...] = m * st.running_var + (1.0 - m) * var
    return out


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.1,
                 name: str = "emb"):
        self.table = Param(rng.normal(0.0, std, size=(n, dim)), f"{name}.table")

    def __call__(self, idx) -> Tensor:
        return ad.take_rows(self.table, idx)
