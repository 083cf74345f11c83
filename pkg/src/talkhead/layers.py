"""Parameter containers shared by the speech encoder and the MDN regressor."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Owns named parameter tensors; sub-modules are flattened with dotted names.

    ``buffers`` holds fixed arrays (normalisation statistics, templates) that
    travel with the parameters in checkpoints but are never optimised.
    """

    buffers: dict[str, np.ndarray]

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update({f"{key}.{k}": v for k, v in val.parameters().items()})
            elif isinstance(val, dict):
                for sub, mod in val.items():
                    if isinstance(mod, Module):
                        out.update({f"{key}.{sub}.{k}": v for k, v in mod.parameters().items()})
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.parameters().items()}
        for k, v in getattr(self, "buffers", {}).items():
            state[f"buffer.{k}"] = np.array(v, dtype=np.float64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        if hasattr(self, "buffers"):
            self.buffers = {k[len("buffer."):]: np.array(v) for k, v in state.items() if k.startswith("buffer.")}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False):
        self.W = zeros(n_in, n_out) if zero else glorot(rng, n_in, n_out)
        self.b = zeros(n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.W, self.b)


class Perceptron(Module):
    """Dense layers with tanh between them (none after the last)."""

    def __init__(self, rng: np.random.Generator, sizes: list[int], zero_last: bool = False):
        self.layers = {str(i): Linear(rng, a, b, zero=zero_last and i == len(sizes) - 2)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))}

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i in range(n):
            x = self.layers[str(i)](x)
            if i < n - 1:
                x = ad.tanh(x)
        return x


class GRUCell(Module):
    """Standard GRU; gate blocks packed as [update | reset | candidate].

    z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
    n = tanh(x Wn + bn + r * (h Un)), h' = (1 - z) * n + z * h
    """

    def __init__(self, rng: np.random.Generator, n_in: int, hidden: int):
        self.hidden = hidden
        self.W = Tensor(np.concatenate([glorot(rng, n_in, hidden).data for _ in range(3)], axis=1),
                        requires_grad=True)
        self.U = Tensor(np.concatenate([glorot(rng, hidden, hidden).data for _ in range(3)], axis=1),
                        requires_grad=True)
        self.b = zeros(3 * hidden)

    def input_projection(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.W, self.b)

    def step(self, xw: Tensor, h: Tensor) -> Tensor:
        """One update given the precomputed input projection ``xw`` (B x 3H)."""
        return ad.gru_step(xw, h, self.U)
