"""Small parameter containers built on `src.autodiff`."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ShapeError


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    """Parameters are registered explicitly; children are walked in insertion order."""

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, data: np.ndarray) -> Tensor:
        tensor = ad.parameter(data, name=name)
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield f"{prefix}{name}", tensor
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def parameter_dict(self, prefix: str = "") -> Dict[str, Tensor]:
        return dict(self.named_parameters(prefix))

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


class Linear(Module):
    """y = x @ W + b with W of shape (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True) -> None:
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.add_parameter("weight", xavier_uniform(rng, in_features, out_features))
        self.bias: Optional[Tensor] = self.add_parameter("bias", np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError("linear input width mismatch", x.shape, (self.in_features, self.out_features))
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.gamma = self.add_parameter("gamma", np.ones(width))
        self.beta = self.add_parameter("beta", np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """`depth` linear layers; hidden layers have width `hidden` and ReLU."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, depth: int = 1, hidden: Optional[int] = None) -> None:
        super().__init__()
        hidden = hidden or in_features
        widths: List[int] = [in_features] + [hidden] * (depth - 1) + [out_features]
        self.layers: List[Linear] = []
        for idx in range(depth):
            layer = Linear(widths[idx], widths[idx + 1], rng)
            self.add_child(f"fc{idx}", layer)
            self.layers.append(layer)

    def __call__(self, x: Tensor) -> Tensor:
        for idx, layer in enumerate(self.layers):
            x = layer(x)
            if idx < len(self.layers) - 1:
                x = ad.relu(x)
        return x
