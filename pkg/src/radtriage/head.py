"""Three-layer MLP mapping a pooled embedding to an abnormality probability."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .errors import ConfigurationError

PROB_EPS = 1e-7

HeadParams = Dict[str, Tensor]


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 1152
    hidden: tuple[int, int] = (512, 128)
    dropout: tuple[float, float] = (0.30, 0.20)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "dropout", tuple(float(p) for p in self.dropout))
        if len(self.hidden) != 2 or len(self.dropout) != 2:
            raise ConfigurationError("head needs exactly two hidden widths and two dropout rates")
        if self.in_dim < 1 or min(self.hidden) < 1:
            raise ConfigurationError("head widths must be positive")
        if not all(0 <= p < 1 for p in self.dropout):
            raise ConfigurationError(f"dropout rates must lie in [0, 1): {self.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["dropout"] = list(self.dropout)
        return d


def head_shapes(cfg: HeadConfig) -> dict[str, tuple[int, ...]]:
    h1, h2 = cfg.hidden
    return {
        "l1.weight": (h1, cfg.in_dim),
        "l1.bias": (h1,),
        "l2.weight": (h2, h1),
        "l2.bias": (h2,),
        "l3.weight": (1, h2),
        "l3.bias": (1,),
    }


def init_head_params(cfg: HeadConfig, rng: RngStream, dtype=np.float32) -> HeadParams:
    """Fan-in uniform init, U(±1/sqrt(fan_in)), for weights and biases alike."""
    shapes = head_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        fan_in = shapes[name.replace("bias", "weight")][1]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(shape, -bound, bound).astype(dtype), name=name)
    return params


def head_logit(z: Tensor, params: HeadParams, cfg: HeadConfig, train: bool = False,
               rng: RngStream | None = None) -> Tensor:
    if z.shape[-1] != cfg.in_dim:
        raise ConfigurationError(f"embedding width {z.shape[-1]} != head input {cfg.in_dim}")
    x = ad.relu(ad.linear(z, params["l1.weight"], params["l1.bias"]))
    x = ad.dropout(x, cfg.dropout[0], train, rng)
    x = ad.relu(ad.linear(x, params["l2.weight"], params["l2.bias"]))
    x = ad.dropout(x, cfg.dropout[1], train, rng)
    logit = ad.linear(x, params["l3.weight"], params["l3.bias"])
    return ad.reshape(logit, logit.shape[:-1])


def head_forward(z: Tensor, params: HeadParams, cfg: HeadConfig, train: bool = False,
                 rng: RngStream | None = None) -> Tensor:
    """Probability per embedding (shape ``z.shape[:-1]``), kept strictly inside (0, 1)."""
    p = ad.sigmoid(head_logit(z, params, cfg, train, rng))
    return ad.clip(p, PROB_EPS, 1 - PROB_EPS)


bce_loss = ad.bce_loss
