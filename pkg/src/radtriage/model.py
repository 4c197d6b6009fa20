"""Encoder + head bundle with batched probability inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import RngStream, Tensor, no_grad
from .encoder import EncoderConfig, EncoderParams, encode, init_encoder_params, mean_pool
from .head import HeadConfig, HeadParams, head_forward, init_head_params


@dataclass
class Model:
    encoder_cfg: EncoderConfig
    head_cfg: HeadConfig
    encoder: EncoderParams
    head: HeadParams

    def named_parameters(self) -> dict[str, Tensor]:
        """Every tensor under its qualified name (``encoder.*`` then ``head.*``)."""
        out = {f"encoder.{k}": v for k, v in self.encoder.items()}
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def embed(self, images: Tensor, train: bool = False) -> Tensor:
        return mean_pool(encode(images, self.encoder, self.encoder_cfg, train))

    def forward(self, images: Tensor, train: bool = False, rng: RngStream | None = None) -> Tensor:
        return head_forward(self.embed(images, train), self.head, self.head_cfg, train, rng)

    def predict_proba(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Eval-mode probabilities for a stack of preprocessed images [B, 3, S, S]."""
        dtype = next(iter(self.encoder.values())).dtype
        out = []
        with no_grad():
            for chunk in _chunks(images, batch_size):
                out.append(self.forward(Tensor(np.asarray(chunk, dtype=dtype))).data)
        return np.concatenate(out) if out else np.zeros(0, dtype=dtype)


def _chunks(arr: np.ndarray, size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(arr), size):
        yield arr[start:start + size]


def init_model(encoder_cfg: EncoderConfig, seed: int, head_cfg: HeadConfig | None = None,
               dtype=np.float32) -> Model:
    if head_cfg is None:
        head_cfg = HeadConfig(in_dim=encoder_cfg.embed_dim)
    rng = RngStream(seed)
    encoder = init_encoder_params(encoder_cfg, rng.substream(0), dtype)
    head = init_head_params(head_cfg, rng.substream(1), dtype)
    return Model(encoder_cfg, head_cfg, encoder, head)
