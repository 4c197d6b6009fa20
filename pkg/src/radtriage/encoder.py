"""SigLIP-style vision tower: strided patch stem, learned positions, pre-norm blocks, mean pooling."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .errors import CapacityError, ConfigurationError, DimensionError

LN_EPS = 1e-6

EncoderParams = Dict[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 896
    patch_size: int = 14
    embed_dim: int = 1152
    num_layers: int = 27
    num_heads: int = 16
    ffn_hidden: int = 4304
    max_positions: int = 4096

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < (0 if name == "num_layers" else 1):
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.num_tokens > self.max_positions:
            raise ConfigurationError(
                f"{self.num_tokens} tokens exceed max_positions {self.max_positions}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)


FULL_PRESET = EncoderConfig()
TINY_PRESET = EncoderConfig(
    image_size=56,
    patch_size=14,
    embed_dim=48,
    num_layers=4,
    num_heads=4,
    ffn_hidden=180,
    max_positions=64,
)
PRESETS = {"paper": FULL_PRESET, "tiny": TINY_PRESET}


def layer_shapes(cfg: EncoderConfig, i: int) -> dict[str, tuple[int, ...]]:
    d, f = cfg.embed_dim, cfg.ffn_hidden
    p = f"layers.{i}."
    shapes = {p + "ln1.gamma": (d,), p + "ln1.beta": (d,)}
    for proj in ("q", "k", "v", "o"):
        shapes[p + f"attn.{proj}_w"] = (d, d)
        shapes[p + f"attn.{proj}_b"] = (d,)
    shapes.update({
        p + "ln2.gamma": (d,),
        p + "ln2.beta": (d,),
        p + "ffn.in_w": (f, d),
        p + "ffn.in_b": (f,),
        p + "ffn.out_w": (d, f),
        p + "ffn.out_b": (d,),
    })
    return shapes


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Every encoder parameter name and shape, in canonical order, without allocating."""
    d = cfg.embed_dim
    shapes = {
        "patch_proj.weight": (d, cfg.patch_dim),
        "patch_proj.bias": (d,),
        "pos_table": (cfg.max_positions, d),
    }
    for i in range(cfg.num_layers):
        shapes.update(layer_shapes(cfg, i))
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    return shapes


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count."""
    d, f, L = cfg.embed_dim, cfg.ffn_hidden, cfg.num_layers
    stem = d * cfg.patch_dim + d + cfg.max_positions * d
    per_layer = 4 * d + 4 * (d * d + d) + (f * d + f) + (d * f + d)
    return stem + L * per_layer + 2 * d


def _init_tensor(name: str, shape, rng: RngStream, dtype) -> Tensor:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        data = np.ones(shape)
    elif leaf == "beta" or leaf == "bias" or leaf.endswith("_b"):
        data = np.zeros(shape)
    else:
        data = rng.truncated_normal(shape, std=0.02)
    return Tensor(data.astype(dtype), name=name)


def init_layer_params(cfg: EncoderConfig, i: int, rng: RngStream, dtype=np.float32) -> EncoderParams:
    return {n: _init_tensor(n, s, rng, dtype) for n, s in layer_shapes(cfg, i).items()}


def init_encoder_params(cfg: EncoderConfig, rng: RngStream, dtype=np.float32) -> EncoderParams:
    """Truncated-normal (std 0.02) weights, zero biases, unit LN gains."""
    return {n: _init_tensor(n, s, rng, dtype) for n, s in param_shapes(cfg).items()}


def layer_view(params: EncoderParams, i: int) -> dict[str, Tensor]:
    """Parameters of block ``i`` keyed by their short names (``ln1.gamma``, ``attn.q_w`` ...)."""
    prefix = f"layers.{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def patchify(image: Tensor, patch: int) -> Tensor:
    """[..., 3, H, W] → [..., N, 3·P·P]; patches row-major, each flattened channel/row/column."""
    *lead, c, h, w = image.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    k = len(lead)
    x = ad.reshape(image, (*lead, c, gh, patch, gw, patch))
    x = ad.transpose(x, (*range(k), k + 1, k + 3, k, k + 2, k + 4))
    return ad.reshape(x, (*lead, gh * gw, c * patch * patch))


def patchify_project(image: Tensor, params: EncoderParams, cfg: EncoderConfig) -> Tensor:
    if image.ndim < 3 or image.shape[-3] != 3:
        raise DimensionError(f"expected [..., 3, H, W] image, got {image.shape}")
    if image.shape[-2:] != (cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"image is {image.shape[-2]}x{image.shape[-1]}, config expects {cfg.image_size}"
        )
    patches = patchify(image, cfg.patch_size)
    return ad.linear(patches, params["patch_proj.weight"], params["patch_proj.bias"])


def add_positional(tokens: Tensor, params: EncoderParams, cfg: EncoderConfig) -> Tensor:
    n = tokens.shape[-2]
    if n > cfg.max_positions:
        raise CapacityError(f"{n} tokens exceed the {cfg.max_positions}-row positional table")
    return ad.add(tokens, ad.take_rows(params["pos_table"], n))


def encoder_layer_forward(tokens: Tensor, layer: dict[str, Tensor], num_heads: int) -> Tensor:
    """Pre-norm block: u = x + attn(ln1(x)); out = u + ffn(ln2(u))."""
    h = ad.layer_norm(tokens, layer["ln1.gamma"], layer["ln1.beta"], LN_EPS)
    attn = {k.split(".", 1)[1]: v for k, v in layer.items() if k.startswith("attn.")}
    u = ad.add(tokens, ad.multi_head_attention(h, attn, num_heads))
    h = ad.layer_norm(u, layer["ln2.gamma"], layer["ln2.beta"], LN_EPS)
    h = ad.gelu_tanh(ad.linear(h, layer["ffn.in_w"], layer["ffn.in_b"]))
    return ad.add(u, ad.linear(h, layer["ffn.out_w"], layer["ffn.out_b"]))


def encode(image: Tensor, params: EncoderParams, cfg: EncoderConfig, train: bool = False) -> Tensor:
    """Image(s) [..., 3, S, S] → normalized token sequence [..., N, D].

    The tower has no stochastic layers, so ``train`` only exists for symmetry
    with the head.
    """
    x = add_positional(patchify_project(image, params, cfg), params, cfg)
    for i in range(cfg.num_layers):
        x = encoder_layer_forward(x, layer_view(params, i), cfg.num_heads)
    return ad.layer_norm(x, params["final_ln.gamma"], params["final_ln.beta"], LN_EPS)


def mean_pool(tokens: Tensor) -> Tensor:
    if tokens.ndim < 2 or tokens.shape[-2] == 0:
        raise DimensionError("mean_pool needs at least one token")
    return ad.mean(tokens, axis=-2)


def shape_audit(cfg: EncoderConfig) -> list[str]:
    """Human-readable parameter table for ``cfg``; builds one block to confirm shapes."""
    shapes = param_shapes(cfg)
    block = init_layer_params(cfg, 0, RngStream(0), dtype=np.float32)
    for name, t in block.items():
        if t.shape != shapes[name]:
            raise ConfigurationError(f"{name}: built {t.shape}, expected {shapes[name]}")
    del block
    lines = [f"{name:<28} {list(shape)}" for name, shape in shapes.items()]
    lines.append(f"tokens per image            {cfg.num_tokens} ({cfg.grid}x{cfg.grid})")
    lines.append(f"encoder parameters          {param_count(cfg)}")
    return lines
