"""Run configuration: JSON file with encoder/train/preprocess blocks, overridable from flags."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataset import SplitSpec
from .encoder import PRESETS, EncoderConfig
from .errors import ConfigurationError
from .head import HeadConfig
from .preprocess import AugmentConfig, PreprocessConfig
from .training import TrainConfig

_TOP_KEYS = {"preset", "encoder", "head", "train", "preprocess", "data", "out"}


@dataclass(frozen=True)
class RunConfig:
    preset: str | None = "tiny"
    encoder: EncoderConfig = field(default_factory=lambda: PRESETS["tiny"])
    head: HeadConfig = field(default_factory=lambda: HeadConfig(in_dim=PRESETS["tiny"].embed_dim))
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(
        default_factory=lambda: PreprocessConfig(image_size=PRESETS["tiny"].image_size))
    data_root: str | None = None
    split: SplitSpec = field(default_factory=SplitSpec)
    out_dir: str = "runs/latest"

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "encoder": self.encoder.to_dict(),
            "head": self.head.to_dict(),
            "train": self.train.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "data": {"root": self.data_root,
                     "split": {"fractions": list(self.split.fractions), "seed": self.split.seed}},
            "out": self.out_dir,
        }

    def validate(self, require_data: bool = True) -> "RunConfig":
        if self.train.unfreeze_k > self.encoder.num_layers:
            raise ConfigurationError(
                f"train.unfreeze_k: {self.train.unfreeze_k} exceeds encoder.num_layers "
                f"{self.encoder.num_layers}")
        if require_data:
            if not self.data_root:
                raise ConfigurationError("data.root: no dataset root given")
            if not Path(self.data_root).is_dir():
                raise ConfigurationError(f"data.root: {self.data_root} does not exist")
        return self


def _build(cls, block: str, values: dict, base=None):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"{block}: unknown field(s) {', '.join(sorted(unknown))}")
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{block}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{block}: {exc}") from exc


def from_dict(d: dict) -> RunConfig:
    """Build a RunConfig; an explicit ``encoder`` block overrides fields of the preset."""
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s) {', '.join(sorted(unknown))}")
    preset = d.get("preset", "tiny")
    if preset is not None and preset not in PRESETS:
        raise ConfigurationError(f"preset: expected one of {sorted(PRESETS)}, got {preset!r}")
    base_enc = PRESETS[preset] if preset else EncoderConfig()
    encoder = _build(EncoderConfig, "encoder", d.get("encoder") or {}, base_enc)

    head_vals = dict(d.get("head") or {})
    head_vals.setdefault("in_dim", encoder.embed_dim)
    head = _build(HeadConfig, "head", head_vals)
    if head.in_dim != encoder.embed_dim:
        raise ConfigurationError(f"head.in_dim: {head.in_dim} != encoder.embed_dim {encoder.embed_dim}")

    train = _build(TrainConfig, "train", d.get("train") or {})

    pre_vals = dict(d.get("preprocess") or {})
    if "augment" in pre_vals and isinstance(pre_vals["augment"], dict):
        pre_vals["augment"] = _build(AugmentConfig, "preprocess.augment", pre_vals["augment"])
    pre_vals.setdefault("image_size", encoder.image_size)
    preprocess = _build(PreprocessConfig, "preprocess", pre_vals)
    if preprocess.image_size != encoder.image_size:
        raise ConfigurationError(
            f"preprocess.image_size: {preprocess.image_size} != encoder.image_size {encoder.image_size}")

    data = d.get("data") or {}
    unknown = set(data) - {"root", "split"}
    if unknown:
        raise ConfigurationError(f"data: unknown field(s) {', '.join(sorted(unknown))}")
    split_vals = dict(data.get("split") or {})
    if "fractions" in split_vals:
        split_vals["fractions"] = tuple(split_vals["fractions"])
    try:
        split = _build(SplitSpec, "data.split", split_vals)
    except ValueError as exc:
        raise ConfigurationError(f"data.split: {exc}") from exc
    return RunConfig(preset, encoder, head, train, preprocess, data.get("root"), split,
                     d.get("out", "runs/latest"))


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path) as fh:
            return from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read config ({exc})") from exc


def merge(d: dict, overrides: dict) -> dict:
    """Recursive dict update where ``overrides`` wins; None values are ignored."""
    out = dict(d)
    for k, v in overrides.items():
        if v is None:
            continue
        if isinstance(v, dict):
            out[k] = merge(out.get(k) or {}, v)
        else:
            out[k] = v
    return out
