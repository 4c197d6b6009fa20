"""Radiograph decoding and conversion into encoder-ready [3, S, S] arrays."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import RngStream
from .errors import InputError, ParameterError

logger = logging.getLogger(__name__)


@dataclass
class RawRadiograph:
    pixels: np.ndarray  # [H0, W0] in [0, 1]
    path: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise InputError(f"raw radiograph must be a non-empty 2-D array, got {self.pixels.shape}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise InputError("raw radiograph intensities must lie in [0, 1]")


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0


@dataclass(frozen=True)
class PreprocessConfig:
    image_size: int = 896
    mean: float = 0.5
    std: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.std <= 0:
            raise ParameterError(f"normalization std must be positive, got {self.std}")
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentConfig(**self.augment))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PreprocessedImage:
    tensor: np.ndarray  # [3, S, S]
    mean: float
    std: float


def load_png(path: str | Path) -> RawRadiograph:
    """Decode an 8- or 16-bit grayscale (or RGB) PNG into [0, 1] intensities."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                if im.mode != "L":
                    im = im.convert("L")
                arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc
    arr = np.clip(arr, 0.0, 1.0)
    raw = RawRadiograph(arr, str(path))
    if raw.pixels.size == 1 or not raw.pixels.any():
        logger.warning("degenerate radiograph %s (shape %s, max %.3g)", path, arr.shape, arr.max())
    return raw


def replicate_channels(img: RawRadiograph | np.ndarray) -> np.ndarray:
    pixels = img.pixels if isinstance(img, RawRadiograph) else np.asarray(img, dtype=np.float64)
    return np.repeat(pixels[None], 3, axis=0)


def _axis_weights(n_in: int, n_out: int):
    """Source indices and lerp weights for half-pixel-centred bilinear sampling."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, target: int) -> np.ndarray:
    """[C, H0, W0] → [C, S, S], align-corners-false convention with edge clamping."""
    if target < 1:
        raise ParameterError(f"target size must be >= 1, got {target}")
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    if (h, w) == (target, target):
        return img.copy()
    r0, r1, wr = _axis_weights(h, target)
    c0, c1, wc = _axis_weights(w, target)
    # lerp form a + t·(b − a) keeps constant regions exactly constant
    top, bot = img[:, r0, :], img[:, r1, :]
    rows = top + wr[None, :, None] * (bot - top)
    left, right = rows[:, :, c0], rows[:, :, c1]
    return left + wc[None, None, :] * (right - left)


def normalize(img: np.ndarray, mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    if std <= 0:
        raise ParameterError(f"normalization std must be positive, got {std}")
    return (np.asarray(img, dtype=np.float64) - mean) / std


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate each channel about the image centre; bilinear sampling, zero fill."""
    c, h, w = img.shape
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    sy = cos * dy - sin * dx + cy
    sx = sin * dy + cos * dx + cx
    # pad by one zero pixel so out-of-frame neighbours read as zero
    padded = np.zeros((c, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = img
    sy, sx = sy + 1, sx + 1
    inside = (sy >= 0) & (sy <= h + 1) & (sx >= 0) & (sx <= w + 1)
    sy = np.clip(sy, 0, h + 1)
    sx = np.clip(sx, 0, w + 1)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w)
    ty, tx = sy - y0, sx - x0
    a, b = padded[:, y0, x0], padded[:, y0, x0 + 1]
    cc, d = padded[:, y0 + 1, x0], padded[:, y0 + 1, x0 + 1]
    top = a + tx * (b - a)
    bot = cc + tx * (d - cc)
    return np.where(inside, top + ty * (bot - top), 0.0)


def draw_augmentation(cfg: AugmentConfig, rng: RngStream) -> tuple[bool, float]:
    flip = bool(rng.uniform() < cfg.flip_prob)
    angle = float(rng.uniform(low=-cfg.max_rotation_deg, high=cfg.max_rotation_deg))
    return flip, angle


def apply_augmentation(img: np.ndarray, flip: bool, angle: float) -> np.ndarray:
    out = hflip(img) if flip else img
    return rotate(out, angle) if angle != 0.0 else out.copy()


def augment(img: np.ndarray, cfg: AugmentConfig, rng: RngStream) -> np.ndarray:
    """Random horizontal flip and small rotation; a no-op when disabled."""
    if not cfg.enabled:
        return img
    flip, angle = draw_augmentation(cfg, rng)
    return apply_augmentation(img, flip, angle)


def preprocess(raw: RawRadiograph | np.ndarray, cfg: PreprocessConfig, train: bool = False,
               rng: RngStream | None = None) -> PreprocessedImage:
    """replicate → resize → (train-time augment) → normalize."""
    x = resize_bilinear(replicate_channels(raw), cfg.image_size)
    if train and cfg.augment.enabled:
        if rng is None:
            raise ParameterError("training-mode preprocessing needs an RngStream")
        x = augment(x, cfg.augment, rng)
    return PreprocessedImage(normalize(x, cfg.mean, cfg.std), cfg.mean, cfg.std)
