"""Random training-time image augmentations.

Geometric transforms resample bilinearly about the image center and fill
out-of-frame pixels by edge replication.  ``augment`` draws one parameter set
per call and applies rotate -> shear -> aspect -> hsl -> flip.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import bilinear_sample


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max_deg: float = 0.0
    hsl_shift_max: float = 0.0
    shear_max: float = 0.0
    aspect_min: float = 1.0
    aspect_max: float = 1.0
    vflip_prob: float = 0.5
    flip_axis: str = "vertical"

    def __post_init__(self):
        for name in ("rotation_max_deg", "hsl_shift_max", "shear_max", "aspect_min", "aspect_max"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if not 0 < self.aspect_min <= self.aspect_max:
            raise ValueError(f"need 0 < aspect_min <= aspect_max, got {self.aspect_min}, {self.aspect_max}")
        if not 0.0 <= self.vflip_prob <= 1.0:
            raise ValueError(f"vflip_prob must be a probability, got {self.vflip_prob}")
        if self.shear_max >= 1.0:
            raise ValueError(f"shear_max must be < 1, got {self.shear_max}")
        if self.rotation_max_deg > 180:
            raise ValueError(f"rotation_max_deg must be <= 180, got {self.rotation_max_deg}")
        if self.flip_axis not in ("vertical", "horizontal"):
            raise ValueError(f"flip_axis must be 'vertical' or 'horizontal', got {self.flip_axis!r}")

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(vflip_prob=0.0)

    @classmethod
    def category(cls) -> "AugmentConfig":
        """Fine-tuning regime for the category model (rotation up to 3 degrees)."""
        return cls(rotation_max_deg=3.0, hsl_shift_max=6.0, shear_max=0.25,
                   aspect_min=0.875, aspect_max=1.125, vflip_prob=0.5)

    @classmethod
    def texture(cls) -> "AugmentConfig":
        """Fine-tuning regime for the texture model (rotation up to 8 degrees)."""
        return cls(rotation_max_deg=8.0, hsl_shift_max=6.0, shear_max=0.25,
                   aspect_min=0.875, aspect_max=1.125, vflip_prob=0.5)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentConfig":
        return cls(**data)


@dataclass(frozen=True)
class AugmentParams:
    angle: float
    dh: float
    ds: float
    dl: float
    shear: float
    aspect: float
    flip: bool


def _center_grid(h: int, w: int):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return yy - cy, xx - cx, cy, cx


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate counter-clockwise by ``angle`` degrees about the image center."""
    if abs(angle) > 180:
        raise ValueError(f"|angle| must be <= 180, got {angle}")
    if angle == 0:
        return image.copy()
    h, w = image.shape[:2]
    dy, dx, cy, cx = _center_grid(h, w)
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    # Inverse map: output (y, x) pulls from the input rotated back by -angle.
    src_x = c * dx - s * dy + cx
    src_y = s * dx + c * dy + cy
    return np.clip(bilinear_sample(image, src_y, src_x), 0.0, 1.0)


def shear(image: np.ndarray, factor: float) -> np.ndarray:
    """Horizontal shear ``x' = x + factor * (y - cy)``."""
    if abs(factor) >= 1:
        raise ValueError(f"|factor| must be < 1, got {factor}")
    if factor == 0:
        return image.copy()
    h, w = image.shape[:2]
    dy, dx, cy, cx = _center_grid(h, w)
    src_x = dx - factor * dy + cx
    src_y = dy + cy
    return np.clip(bilinear_sample(image, src_y, src_x), 0.0, 1.0)


def aspect_jitter(image: np.ndarray, factor: float) -> np.ndarray:
    """Scale the width by ``factor`` about the center, then crop or edge-pad back to ``W``."""
    if factor <= 0:
        raise ValueError(f"factor must be > 0, got {factor}")
    if factor == 1:
        return image.copy()
    h, w = image.shape[:2]
    dy, dx, cy, cx = _center_grid(h, w)
    src_x = dx / factor + cx
    src_y = dy + cy
    return np.clip(bilinear_sample(image, src_y, src_x), 0.0, 1.0)


def vflip(image: np.ndarray) -> np.ndarray:
    return image[::-1].copy()


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


# --------------------------------------------------------------------------
# HSL
# --------------------------------------------------------------------------


def rgb_to_hsl(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> (hue in degrees [0, 360), saturation, lightness)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    light = (maxc + minc) / 2.0
    delta = maxc - minc
    chromatic = delta > 0
    safe_delta = np.where(chromatic, delta, 1.0)
    denom = np.where(light <= 0.5, maxc + minc, 2.0 - maxc - minc)
    sat = np.where(chromatic, delta / np.where(denom > 0, denom, 1.0), 0.0)

    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    hue = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(chromatic, (hue / 6.0) % 1.0, 0.0) * 360.0
    return np.stack([hue, sat, light], axis=-1)


def hsl_to_rgb(hsl: np.ndarray) -> np.ndarray:
    hsl = np.asarray(hsl, dtype=np.float64)
    h = (hsl[..., 0] % 360.0) / 360.0
    s, l = hsl[..., 1], hsl[..., 2]
    m2 = np.where(l <= 0.5, l * (1.0 + s), l + s - l * s)
    m1 = 2.0 * l - m2

    def channel(hue):
        hue = hue % 1.0
        return np.where(hue < 1 / 6, m1 + (m2 - m1) * hue * 6.0,
               np.where(hue < 0.5, m2,
               np.where(hue < 2 / 3, m1 + (m2 - m1) * (2 / 3 - hue) * 6.0, m1)))

    rgb = np.stack([channel(h + 1 / 3), channel(h), channel(h - 1 / 3)], axis=-1)
    grey = (s == 0)[..., None]
    return np.where(grey, l[..., None], rgb)


def hsl_shift(image: np.ndarray, dh: float, ds: float, dl: float) -> np.ndarray:
    """Shift hue by ``dh`` degrees (wrapping), saturation and lightness by fractions."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"hsl_shift needs a 3-channel image, got shape {image.shape}")
    if dh == 0 and ds == 0 and dl == 0:
        return image.copy()
    hsl = rgb_to_hsl(image)
    hsl[..., 0] = (hsl[..., 0] + dh) % 360.0
    hsl[..., 1] = np.clip(hsl[..., 1] + ds, 0.0, 1.0)
    hsl[..., 2] = np.clip(hsl[..., 2] + dl, 0.0, 1.0)
    return np.clip(hsl_to_rgb(hsl), 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# random pipeline
# --------------------------------------------------------------------------


def sample_params(config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    """Draw one parameter set; the draw order is fixed so streams stay reproducible."""
    angle = rng.uniform(-config.rotation_max_deg, config.rotation_max_deg)
    dh = rng.uniform(-config.hsl_shift_max, config.hsl_shift_max)
    ds = rng.uniform(-config.hsl_shift_max, config.hsl_shift_max) / 100.0
    dl = rng.uniform(-config.hsl_shift_max, config.hsl_shift_max) / 100.0
    sh = rng.uniform(-config.shear_max, config.shear_max)
    aspect = rng.uniform(config.aspect_min, config.aspect_max)
    flip = bool(rng.random() < config.vflip_prob)
    return AugmentParams(angle, dh, ds, dl, sh, aspect, flip)


def apply_params(image: np.ndarray, params: AugmentParams, flip_axis: str = "vertical") -> np.ndarray:
    out = rotate(image, params.angle)
    out = shear(out, params.shear)
    out = aspect_jitter(out, params.aspect)
    if out.shape[2] == 3:
        out = hsl_shift(out, params.dh, params.ds, params.dl)
    if params.flip:
        out = vflip(out) if flip_axis == "vertical" else hflip(out)
    return out.astype(np.float32, copy=False)


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return apply_params(image, sample_params(config, rng), config.flip_axis)


def augment_batch(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, config, rng) for img in images])


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``, e.g. one per epoch."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))
