"""Per-slice data augmentation.

Each sampled slice is augmented independently so that the model cannot
tell slices of one volume apart by study- or patient-level cues.  All
transforms draw their randomness from an explicit numpy Generator; with
the same seed the output is bit-identical.

Transforms run in a fixed order: noise, blur, shift/scale/rotate, flip,
transpose, contrast, brightness, circular frame.  Geometry precedes the
frame so the mask stays circular; noise comes first so blur acts on it.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

BACKGROUND_VALUE = -1.0  # air after HU rescaling


@dataclass
class AugmentationConfig:
    noise_prob: float = 0.5
    noise_std_min: float = 0.0
    noise_std_max: float = 0.04          # 0.04 of the value range ~ 50 HU
    blur_prob: float = 0.5
    blur_kernel_min: int = 3
    blur_kernel_max: int = 7
    blur_sigma_limit: float = 0.5
    ssr_prob: float = 0.5
    shift_limit: float = 0.0
    scale_limit: float = 0.2
    rotate_limit_deg: float = 10.0
    flip_prob: float = 0.5
    transpose_prob: float = 0.5
    contrast_prob: float = 0.5
    contrast_delta: float = 0.2
    brightness_prob: float = 0.5
    brightness_limit: float = 0.08       # additive, non-negative, ~ up to 100 HU
    frame_prob: float = 0.25
    frame_diameter: float = 0.75         # fraction of image width

    def validate(self):
        probs = [self.noise_prob, self.blur_prob, self.ssr_prob, self.flip_prob,
                 self.transpose_prob, self.contrast_prob, self.brightness_prob, self.frame_prob]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("augmentation probabilities must lie in [0, 1]")
        if not 0.0 <= self.noise_std_min <= self.noise_std_max:
            raise ConfigError("need 0 <= noise_std_min <= noise_std_max")
        if self.blur_kernel_min < 3 or self.blur_kernel_max < self.blur_kernel_min:
            raise ConfigError("blur kernel range must satisfy 3 <= min <= max")

    @classmethod
    def identity(cls):
        """All probabilities zero: augment_slice returns its input."""
        return cls(noise_prob=0.0, blur_prob=0.0, ssr_prob=0.0, flip_prob=0.0,
                   transpose_prob=0.0, contrast_prob=0.0, brightness_prob=0.0, frame_prob=0.0)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# --- transform primitives -------------------------------------------------

def add_gaussian_noise(img, std, rng):
    return img + rng.normal(0.0, std, size=img.shape)


def gaussian_blur(img, kernel_size, sigma):
    """Separable Gaussian blur with a truncated, renormalized kernel."""
    radius = kernel_size // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = ndimage.correlate1d(img.astype(np.float64), kernel, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="reflect")
    return out


def shift_scale_rotate(img, angle_deg, scale, shift_frac=(0.0, 0.0)):
    """Rotate about the image center, scale, and translate (reflect border)."""
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    mat = np.array([[c, -s], [s, c]]) / scale
    center = (np.asarray(img.shape, dtype=np.float64) - 1.0) / 2.0
    shift = np.asarray(shift_frac, dtype=np.float64) * np.asarray(img.shape)
    offset = center - mat @ (center + shift)
    return ndimage.affine_transform(img.astype(np.float64), mat, offset=offset, order=1, mode="reflect")


def flip(img, mode):
    """mode: 'horizontal' (left-right), 'vertical' (up-down) or 'both'."""
    if mode == "horizontal":
        return img[:, ::-1]
    if mode == "vertical":
        return img[::-1, :]
    if mode == "both":
        return img[::-1, ::-1]
    raise ValueError(f"unknown flip mode {mode!r}")


def transpose(img):
    return img.T


def adjust_contrast(img, factor):
    return np.clip(img * factor, -1.0, 1.0)


def adjust_brightness(img, shift):
    return np.clip(img + shift, -1.0, 1.0)


def circular_frame_mask(shape, diameter_frac):
    """Boolean mask, True outside the centered circle."""
    h, w = shape
    radius = 0.5 * diameter_frac * w
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 > radius**2


def add_circular_frame(img, diameter_frac):
    """Blank everything outside a centered circle to the background value."""
    out = img.copy()
    out[circular_frame_mask(img.shape, diameter_frac)] = BACKGROUND_VALUE
    return out


# --- composed pipeline ----------------------------------------------------

_FLIP_MODES = ("horizontal", "vertical", "both")


def augment_slice(slice_, cfg: AugmentationConfig, rng: np.random.Generator):
    """Apply the configured augmentations to one slice.

    Input values are expected in [-1, 1]; the output is clipped back to
    that range.  With all probabilities zero the input is returned as an
    unmodified copy.
    """
    img = np.asarray(slice_, dtype=np.float32)
    if not np.isfinite(img).all():
        raise ValueError("augment_slice requires finite input")

    applied = False
    out = img.astype(np.float64)

    if rng.uniform() < cfg.noise_prob:
        std = rng.uniform(cfg.noise_std_min, cfg.noise_std_max)
        out = add_gaussian_noise(out, std, rng)
        applied = True

    if rng.uniform() < cfg.blur_prob:
        ksizes = np.arange(cfg.blur_kernel_min | 1, cfg.blur_kernel_max + 1, 2)
        ksize = int(rng.choice(ksizes))
        sigma = cfg.blur_sigma_limit * (1.0 - rng.uniform())  # in (0, limit]
        out = gaussian_blur(out, ksize, sigma)
        applied = True

    if rng.uniform() < cfg.ssr_prob:
        angle = rng.uniform(-cfg.rotate_limit_deg, cfg.rotate_limit_deg)
        scale = rng.uniform(1.0 - cfg.scale_limit, 1.0 + cfg.scale_limit)
        shift = (rng.uniform(-cfg.shift_limit, cfg.shift_limit),
                 rng.uniform(-cfg.shift_limit, cfg.shift_limit))
        out = shift_scale_rotate(out, angle, scale, shift)
        applied = True

    if rng.uniform() < cfg.flip_prob:
        out = flip(out, _FLIP_MODES[rng.integers(len(_FLIP_MODES))])
        applied = True

    if rng.uniform() < cfg.transpose_prob:
        out = transpose(out)
        applied = True

    if rng.uniform() < cfg.contrast_prob:
        factor = rng.uniform(1.0 - cfg.contrast_delta, 1.0 + cfg.contrast_delta)
        out = adjust_contrast(out, factor)
        applied = True

    if rng.uniform() < cfg.brightness_prob:
        shift = rng.uniform(0.0, cfg.brightness_limit)
        out = adjust_brightness(out, shift)
        applied = True

    if rng.uniform() < cfg.frame_prob:
        out = add_circular_frame(out, cfg.frame_diameter)
        applied = True

    if not applied:
        return img.copy()
    return np.clip(out, -1.0, 1.0).astype(np.float32)
