"""Image augmentation: geometric ops, HSV color ops, and Gaussian noise.

The primitives at the top accept their full mathematical domains (hue is
periodic, any rotation angle works). The :func:`augment` pipeline on top of
them enforces the documented training ranges -- rotation within +-15 deg,
crop scale in [0.8, 1], color factors in [0.7, 1.3], hue within +-18 deg --
and rejects anything outside with a parameter error.

Geometry fills exposed pixels with colormap(0) so augmented spectrograms
keep the background color of real ones.
"""

from __future__ import annotations

import numpy as np

from .errors import AugmentParamError, InvalidModeError, InvalidRangeError
from .spectro import FILL_RGB, IMAGE_SIDE, SpectrogramImage, bilinear_resize, with_pixels
from .tensor import PortableRng

# ---------------------------------------------------------------------------
# RGB <-> HSV, vectorized over [..., 3] float arrays in [0, 1]


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    # hue sector by which channel is max; delta==0 -> hue 0
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    choose = lambda a, b, c, d, e, g: np.choose(i, [a, b, c, d, e, g])  # noqa: E731
    r = choose(v, q, p, p, t, v)
    g_ = choose(t, v, v, q, p, p)
    b = choose(p, p, t, v, v, q)
    return np.stack([r, g_, b], axis=-1)


def _to_float(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


def _to_bytes(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# primitives (full domains)


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1].copy()


def vflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[::-1].copy()


def rotate(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counterclockwise about the image center, bilinear sampling,
    exposed corners filled with the colormap background."""
    h, w = pixels.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = np.deg2rad(angle_deg)
    cos, sin = np.cos(rad), np.sin(rad)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: rotate destination coords by -angle around the center
    dy, dx = yy - cy, xx - cx
    sy = cy + dy * cos - dx * sin
    sx = cx + dy * sin + dx * cos
    valid = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0)[..., None]
    fx = np.clip(sx - x0, 0.0, 1.0)[..., None]
    img = pixels.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    fill = np.array(FILL_RGB, dtype=np.float64)
    out[~valid] = fill
    return np.round(np.clip(out, 0.0, 255.0)).astype(np.uint8)


def resize_crop(pixels: np.ndarray, scale: float) -> np.ndarray:
    """Centered crop to `scale` of the side length, resized back up."""
    if not 0.0 < scale <= 1.0:
        raise InvalidRangeError(f"crop scale must lie in (0, 1], got {scale}")
    h, w = pixels.shape[:2]
    side_h = max(1, round(scale * h))
    side_w = max(1, round(scale * w))
    top = (h - side_h) // 2
    left = (w - side_w) // 2
    crop = pixels[top : top + side_h, left : left + side_w].astype(np.float64)
    if side_h == h and side_w == w:
        return pixels.copy()
    out = bilinear_resize(crop, h, w)
    return np.round(np.clip(out, 0.0, 255.0)).astype(np.uint8)


def adjust_hue(pixels: np.ndarray, delta_deg: float) -> np.ndarray:
    """Rotate hue by delta_deg; periodic, so +-360 is the identity."""
    hsv = rgb_to_hsv(_to_float(pixels))
    hsv[..., 0] = (hsv[..., 0] + delta_deg / 360.0) % 1.0
    return _to_bytes(hsv_to_rgb(hsv))


def adjust_saturation(pixels: np.ndarray, factor: float) -> np.ndarray:
    if factor < 0:
        raise InvalidRangeError("saturation factor must be >= 0")
    hsv = rgb_to_hsv(_to_float(pixels))
    hsv[..., 1] = np.clip(hsv[..., 1] * factor, 0.0, 1.0)
    return _to_bytes(hsv_to_rgb(hsv))


def adjust_brightness(pixels: np.ndarray, factor: float) -> np.ndarray:
    if factor < 0:
        raise InvalidRangeError("brightness factor must be >= 0")
    hsv = rgb_to_hsv(_to_float(pixels))
    hsv[..., 2] = np.clip(hsv[..., 2] * factor, 0.0, 1.0)
    return _to_bytes(hsv_to_rgb(hsv))


def adjust_contrast(pixels: np.ndarray, factor: float) -> np.ndarray:
    """Scale value-channel distance from mid-gray."""
    if factor < 0:
        raise InvalidRangeError("contrast factor must be >= 0")
    hsv = rgb_to_hsv(_to_float(pixels))
    hsv[..., 2] = np.clip(0.5 + (hsv[..., 2] - 0.5) * factor, 0.0, 1.0)
    return _to_bytes(hsv_to_rgb(hsv))


def gaussian_noise(pixels: np.ndarray, sigma_bytes: float, rng: PortableRng) -> np.ndarray:
    """Add i.i.d. Gaussian noise of the given byte-scale sigma; sigma 0 is
    the exact identity."""
    if sigma_bytes < 0:
        raise InvalidRangeError("noise sigma must be >= 0")
    if sigma_bytes == 0.0:
        return pixels.copy()
    noise = rng.normal(pixels.shape, 0.0, sigma_bytes)
    return np.round(np.clip(pixels.astype(np.float64) + noise, 0.0, 255.0)).astype(np.uint8)


# ---------------------------------------------------------------------------
# the training pipeline, with documented parameter ranges

AUGMENT_RANGES: dict[str, tuple[float, float]] = {
    "rotate": (-15.0, 15.0),
    "resize_crop": (0.8, 1.0),
    "saturation": (0.7, 1.3),
    "brightness": (0.7, 1.3),
    "contrast": (0.7, 1.3),
    "hue": (-18.0, 18.0),
}

_APPLY = {
    "hflip": lambda px, _v: hflip(px),
    "vflip": lambda px, _v: vflip(px),
    "rotate": rotate,
    "resize_crop": resize_crop,
    "saturation": adjust_saturation,
    "brightness": adjust_brightness,
    "contrast": adjust_contrast,
    "hue": adjust_hue,
}

NOISE_SIGMA_BYTES = {"slight": 5.0, "heavy": 25.0}


def augment(
    img: SpectrogramImage,
    ops: list[str | tuple[str, float]],
    rng: PortableRng,
) -> SpectrogramImage:
    """Apply ops left to right. A bare name draws its parameter uniformly
    from the documented range; a (name, value) pair uses the given value and
    must fall inside that range. Flips take no parameter."""
    pixels = img.pixels
    for op in ops:
        if isinstance(op, str):
            name, value = op, None
        else:
            name, value = op
        if name not in _APPLY:
            raise AugmentParamError(f"unknown augmentation op {name!r}")
        if name in ("hflip", "vflip"):
            if value is not None:
                raise AugmentParamError(f"{name} takes no parameter")
        else:
            lo, hi = AUGMENT_RANGES[name]
            if value is None:
                value = float(rng.uniform((1,), lo, hi)[0])
            elif not lo <= value <= hi:
                raise AugmentParamError(
                    f"{name} parameter {value} outside [{lo}, {hi}]"
                )
        pixels = _APPLY[name](pixels, value)
    return with_pixels(img, pixels, provenance="augmented", seed=rng.seed)


def add_noise(img: SpectrogramImage, level: str, rng: PortableRng) -> SpectrogramImage:
    """Gaussian pixel noise at a named level: sigma 5 bytes (slight) or 25
    bytes (heavy) of the 255 full scale."""
    if level not in NOISE_SIGMA_BYTES:
        raise InvalidModeError(f"noise level must be slight|heavy, got {level!r}")
    pixels = gaussian_noise(img.pixels, NOISE_SIGMA_BYTES[level], rng)
    return with_pixels(img, pixels, provenance="noisy-augmented", seed=rng.seed)
