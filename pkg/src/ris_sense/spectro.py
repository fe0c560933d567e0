"""CIR -> 224x224 RGB spectrogram images.

Pipeline: magnitude short-time Fourier transform (hann window, 64-sample
frames, hop 8) -> decibels clamped to a 60 dB range below the peak ->
normalize to [0, 1] -> bilinear resize to 224x224 -> five-anchor colormap.
Rows are STFT frequency bins (bin 0 at the top), columns are time frames.

An all-zero CIR short-circuits to a uniform image at colormap(0); there is
no peak to normalize against.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidRangeError, LengthError, ShapeError

IMAGE_SIDE = 224

STFT_WINDOW_LEN = 64
STFT_HOP = 8
DB_RANGE = 60.0


@dataclass(frozen=True)
class Colormap:
    """Piecewise-linear map from [0, 1] to RGB bytes through fixed anchors."""

    anchors: tuple[tuple[float, int, int, int], ...] = (
        (0.00, 68, 1, 84),
        (0.25, 59, 82, 139),
        (0.50, 33, 145, 140),
        (0.75, 94, 201, 98),
        (1.00, 253, 231, 37),
    )

    def __post_init__(self):
        pos = [a[0] for a in self.anchors]
        if len(pos) < 2 or any(b <= a for a, b in zip(pos, pos[1:])):
            raise InvalidRangeError("colormap anchor positions must strictly increase")
        if pos[0] != 0.0 or pos[-1] != 1.0:
            raise InvalidRangeError("colormap must span [0, 1]")
        for _, r, g, b in self.anchors:
            if not all(0 <= v <= 255 for v in (r, g, b)):
                raise InvalidRangeError("colormap channels must be bytes")

    def apply(self, values: np.ndarray) -> np.ndarray:
        """[...]-shaped floats in [0, 1] -> [..., 3] uint8."""
        v = np.asarray(values, dtype=np.float64)
        if v.size and (v.min() < -1e-9 or v.max() > 1.0 + 1e-9):
            raise InvalidRangeError("colormap input must lie in [0, 1]")
        v = np.clip(v, 0.0, 1.0)
        pos = np.array([a[0] for a in self.anchors])
        rgb = np.array([a[1:] for a in self.anchors], dtype=np.float64)
        out = np.empty((*v.shape, 3))
        for ch in range(3):
            out[..., ch] = np.interp(v, pos, rgb[:, ch])
        return np.round(out).astype(np.uint8)


COLORMAP = Colormap()
FILL_RGB = tuple(int(c) for c in COLORMAP.apply(np.zeros(1))[0])  # (68, 1, 84)


@dataclass
class SpectrogramImage:
    """An RGB image plus the bookkeeping the dataset builder needs."""

    pixels: np.ndarray  # uint8 [224, 224, 3]
    label: int | None = None  # 0=LOS, 1=NLOS_100, 2=NLOS_75
    environment: str = ""
    provenance: str = "measured"  # measured | augmented | noisy-augmented
    source_angle_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.pixels.shape != (IMAGE_SIDE, IMAGE_SIDE, 3):
            raise ShapeError(
                f"image must be {IMAGE_SIDE}x{IMAGE_SIDE}x3, got {self.pixels.shape}"
            )
        if self.pixels.dtype != np.uint8:
            raise ShapeError(f"image must be uint8, got {self.pixels.dtype}")


def stft_magnitude(x: np.ndarray, window_len: int = STFT_WINDOW_LEN, hop: int = STFT_HOP) -> np.ndarray:
    """|STFT| of a complex signal: [window_len, n_frames], hann-windowed,
    frame starts at multiples of hop, no padding."""
    if window_len < 2 or hop < 1:
        raise InvalidRangeError("window_len must be >= 2 and hop >= 1")
    if x.size < window_len:
        raise LengthError(
            f"signal of length {x.size} is shorter than the {window_len}-sample window"
        )
    n_frames = 1 + (x.size - window_len) // hop
    w = np.hanning(window_len)
    starts = np.arange(n_frames) * hop
    frames = x[starts[:, None] + np.arange(window_len)[None, :]] * w
    return np.abs(np.fft.fft(frames, axis=1)).T


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centered coordinates. Works on
    [H, W] or [H, W, C] float arrays."""
    if img.ndim not in (2, 3):
        raise ShapeError(f"resize expects 2-d or 3-d input, got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise InvalidRangeError("output dims must be positive")
    h, w = img.shape[:2]
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def cir_to_spectrogram(
    cir: np.ndarray,
    *,
    window_len: int = STFT_WINDOW_LEN,
    hop: int = STFT_HOP,
    label: int | None = None,
    environment: str = "",
    source_angle_deg: float = 0.0,
    seed: int = 0,
) -> SpectrogramImage:
    """Render one CIR as a colormapped 224x224 spectrogram image."""
    mag = stft_magnitude(np.asarray(cir), window_len, hop)
    peak = mag.max()
    if peak == 0.0:
        norm = np.zeros_like(mag)
    else:
        # floor 60 dB below the peak, then scale so peak -> 1, floor -> 0
        db = 20.0 * np.log10(np.maximum(mag, peak * 10.0 ** (-DB_RANGE / 20.0)))
        norm = (db - (db.max() - DB_RANGE)) / DB_RANGE
    field = bilinear_resize(norm, IMAGE_SIDE, IMAGE_SIDE)
    pixels = COLORMAP.apply(np.clip(field, 0.0, 1.0))
    return SpectrogramImage(
        pixels=pixels,
        label=label,
        environment=environment,
        provenance="measured",
        source_angle_deg=source_angle_deg,
        seed=seed,
    )


def with_pixels(img: SpectrogramImage, pixels: np.ndarray, provenance: str | None = None,
                seed: int | None = None) -> SpectrogramImage:
    """Copy of the image with replaced pixel data (and optional meta edits)."""
    return replace(
        img,
        pixels=pixels,
        provenance=img.provenance if provenance is None else provenance,
        seed=img.seed if seed is None else seed,
    )
