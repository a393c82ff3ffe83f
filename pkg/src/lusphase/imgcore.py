"""Grayscale image I/O, geometric preprocessing and 2-D spectral helpers.

Images are plain 2-D ``float64`` numpy arrays indexed ``[row, col]``
(``[y, x]``), row 0 being the transducer face. Spectra are the complex
arrays returned by :func:`numpy.fft.fft2` (DC at index ``(0, 0)``).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError, FormatError

PNG8 = "PNG8"
PFM = "PFM"


def as_image(data) -> np.ndarray:
    """Validate and convert ``data`` to a finite 2-D float64 array."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise FormatError("image contains NaN or Inf values")
    return img


# --------------------------------------------------------------------------- #
# File I/O
# --------------------------------------------------------------------------- #

def _read_pfm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag == b"PF":
            raise FormatError(f"{path}: 3-channel PFM is not supported (1 channel required)")
        if tag != b"Pf":
            raise FormatError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        scale_line = fh.readline().strip()
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(scale_line)
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{path}: malformed PFM header") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        buf = fh.read()
    count = width * height
    if len(buf) < 4 * count:
        raise FormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(buf, dtype=dtype, count=count).reshape(height, width)
    # PFM stores rows bottom-to-top.
    img = np.flipud(data).astype(np.float64)
    if not np.all(np.isfinite(img)):
        raise FormatError(f"{path}: PFM contains NaN or Inf values")
    return img


def pfm_bytes(img: np.ndarray) -> bytes:
    """Serialize a single-channel little-endian PFM."""
    img = as_image(img)
    height, width = img.shape
    payload = np.ascontiguousarray(np.flipud(img), dtype="<f4")
    return b"Pf\n" + f"{width} {height}\n".encode("ascii") + b"-1.0\n" + payload.tobytes()


def load_image(path) -> np.ndarray:
    """Read a grayscale image.

    8-bit PNG/PGM inputs are scaled to [0, 1]; PFM values are returned
    unchanged. Multi-channel images raise :class:`FormatError`.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic in (b"Pf", b"PF"):
        return _read_pfm(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            bands = len(im.getbands())
            if mode != "L":
                if bands != 1:
                    raise FormatError(
                        f"{path}: expected 1 grayscale channel, found {bands} channels (mode {mode})"
                    )
                raise FormatError(f"{path}: unsupported pixel mode {mode}; 8-bit grayscale required")
            arr = np.asarray(im, dtype=np.float64)
    except (Image.UnidentifiedImageError, SyntaxError) as exc:
        raise FormatError(f"{path}: unsupported image format") from exc
    return arr / 255.0


def save_image(img: np.ndarray, path, format: str = PFM) -> None:
    """Write ``img`` as an 8-bit PNG (clamped, round-half-up) or a float PFM."""
    img = as_image(img)
    path = Path(path)
    fmt = format.upper()
    if fmt == PFM:
        path.write_bytes(pfm_bytes(img))
    elif fmt == PNG8:
        q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(q).save(path, format="PNG")
    else:
        raise FormatError(f"unknown output format {format!r}")


# --------------------------------------------------------------------------- #
# Geometry
# --------------------------------------------------------------------------- #

def crop_center(img: np.ndarray, side: int, offset: tuple[int, int] | None = None) -> np.ndarray:
    """Cut a ``side`` x ``side`` window, centred unless ``offset=(row, col)`` is given."""
    img = as_image(img)
    h, w = img.shape
    if side < 1 or side > min(h, w):
        raise DimensionError(f"crop side {side} does not fit a {w}x{h} image")
    if offset is None:
        top, left = (h - side) // 2, (w - side) // 2
    else:
        top, left = offset
        if top < 0 or left < 0 or top + side > h or left + side > w:
            raise DimensionError(f"crop window at {offset} with side {side} leaves the {w}x{h} image")
    return img[top:top + side, left:left + side].copy()


def _bilinear_axis(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        coords = np.full(n_out, (n_in - 1) / 2.0)
    else:
        coords = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(coords).astype(np.intp), 0, max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize on a corner-aligned sampling grid."""
    img = as_image(img)
    if out_w < 1 or out_h < 1:
        raise DimensionError(f"target size {out_w}x{out_h} must be positive")
    h, w = img.shape
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    fr = fr[:, None]
    top = img[r0][:, c0] * (1.0 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1.0 - fc) + img[r1][:, c1] * fc
    out = top * (1.0 - fr) + bot * fr
    # Guard against one-ulp overshoot from the interpolation arithmetic.
    return np.clip(out, img.min(), img.max())


def rescale_unit(img: np.ndarray) -> np.ndarray:
    """Linear min-max rescale to [0, 1]; constant images map to zeros."""
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0.0:
        return np.zeros_like(img, dtype=np.float64)
    return (img - lo) / (hi - lo)


# --------------------------------------------------------------------------- #
# Spectral transforms
# --------------------------------------------------------------------------- #

def fft2(img: np.ndarray) -> np.ndarray:
    return np.fft.fft2(as_image(img))


def ifft2(spec: np.ndarray) -> np.ndarray:
    """Inverse transform, keeping the real part."""
    return np.real(np.fft.ifft2(spec))


def frequency_grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Angular frequencies ``(wx, wy)`` in rad/pixel on the unshifted FFT layout."""
    h, w = shape
    wy = 2.0 * np.pi * np.fft.fftfreq(h)
    wx = 2.0 * np.pi * np.fft.fftfreq(w)
    return np.meshgrid(wx, wy)

