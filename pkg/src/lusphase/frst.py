"""Fast radial symmetry transform (Loy & Zelinsky) on enhanced phase images."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .errors import ParameterError
from .imgcore import as_image, rescale_unit

BRIGHT = "bright"
DARK = "dark"
BOTH = "both"


@dataclass(frozen=True)
class FRSTParams:
    radii: tuple[int, ...] = (2, 4, 6, 8, 10)
    radial_strictness: float = 2.0
    gradient_threshold: float = 0.05
    polarity: str = BRIGHT
    kappa_small: float = 8.0   # k_n for n == 1
    kappa: float = 9.9         # k_n for n > 1
    sigma_factor: float = 0.25

    def __post_init__(self):
        if not self.radii or any(int(n) != n or n < 1 for n in self.radii):
            raise ParameterError(f"radii must be a non-empty set of integers >= 1, got {self.radii}")
        if self.radial_strictness < 1:
            raise ParameterError("radial_strictness must be >= 1")
        if not 0 <= self.gradient_threshold < 1:
            raise ParameterError("gradient_threshold must lie in [0, 1)")
        if self.polarity not in (BRIGHT, DARK, BOTH):
            raise ParameterError(f"unknown polarity {self.polarity!r}")

    def kappa_for(self, n: int) -> float:
        return self.kappa_small if n == 1 else self.kappa

    def sigma_for(self, n: int) -> float:
        return self.sigma_factor * n


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unit-sum 1-D Gaussian truncated at ``ceil(3 sigma)``."""
    radius = max(1, math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def sobel_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel derivatives ``(gx, gy)`` with symmetric border extension."""
    img = as_image(img)
    p = np.pad(img, 1, mode="symmetric")
    # Smooth across, differentiate along.
    sy = p[:-2] + 2.0 * p[1:-1] + p[2:]
    gx = sy[:, 2:] - sy[:, :-2]
    sx = p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]
    gy = sx[2:] - sx[:-2]
    return gx, gy


def _vote_images(gx, gy, n, params):
    h, w = gx.shape
    mag = np.hypot(gx, gy)
    peak = mag.max()
    orient = np.zeros(h * w)
    magimg = np.zeros(h * w)
    if peak == 0.0:
        return orient.reshape(h, w), magimg.reshape(h, w)
    rows, cols = np.nonzero(mag > params.gradient_threshold * peak)
    m = mag[rows, cols]
    dx = np.rint(n * gx[rows, cols] / m).astype(np.intp)
    dy = np.rint(n * gy[rows, cols] / m).astype(np.intp)
    signs = {BRIGHT: (1,), DARK: (-1,), BOTH: (1, -1)}[params.polarity]
    for sgn in signs:
        r = rows + sgn * dy
        c = cols + sgn * dx
        keep = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        flat = r[keep] * w + c[keep]
        orient += sgn * np.bincount(flat, minlength=h * w)
        magimg += sgn * np.bincount(flat, weights=m[keep], minlength=h * w)
    return orient.reshape(h, w), magimg.reshape(h, w)


def radius_response(img: np.ndarray, n: int, params: FRSTParams,
                    gradient: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Blurred symmetry contribution ``S_n`` for a single radius."""
    gx, gy = sobel_gradient(img) if gradient is None else gradient
    orient, magimg = _vote_images(gx, gy, n, params)
    k = params.kappa_for(n)
    o = np.clip(orient, -k, k)
    f = np.sign(o) * (np.abs(o) / k) ** params.radial_strictness * (magimg / k)
    g = gaussian_kernel(params.sigma_for(n))
    f = convolve1d(f, g, axis=0, mode="constant")
    return convolve1d(f, g, axis=1, mode="constant")


def frst_transform(img: np.ndarray, params: FRSTParams = FRSTParams()) -> np.ndarray:
    img = as_image(img)
    h, w = img.shape
    limit = min(h, w) / 2
    if max(params.radii) >= limit:
        raise ParameterError(f"radius {max(params.radii)} must be below half the image side ({limit})")
    grad = sobel_gradient(img)
    total = np.zeros_like(img)
    # Fixed summation order keeps the output bit-reproducible.
    for n in params.radii:
        total += radius_response(img, int(n), params, grad)
    return rescale_unit(total / len(params.radii))


def radial_symmetry_pair(us_e1: np.ndarray, us_e2: np.ndarray,
                         params: FRSTParams = FRSTParams()) -> tuple[np.ndarray, np.ndarray]:
    return frst_transform(us_e1, params), frst_transform(us_e2, params)
