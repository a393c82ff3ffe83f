"""Attenuation-compensated enhancement of local phase energy images.

A Beer-Lambert transmission map ``T = exp(-eta * depth)`` models how much
acoustic signal survives at each pixel. Each enhanced image inverts the
interpolation ``LPE = T * E + (1 - T) * beta`` with an attenuation exponent:

    E = (LPE - beta) / max(T, eps) ** delta + beta
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .imgcore import as_image, rescale_unit

DEPTH = "depth"
CONTENT = "content"


@dataclass(frozen=True)
class EnhanceParams:
    eta: float = 0.85
    epsilon: float = 1e-4
    delta: float = 0.85
    beta_fractions: tuple[float, float] = (0.60, 0.90)
    # "depth": exp(-eta * y / (H - 1)); "content": optical depth is the
    # running column sum of LPE above the pixel, divided by H - 1.
    transmission: str = DEPTH
    # Treat the last row as the transducer face.
    axial_flip: bool = False

    def __post_init__(self):
        if not (self.eta > 0 and self.epsilon > 0 and self.delta > 0):
            raise ParameterError("eta, epsilon and delta must all be positive")
        if len(self.beta_fractions) != 2 or not all(0 < b <= 1 for b in self.beta_fractions):
            raise ParameterError(f"beta fractions must be two values in (0, 1], got {self.beta_fractions}")
        if self.transmission not in (DEPTH, CONTENT):
            raise ParameterError(f"unknown transmission model {self.transmission!r}")


def transmission_map(lpe: np.ndarray, params: EnhanceParams = EnhanceParams()) -> np.ndarray:
    lpe = as_image(lpe)
    h, w = lpe.shape
    if h == 1:
        raise DimensionError("transmission map needs at least two rows of axial depth")
    if params.axial_flip:
        lpe = lpe[::-1]
    if params.transmission == DEPTH:
        depth = np.broadcast_to((np.arange(h) / (h - 1))[:, None], (h, w))
    else:
        above = np.cumsum(lpe, axis=0) - lpe
        depth = above / (h - 1)
    t = np.exp(-params.eta * depth)
    return np.ascontiguousarray(t[::-1] if params.axial_flip else t)


def enhance_image(lpe: np.ndarray, us_a: np.ndarray, beta: float,
                  params: EnhanceParams = EnhanceParams()) -> np.ndarray:
    """Raw enhanced image; values may leave [0, 1]."""
    if beta < 0:
        raise ParameterError(f"beta must be non-negative, got {beta}")
    lpe = as_image(lpe)
    us_a = as_image(us_a)
    if lpe.shape != us_a.shape:
        raise DimensionError(f"LPE {lpe.shape} and transmission map {us_a.shape} differ in shape")
    return (lpe - beta) / np.maximum(us_a, params.epsilon) ** params.delta + beta


def enhanced_pair(lpe: np.ndarray, params: EnhanceParams = EnhanceParams(),
                  normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Enhanced images at the two echogenicity levels ``beta = f * max(LPE)``."""
    lpe = as_image(lpe)
    peak = float(lpe.max())
    if peak <= 0.0:
        return np.zeros_like(lpe), np.zeros_like(lpe)
    us_a = transmission_map(lpe, params)
    out = []
    for frac in params.beta_fractions:
        e = enhance_image(lpe, us_a, frac * peak, params)
        out.append(rescale_unit(e) if normalize else e)
    return out[0], out[1]
