"""Diagonal Gaussian helpers built on the autodiff primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagGaussian:
    """N(mean, diag(exp(log_var))). Leading axes are treated as a batch."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ShapeError("DiagGaussian", f"mean {self.mean.shape} vs log_var {self.log_var.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)


def reparameterize(q: DiagGaussian, eps) -> Tensor:
    """``mean + exp(log_var / 2) * eps``, differentiable in both fields of ``q``."""
    eps = ad.as_tensor(eps)
    if eps.shape != q.mean.shape:
        raise ShapeError("reparameterize", f"eps {eps.shape} vs distribution {q.mean.shape}")
    return q.mean + ad.exp(q.log_var * 0.5) * eps


def diag_gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p), summed over every component (and over any batch axes)."""
    if q.mean.shape != p.mean.shape:
        raise ShapeError("diag_gaussian_kl", f"{q.mean.shape} vs {p.mean.shape}")
    diff = q.mean - p.mean
    ratio = ad.exp(q.log_var - p.log_var)
    mahal = ad.square(diff) * ad.exp(-p.log_var)
    terms = ratio + mahal - 1.0 - (q.log_var - p.log_var)
    return ad.sum(terms) * 0.5


def gaussian_log_pdf(x, mean, std) -> Tensor:
    """Sum of elementwise normal log densities."""
    x, mean, std = ad.as_tensor(x), ad.as_tensor(mean), ad.as_tensor(std)
    if not (x.shape == mean.shape == std.shape):
        raise ShapeError("gaussian_log_pdf", f"x {x.shape}, mean {mean.shape}, std {std.shape}")
    if np.any(std.data <= 0):
        raise ValueError("gaussian_log_pdf: std must be strictly positive")
    z = (x - mean) / std
    return ad.sum(ad.square(z) * -0.5 - ad.log(std)) - 0.5 * LOG_2PI * x.data.size
