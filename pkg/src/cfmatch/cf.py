"""Empirical characteristic functions and the distance between them.

The ECF of samples {x_k} at a query point t is the complex number
(1/n) sum_k exp(i t.x_k), stored as separate real/imaginary tensors so the
autodiff engine stays real-valued:

    re(t) = mean_k cos(t . x_k),   im(t) = mean_k sin(t . x_k).

The loss between two sample sets is the mean over query points of the
modulus of the ECF difference. A tiny stabilizer inside every square root
keeps the loss differentiable when the two ECFs coincide, at the price of a
uniform offset far below every tolerance used here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DomainError, ShapeError, Tensor, matmul, sincos, sqrt, transpose

__all__ = [
    "STABILIZER",
    "ComplexGrid",
    "QueryPoints",
    "cf_loss",
    "cf_loss_decomposed",
    "cf_quadratic",
    "ecf",
    "grid_loss",
    "true_gaussian_cf",
]

STABILIZER = 1e-12


@dataclass(frozen=True)
class QueryPoints:
    """A batch of frequency-domain locations, one row per point."""

    points: Tensor

    def __post_init__(self):
        if self.points.data.ndim != 2:
            raise ShapeError(f"QueryPoints must be 2-D, got shape {self.points.shape}")
        if not np.isfinite(self.points.data).all():
            raise DomainError("QueryPoints entries must be finite")

    @property
    def batch(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class ComplexGrid:
    """ECF values at a set of query points, split into real/imaginary parts."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.data.ndim != 1 or self.re.shape != self.im.shape:
            raise ShapeError(
                f"ComplexGrid parts must be equal-length vectors, got {self.re.shape} and {self.im.shape}"
            )
        modulus_sq = self.re.data * self.re.data + self.im.data * self.im.data
        if (modulus_sq > 1.0 + 1e-9).any():
            raise DomainError("ComplexGrid modulus exceeds 1")

    def __len__(self) -> int:
        return self.re.shape[0]


def ecf(samples: Tensor, points: QueryPoints) -> ComplexGrid:
    """Empirical characteristic function of ``samples`` at ``points``.

    Differentiable with respect to both the samples and the points.
    """
    if samples.data.ndim != 2:
        raise ShapeError(f"ecf: samples must be 2-D, got shape {samples.shape}")
    if samples.shape[0] < 1:
        raise ShapeError("ecf: need at least one sample")
    if samples.shape[1] != points.dim:
        raise ShapeError(
            f"ecf: sample dimension {samples.shape[1]} != point dimension {points.dim}"
        )
    proj = matmul(points.points, transpose(samples))
    sin_proj, cos_proj = sincos(proj)
    return ComplexGrid(re=cos_proj.mean(axis=1), im=sin_proj.mean(axis=1))


def cf_quadratic(ecf_x: ComplexGrid, ecf_y: ComplexGrid) -> Tensor:
    """Per-point squared modulus of the ECF difference."""
    if len(ecf_x) != len(ecf_y):
        raise ShapeError(f"cf_quadratic: grid lengths differ: {len(ecf_x)} vs {len(ecf_y)}")
    dre = ecf_x.re - ecf_y.re
    dim = ecf_x.im - ecf_y.im
    return dre * dre + dim * dim


def grid_loss(ecf_x: ComplexGrid, ecf_y: ComplexGrid) -> Tensor:
    """Mean over query points of the stabilized modulus of the ECF difference."""
    return sqrt(cf_quadratic(ecf_x, ecf_y) + STABILIZER).mean()


def cf_loss(samples_x: Tensor, samples_y: Tensor, points: QueryPoints) -> Tensor:
    """Mean over query points of the modulus of the ECF difference."""
    return grid_loss(ecf(samples_x, points), ecf(samples_y, points))


def cf_loss_decomposed(ecf_x: ComplexGrid, ecf_y: ComplexGrid) -> tuple[Tensor, Tensor]:
    """Split the per-point quadratic discrepancy into amplitude and phase terms.

    amplitude = (|X| - |Y|)^2 measures spread mismatch; phase =
    2|X||Y|(1 - cos(angle difference)) measures center mismatch. The two
    terms sum to :func:`cf_quadratic` exactly up to the sqrt stabilizer.
    """
    if len(ecf_x) != len(ecf_y):
        raise ShapeError(f"cf_loss_decomposed: grid lengths differ: {len(ecf_x)} vs {len(ecf_y)}")
    mod_x = sqrt(ecf_x.re * ecf_x.re + ecf_x.im * ecf_x.im + STABILIZER)
    mod_y = sqrt(ecf_y.re * ecf_y.re + ecf_y.im * ecf_y.im + STABILIZER)
    # 2|X||Y| cos(a_X - a_Y) == 2 (re_X re_Y + im_X im_Y), so the phase term
    # can be formed without ever extracting an angle.
    dot = ecf_x.re * ecf_y.re + ecf_x.im * ecf_y.im
    diff = mod_x - mod_y
    amplitude = diff * diff
    phase = (mod_x * mod_y - dot) * 2.0
    return amplitude, phase


def true_gaussian_cf(points: QueryPoints, mean, cov) -> ComplexGrid:
    """Closed-form Gaussian characteristic function, as a test oracle.

    Returns exp(i t.mean - t' cov t / 2) at every query point. Constant
    (non-differentiable) by design.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    m = points.dim
    if mean.shape != (m,) or cov.shape != (m, m):
        raise ShapeError(
            f"true_gaussian_cf: mean {mean.shape} / cov {cov.shape} do not match dimension {m}"
        )
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10):
        raise DomainError("true_gaussian_cf: covariance must be symmetric")
    if np.linalg.eigvalsh(cov).min() < -1e-10:
        raise DomainError("true_gaussian_cf: covariance must be positive semi-definite")

    pts = points.points.data
    angle = pts @ mean
    quad = np.einsum("bi,ij,bj->b", pts, cov, pts)
    modulus = np.exp(-0.5 * quad)
    return ComplexGrid(re=Tensor(modulus * np.cos(angle)), im=Tensor(modulus * np.sin(angle)))
