"""Scalar Gaussians and one-dimensional GMM experts with diffusion time.

Every expert is a mixture over a fixed, equidistant grid of means with one
shared variance that grows linearly with the diffusion time,
``sigma_j^2(t) = sigma0^2 + c_j * 2t``.  Diffusion time ``t`` and the noise
standard deviation ``s = sqrt(2t)`` are interchangeable; user-facing code
speaks in ``s`` and converts with :func:`time_from_std`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, logsumexp, ndtr

from gmdm import _kernels

LOG_2PI = float(np.log(2.0 * np.pi))


def time_from_std(s):
    """Diffusion time ``t`` whose Gaussian kernel has standard deviation ``s``."""
    return 0.5 * np.square(s)


def std_from_time(t):
    return np.sqrt(2.0 * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class MeanGrid:
    """Equidistant component means on ``[-gamma, gamma]``.

    ``sigma0`` defaults to the grid spacing ``2 gamma / (L - 1)``.
    """

    L: int
    gamma: float = 1.0
    sigma0: float | None = None
    means: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 2:
            raise ValueError(f"need an integer component count L >= 2, got {self.L!r}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma!r}")
        object.__setattr__(self, "L", int(self.L))
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.sigma0 is None:
            object.__setattr__(self, "sigma0", self.spacing)
        elif not self.sigma0 > 0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0!r}")
        object.__setattr__(self, "sigma0", float(self.sigma0))
        # integer numerators keep the grid exactly symmetric with exact endpoints
        means = self.gamma * (2.0 * np.arange(self.L) - (self.L - 1)) / (self.L - 1)
        means.setflags(write=False)
        object.__setattr__(self, "means", means)

    @property
    def spacing(self) -> float:
        return 2.0 * self.gamma / (self.L - 1)

    def variance(self, c, t):
        """Expert variance ``sigma0^2 + c * 2t`` (broadcasts over ``c`` and ``t``)."""
        return self.sigma0**2 + 2.0 * np.asarray(c, dtype=float) * np.asarray(t, dtype=float)


def init_logits(grid: MeanGrid, alpha: float = 1000.0) -> np.ndarray:
    """Default logits ``0.1 sqrt(alpha) / (1 + alpha mu_l^2)``, peaked at zero."""
    return 0.1 * np.sqrt(alpha) / (1.0 + alpha * grid.means**2)


@dataclass
class Expert:
    """One GMM potential: unconstrained logits plus variance-growth constant ``c``."""

    logits: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.ndim != 1:
            raise ValueError("logits must be a vector")
        if not self.c > 0:
            raise ValueError(f"variance-growth constant must be positive, got {self.c!r}")

    @property
    def weights(self) -> np.ndarray:
        return soft_argmax(self.logits)

    @property
    def log_weights(self) -> np.ndarray:
        return log_softmax(self.logits)

    def variance(self, grid: MeanGrid, t) -> np.ndarray:
        return grid.variance(self.c, t)


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t >= 0)):
        raise ValueError(f"diffusion time must be non-negative, got {t!r}")
    return t


def gaussian_pdf(x, mu, var):
    """Density of ``N(mu, var)`` at ``x``."""
    var = np.asarray(var, dtype=float)
    if np.any(~(var > 0)):
        raise ValueError(f"variance must be positive, got {var!r}")
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * (x - mu) ** 2 / var) / np.sqrt(2.0 * np.pi * var)
    return out[()] if out.ndim == 0 else out


def soft_argmax(zeta) -> np.ndarray:
    """Map logits onto the unit simplex (max-subtracted softmax)."""
    zeta = np.asarray(zeta, dtype=float)
    if np.isnan(zeta).any():
        raise ValueError("soft_argmax received NaN logits")
    z = zeta - zeta.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _component_logits(x, expert: Expert, grid: MeanGrid, t):
    """``log w_l + log G(x; mu_l, sigma^2(t))`` with the component axis last."""
    t = _check_time(t)
    x = np.asarray(x, dtype=float)
    var = expert.variance(grid, t)
    x, var = np.broadcast_arrays(x, var)
    a = (
        expert.log_weights
        - 0.5 * (x[..., None] - grid.means) ** 2 / var[..., None]
        - 0.5 * (LOG_2PI + np.log(var[..., None]))
    )
    return a, var


def expert_logpdf(x, expert: Expert, grid: MeanGrid, t=0.0):
    """``log psi_j(x, w_j, t)`` evaluated by log-sum-exp; vectorised over ``x``."""
    a, _ = _component_logits(x, expert, grid, t)
    out = logsumexp(a, axis=-1)
    return out[()] if out.ndim == 0 else out


def responsibilities(x, expert: Expert, grid: MeanGrid, t=0.0) -> np.ndarray:
    """Posterior component probabilities, component axis last."""
    a, _ = _component_logits(x, expert, grid, t)
    return np.exp(a - logsumexp(a, axis=-1, keepdims=True))


def expert_score(x, expert: Expert, grid: MeanGrid, t=0.0):
    """``d/dx log psi_j(x, w_j, t)``."""
    a, var = _component_logits(x, expert, grid, t)
    r = np.exp(a - logsumexp(a, axis=-1, keepdims=True))
    x = np.asarray(x, dtype=float)
    out = (r @ grid.means - x) / var
    return out[()] if out.ndim == 0 else out


def expert_cdf(x, expert: Expert, grid: MeanGrid, t=0.0):
    """Mixture CDF; used for Kolmogorov-Smirnov checks of sampled responses."""
    t = _check_time(t)
    sd = np.sqrt(expert.variance(grid, t))
    x = np.asarray(x, dtype=float)
    out = ndtr((x[..., None] - grid.means) / np.asarray(sd)[..., None]) @ expert.weights
    return out[()] if out.ndim == 0 else out


def expert_sample(expert: Expert, grid: MeanGrid, t, rng: np.random.Generator, size=None):
    """Draw a component from ``w_j``, then a Gaussian around its mean."""
    t = _check_time(t)
    comp = rng.choice(grid.L, size=size, p=expert.weights)
    sd = np.sqrt(expert.variance(grid, t))
    return grid.means[comp] + sd * rng.standard_normal(size=size)


def mixture_moments(u, var, log_weights, grid: MeanGrid):
    """Batched expert statistics over responses ``u[n, j]`` and variances ``var[n, j]``.

    Returns ``(logpsi, m1, c2, c3)``: log-densities, the responsibility mean of
    the component means, and its second and third central moments.
    """
    u = np.ascontiguousarray(u, dtype=float)
    var = np.ascontiguousarray(np.broadcast_to(var, u.shape), dtype=float)
    if not np.isfinite(u).all():
        raise ValueError("responses must be finite")
    return _kernels.mixture_moments(u, var, np.ascontiguousarray(log_weights), -grid.gamma, grid.spacing)


def mixture_mean(u, var, log_weights, grid: MeanGrid):
    """Batched ``(logpsi, m1)``; see :func:`mixture_moments`."""
    u = np.ascontiguousarray(u, dtype=float)
    var = np.ascontiguousarray(np.broadcast_to(var, u.shape), dtype=float)
    if not np.isfinite(u).all():
        raise ValueError("responses must be finite")
    return _kernels.mixture_mean(u, var, np.ascontiguousarray(log_weights), -grid.gamma, grid.spacing)
