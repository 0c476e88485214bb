"""Convolutional (fields-of-experts) GMDM on periodic signals and images.

Filters are specified in the frequency domain.  Filter ``j`` acts as the
circulant operator ``K_j x = ifftn(lam_j * fftn(x))`` whose transfer
function ``lam_j`` has modulus ``xi_j`` on its support ``Gamma_j`` and zero
elsewhere.  Supports are pairwise disjoint, closed under negation (so the
kernels are real) and never contain the zero frequency.  With this
convention ``K_j = F* diag(lam_j) F`` for the unitary DFT ``F`` and, by
Parseval, ``||k_j||^2 = xi_j^2 |Gamma_j| / n``.

The model density is ``prod_i prod_j psi_j((K_j x)_i, w_j, t)`` with expert
variances ``sigma0^2 + xi_j^2 2t``; the normalisation constant is dropped.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp

from gmdm.gmm_core import MeanGrid, mixture_moments, mixture_mean


class SupportError(ValueError):
    """Frequency supports violate disjointness, symmetry or the DC exclusion."""


def negate_frequencies(mask: np.ndarray) -> np.ndarray:
    """Mask of ``-omega (mod shape)`` for every ``omega`` in ``mask``."""
    out = mask
    for ax in range(mask.ndim):
        out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
    return out


def _as_mask(support, shape) -> np.ndarray:
    arr = np.asarray(support)
    if arr.dtype == bool and arr.shape == tuple(shape):
        return arr.copy()
    mask = np.zeros(shape, dtype=bool)
    for idx in support:
        mask[tuple(np.atleast_1d(idx))] = True
    return mask


def ring_partition(shape, J: int) -> list[np.ndarray]:
    """Split the non-zero frequencies into ``J`` rings of increasing radius.

    Rings are contiguous in wrapped frequency radius, roughly equal in size,
    and each is closed under negation.
    """
    shape = tuple(np.atleast_1d(shape))
    grids = np.meshgrid(*[np.minimum(np.arange(n), n - np.arange(n)) for n in shape], indexing="ij")
    radius = np.sqrt(sum(g.astype(float) ** 2 for g in grids))
    flat = radius.ravel()
    order = [i for i in np.argsort(flat, kind="stable") if flat[i] > 0]
    # group each frequency with its negation so a pair is never split
    seen = np.zeros(flat.size, dtype=bool)
    units = []
    for i in order:
        if seen[i]:
            continue
        m = np.zeros(flat.size, dtype=bool)
        m[i] = True
        pair = negate_frequencies(m.reshape(shape)).ravel()
        unit = np.flatnonzero(m | pair)
        seen[unit] = True
        units.append(unit)
    if J > len(units):
        raise SupportError(f"only {len(units)} conjugate frequency pairs available for {J} filters")
    parts = []
    for chunk in np.array_split(np.arange(len(units)), J):
        m = np.zeros(flat.size, dtype=bool)
        for u in chunk:
            m[units[u]] = True
        parts.append(m.reshape(shape))
    return parts


@dataclass
class SpectralFilterBank:
    """Filters with disjoint, flat-magnitude spectra."""

    shape: tuple
    supports: np.ndarray  # (J, *shape) bool
    xi: np.ndarray  # (J,)
    transfer: np.ndarray  # (J, *shape) complex

    @property
    def n(self) -> int:
        return int(np.prod(self.shape))

    @property
    def J(self) -> int:
        return len(self.xi)

    @property
    def kernels(self) -> np.ndarray:
        axes = tuple(range(1, len(self.shape) + 1))
        return np.real(np.fft.ifftn(self.transfer, axes=axes))

    @property
    def norms_sq(self) -> np.ndarray:
        k = self.kernels.reshape(self.J, -1)
        return np.einsum("ji,ji->j", k, k)

    def _axes(self, x):
        return tuple(range(x.ndim - len(self.shape), x.ndim))

    def apply(self, x) -> np.ndarray:
        """Features ``K_j x`` with shape ``(..., J, *shape)``."""
        x = np.asarray(x, dtype=float)
        X = np.expand_dims(np.fft.fftn(x, axes=self._axes(x)), axis=x.ndim - len(self.shape))
        out = X * self.transfer
        return np.real(np.fft.ifftn(out, axes=self._axes(out)))

    def adjoint(self, y) -> np.ndarray:
        """``sum_j K_j^T y_j`` for ``y`` with shape ``(..., J, *shape)``."""
        y = np.asarray(y, dtype=float)
        Y = np.fft.fftn(y, axes=self._axes(y)) * np.conj(self.transfer)
        out = np.real(np.fft.ifftn(Y, axes=self._axes(Y)))
        return out.sum(axis=y.ndim - len(self.shape) - 1)

    def matrices(self) -> np.ndarray:
        """Dense ``n x n`` operator for each filter (small ``n`` only)."""
        eye = np.eye(self.n).reshape((self.n,) + tuple(self.shape))
        cols = self.apply(eye)  # (n, J, *shape): column i of each K_j
        return np.moveaxis(cols.reshape(self.n, self.J, self.n), 0, 2)

    def check(self, atol=1e-10):
        """Raise :class:`SupportError` if any structural assumption fails."""
        validate_supports(self.supports)
        mag = np.abs(self.transfer)
        target = self.xi.reshape((-1,) + (1,) * len(self.shape)) * self.supports
        dev = float(np.max(np.abs(mag - target)))
        if dev > atol * max(1.0, float(np.max(self.xi))):
            raise SupportError(f"transfer magnitude deviates from xi * indicator by {dev:.3e}")


def validate_supports(supports):
    supports = np.asarray(supports, dtype=bool)
    J = supports.shape[0]
    origin = (slice(None),) + (0,) * (supports.ndim - 1)
    if supports[origin].any():
        raise SupportError("supports must exclude the zero frequency")
    for j in range(J):
        if not supports[j].any():
            raise SupportError(f"support {j} is empty")
        if not np.array_equal(supports[j], negate_frequencies(supports[j])):
            raise SupportError(f"support {j} is not closed under frequency negation")
    overlap = supports.sum(axis=0) > 1
    if overlap.any():
        pairs = [(i, j) for i, j in itertools.combinations(range(J), 2) if (supports[i] & supports[j]).any()]
        raise SupportError(f"supports overlap for filter pairs {pairs}")


def build_spectral_bank(shape, partition, xi, rng: np.random.Generator | None = None, zero_phase=False):
    """Realise real filters with flat magnitude ``xi_j`` on each support.

    Phases are drawn uniformly and made conjugate-symmetric; frequencies that
    are their own negation get a random sign.  ``zero_phase`` gives
    even-symmetric kernels.
    """
    shape = tuple(np.atleast_1d(shape))
    supports = np.array([_as_mask(s, shape) for s in partition])
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.size != supports.shape[0]:
        raise ValueError("need one magnitude per support")
    if np.any(xi <= 0):
        raise ValueError("magnitudes must be positive")
    validate_supports(supports)
    rng = rng or np.random.default_rng()
    phase = np.zeros(shape)
    if not zero_phase:
        phi = rng.uniform(-np.pi, np.pi, size=shape)
        # antisymmetric phase makes the transfer conjugate-symmetric
        phase = 0.5 * (phi - negate_frequencies(phi))
        coords = np.indices(shape)
        self_conj = np.all([(2 * c) % m == 0 for c, m in zip(coords, shape)], axis=0)
        phase[self_conj] = np.pi * rng.integers(0, 2, size=int(self_conj.sum()))
    transfer = supports * xi.reshape((-1,) + (1,) * len(shape)) * np.exp(1j * phase)
    return SpectralFilterBank(shape, supports, xi, transfer)


@dataclass
class ConvModel:
    bank: SpectralFilterBank
    logits: np.ndarray
    grid: MeanGrid

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.shape != (self.bank.J, self.grid.L):
            raise ValueError("logits must have shape (J, L)")
        if not np.isfinite(self.logits).all():
            raise ValueError("logits must be finite")

    @property
    def log_weights(self):
        return log_softmax(self.logits, axis=1)

    def variances(self, t) -> np.ndarray:
        return self.grid.sigma0**2 + 2.0 * float(t) * self.bank.xi**2

    def _features(self, x):
        x = np.asarray(x, dtype=float)
        lead = x.shape[: x.ndim - len(self.bank.shape)]
        f = self.bank.apply(x).reshape(lead + (self.bank.J, self.bank.n))
        # (samples, J) layout for the mixture kernels: one row per pixel
        u = np.moveaxis(f, -1, -2).reshape(-1, self.bank.J)
        return lead, u

    def logpdf(self, x, t=0.0):
        """Unnormalised log-density; ``x`` has shape ``(..., *shape)``."""
        lead, u = self._features(x)
        var = np.broadcast_to(self.variances(t), u.shape)
        logpsi, _ = mixture_mean(u, var, self.log_weights, self.grid)
        out = logpsi.reshape(lead + (self.bank.n, self.bank.J)).sum(axis=(-1, -2))
        return out[()] if np.ndim(out) == 0 else out

    def expert_derivatives(self, x, t=0.0):
        """Per-feature score ``g`` and its derivative ``g'``, shape ``(..., J, *shape)``."""
        lead, u = self._features(x)
        var = np.broadcast_to(self.variances(t), u.shape)
        _, m1, c2, _ = mixture_moments(u, var, self.log_weights, self.grid)
        g = (m1 - u) / var
        gp = c2 / var**2 - 1.0 / var

        def back(a):
            a = a.reshape(lead + (self.bank.n, self.bank.J))
            return np.moveaxis(a, -1, -2).reshape(lead + (self.bank.J,) + tuple(self.bank.shape))

        return back(g), back(gp)

    def score(self, x, t=0.0):
        """Gradient of :meth:`logpdf`: ``sum_j K_j^T g_j(K_j x)``."""
        g, _ = self.expert_derivatives(x, t)
        return self.bank.adjoint(g)

    def heat_residual(self, x, t=0.0):
        """``(d/dt - Laplacian) f / f`` evaluated analytically.

        For an exact heat-equation solution this is zero; if ``f`` is exact up
        to a time-dependent normalisation it is constant in ``x``.
        """
        g, gp = self.expert_derivatives(x, t)
        xi2 = (self.bank.xi**2).reshape((-1,) + (1,) * len(self.bank.shape))
        nsq = self.bank.norms_sq.reshape(xi2.shape)
        grad = self.bank.adjoint(g)
        axes = tuple(range(-len(self.bank.shape) - 1, 0))
        dt = np.sum(xi2 * (gp + g**2), axis=axes)
        lap = np.sum(nsq * gp, axis=axes) + np.sum(grad**2, axis=axes[1:])
        return dt - lap


@dataclass
class DenseConvGmm:
    """Explicit homoscedastic GMM expansion of a convolutional model at ``t = 0``.

    ``log_weights`` absorb the per-component constants that remain after
    completing the square, so :meth:`logpdf` at ``t = 0`` reproduces the
    unnormalised product exactly.  Off the range of the precision the density
    is flat.
    """

    precision: np.ndarray  # (n, n)
    means: np.ndarray  # (C, n)
    log_weights: np.ndarray  # (C,)
    range_basis: np.ndarray  # (n, r)
    range_eigs: np.ndarray  # (r,) precision eigenvalues on the range

    def logpdf(self, x, t=0.0):
        """Exact heat-flow evolution of the ``t = 0`` expansion to time ``t``."""
        x = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.precision.shape[0]))
        V = self.range_basis
        cov0 = 1.0 / self.range_eigs
        cov_t = cov0 + 2.0 * t
        z = x @ V
        mz = self.means @ V
        diff = z[:, None, :] - mz[None]
        maha = np.sum(diff**2 / cov_t, axis=-1)
        # mass preserved by the heat flow: normalised Gaussian times the t=0 mass
        log_mass = 0.5 * np.sum(np.log(2.0 * np.pi * cov0))
        log_gauss = -0.5 * (maha + np.sum(np.log(2.0 * np.pi * cov_t)))
        return logsumexp(self.log_weights + log_mass + log_gauss, axis=1)


def dense_expansion(model: ConvModel, max_components: int = 2**16, wtol: float = 1e-300) -> DenseConvGmm:
    """Enumerate every per-(pixel, filter) component choice of the product.

    Components with weight below ``wtol`` are pruned before enumeration.
    """
    bank = model.bank
    n, J = bank.n, bank.J
    s0sq = model.grid.sigma0**2
    lw = model.log_weights
    active = [np.flatnonzero(np.exp(lw[j]) > wtol) for j in range(J)]
    count = 1
    for j in range(J):
        count *= len(active[j]) ** n
        if count > max_components:
            raise ValueError(f"dense expansion needs more than {max_components} components")
    Ks = bank.matrices()  # (J, n, n)
    P = np.einsum("jki,jkl->il", Ks, Ks) / s0sq
    evals, evecs = np.linalg.eigh(P)
    keep = evals > 1e-10 * evals.max()
    V, ev = evecs[:, keep], evals[keep]
    Pinv = (V / ev) @ V.T

    per_j = [np.array(list(itertools.product(active[j], repeat=n))).reshape(-1, n) for j in range(J)]
    combo = np.stack(np.meshgrid(*[np.arange(len(c)) for c in per_j], indexing="ij"), -1).reshape(-1, J)
    m = np.stack([model.grid.means[per_j[j][combo[:, j]]] for j in range(J)], axis=1)  # (C, J, n)
    logw = sum(lw[j, per_j[j]].sum(axis=1)[combo[:, j]] for j in range(J))
    rhs = np.einsum("jki,cjk->ci", Ks, m) / s0sq
    means = rhs @ Pinv.T
    const = np.sum(m**2, axis=(1, 2)) / (2.0 * s0sq) - 0.5 * np.einsum("ci,ci->c", means, rhs)
    logw += -0.5 * n * J * np.log(2.0 * np.pi * s0sq) - const
    return DenseConvGmm(P, means, logw, V, ev)


def verify(ns=range(4, 17), times=(0.0, 0.005, 0.02, 0.08), seed=0, n_points=16, rtol=1e-8):
    """Structural and diffusion checks on random 1-D banks with ``J = 2``.

    Returns a list of ``{"name", "n", "value", "passed"}`` records.  Diffusion
    is compared after removing the mean log-density over the test points,
    since the convolutional density is unnormalised.  Mixture-expert checks
    are skipped where the dense expansion would exceed ``2**16`` components.
    """
    rng = np.random.default_rng(seed)
    results = []

    def record(name, n, value, passed):
        results.append({"name": name, "n": int(n), "value": float(value), "passed": bool(passed)})

    for n in ns:
        J = 2
        bank = build_spectral_bank((n,), ring_partition((n,), J), rng.uniform(0.5, 2.0, size=J), rng)

        overlap = int(np.sum(np.sum(bank.supports, axis=0) > 1))
        F = np.fft.fft(bank.kernels, axis=1)
        cross = abs(np.vdot(F[0], F[1]))
        record("spectral_disjointness", n, overlap + cross, overlap == 0 and cross <= 1e-12)

        mag_dev = np.max(np.abs(np.abs(bank.transfer) - bank.xi[:, None] * bank.supports))
        record("constant_magnitude", n, mag_dev, mag_dev < 1e-10)

        Ks = bank.matrices()
        x = rng.standard_normal(n)
        lhs = np.einsum("jki,jkl,l->ji", Ks, Ks, x)
        rhs = np.real(np.fft.ifft(np.abs(bank.transfer) ** 2 * np.fft.fft(x), axis=1))
        diag_err = np.max(np.abs(lhs - rhs))
        record("fourier_diagonalization", n, diag_err, diag_err < 1e-10)

        pts = rng.standard_normal((n_points, n))
        # one active zero-mean component per expert: a Gaussian field
        gauss = ConvModel(bank, np.tile([-1e4, 0.0, -1e4], (J, 1)), MeanGrid(3, 1.0, 0.6))
        mix = ConvModel(bank, rng.normal(size=(J, 2)), MeanGrid(2, 1.0, 0.6))
        for label, model in (("gaussian", gauss), ("mixture", mix)):
            spread = 0.0
            for t in times:
                r = model.heat_residual(pts, t)
                spread = max(spread, np.ptp(r) / max(np.max(np.abs(r)), 1.0))
            record(f"heat_residual_spread_{label}", n, spread, spread < rtol)
            try:
                dense = dense_expansion(model)
            except ValueError:
                continue
            err0 = _rel_err(model.logpdf(pts, 0.0), dense.logpdf(pts, 0.0))
            record(f"dense_expansion_t0_{label}", n, err0, err0 < rtol)
            worst = max(_rel_err_centered(model.logpdf(pts, t), dense.logpdf(pts, t)) for t in times)
            record(f"diffusion_{label}", n, worst, worst < rtol)
    return results


def _rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)))


def _rel_err_centered(a, b):
    """Relative error after removing each side's mean (normalisation-free)."""
    a = np.asarray(a) - np.mean(a)
    b = np.asarray(b) - np.mean(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0))
