"""Product-of-GMM-experts density over image patches.

For pairwise-orthogonal filters the product

    f(p, t) = Z^-1 prod_j psi_j(<k_j, p>, w_j, t),   sigma_j^2(t) = sigma0^2 + ||k_j||^2 2t

is the heat-equation evolution of ``f(., 0)`` on ``span{k_j}``.  Everything
here acts on that span; the orthogonal complement (the patch mean, for
zero-mean filters) is unmodelled and passes through :meth:`PatchModel.eb_step`
unchanged.

Normalisation: with ``alpha_j`` the coordinate along ``k_j / ||k_j||`` the
response is ``<k_j, p> = ||k_j|| alpha_j``, so the density on the span needs
``Z^-1 = prod_j ||k_j||``.  :func:`dense_oracle` and quadrature tests confirm
this constant.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import log_softmax, logsumexp

from gmdm.filter_bank import FilterBank
from gmdm.gmm_core import Expert, MeanGrid, expert_sample, init_logits, mixture_mean

DEFAULT_DC = 0.5


class PatchModel:
    """Filters, expert logits and the shared mean grid.

    ``c_j = ||k_j||^2`` is always derived from the current filters, so it can
    never drift out of sync with them.
    """

    def __init__(self, bank: FilterBank | np.ndarray, logits, grid: MeanGrid, *, check=True):
        self.bank = bank if isinstance(bank, FilterBank) else FilterBank(bank)
        self.logits = np.array(logits, dtype=float)
        self.grid = grid
        if self.logits.shape != (self.J, grid.L):
            raise ValueError(f"logits must have shape ({self.J}, {grid.L}), got {self.logits.shape}")
        if check and not self.bank.is_orthogonal():
            raise ValueError(
                f"filters are not pairwise orthogonal (max |<k_i,k_j>| = {self.bank.gram_offdiag_max():.3e})"
            )
        if np.any(self.bank.norms_sq == 0):
            raise ValueError("filters must have non-zero norm")

    @classmethod
    def initial(cls, bank: FilterBank, grid: MeanGrid | None = None, alpha=1000.0):
        grid = grid or MeanGrid(125, 1.0)
        return cls(bank, np.tile(init_logits(grid, alpha), (bank.J, 1)), grid)

    def __repr__(self):
        return f"PatchModel(a={self.a}, J={self.J}, L={self.grid.L}, sigma0={self.grid.sigma0:.4g})"

    @property
    def K(self) -> np.ndarray:
        return self.bank.K

    @property
    def a(self) -> int:
        return self.bank.a

    @property
    def J(self) -> int:
        return self.bank.J

    @property
    def b(self):
        return self.bank.b

    @property
    def norms_sq(self) -> np.ndarray:
        return self.bank.norms_sq

    @property
    def log_weights(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)

    @property
    def experts(self) -> list[Expert]:
        return [Expert(z, c) for z, c in zip(self.logits, self.norms_sq)]

    @property
    def log_normalizer(self) -> float:
        """``log Z^-1 = sum_j log ||k_j||``."""
        return 0.5 * float(np.sum(np.log(self.norms_sq)))

    def param_count(self) -> int:
        return self.J * (self.a + self.grid.L)

    def variances(self, t) -> np.ndarray:
        """``sigma_j^2(t)`` with shape ``(N, J)`` for per-sample ``t`` or ``(1, J)``."""
        t = np.asarray(t, dtype=float)
        if np.any(~(t >= 0)):
            raise ValueError("diffusion time must be non-negative")
        return self.grid.sigma0**2 + 2.0 * np.reshape(t, (-1, 1)) * self.norms_sq

    def responses(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float) @ self.K

    def _expert_stats(self, p, t):
        p = np.asarray(p, dtype=float)
        flat = p.reshape(-1, self.a)
        u = flat @ self.K
        var = np.broadcast_to(self.variances(np.ravel(t) if np.ndim(t) else t), u.shape)
        logpsi, m1 = mixture_mean(u, var, self.log_weights, self.grid)
        return p.shape[:-1], u, var, logpsi, m1

    def logpdf(self, p, t=0.0):
        """Log-density on ``span{k_j}``; ``p`` has shape ``(..., a)``."""
        shape, _, _, logpsi, _ = self._expert_stats(p, t)
        out = (logpsi.sum(axis=1) + self.log_normalizer).reshape(shape)
        return out[()] if out.ndim == 0 else out

    def expert_logpdfs(self, p, t=0.0) -> np.ndarray:
        """Per-expert ``log psi_j(<k_j, p>, t)`` with shape ``(..., J)``."""
        shape, _, _, logpsi, _ = self._expert_stats(p, t)
        return logpsi.reshape(shape + (self.J,))

    def score(self, p, t=0.0) -> np.ndarray:
        """Gradient of :meth:`logpdf` in ``p``; lies in ``span{k_j}``."""
        shape, u, var, _, m1 = self._expert_stats(p, t)
        return (((m1 - u) / var) @ self.K.T).reshape(shape + (self.a,))

    def eb_step(self, y, t):
        """Posterior-mean (Tweedie) estimate ``y + 2t * score(y, t)``.

        ``t = 0`` returns ``y`` unchanged.
        """
        y = np.asarray(y, dtype=float)
        t_arr = np.asarray(t, dtype=float)
        if np.all(t_arr == 0):
            return y.copy()
        tt = t_arr.reshape(-1, 1) if t_arr.ndim else t_arr
        flat = y.reshape(-1, self.a)
        return (flat + 2.0 * tt * self.score(flat, t)).reshape(y.shape)

    def sample(self, t, rng: np.random.Generator, size: int | None = None, dc: float = DEFAULT_DC):
        """Draw patches ``sum_j k_j / ||k_j||^2 Z_j + dc`` with independent ``Z_j ~ psi_j``."""
        n = 1 if size is None else size
        z = np.column_stack([expert_sample(e, self.grid, t, rng, size=n) for e in self.experts])
        out = (z / self.norms_sq) @ self.K.T + dc
        return out[0] if size is None else out


@dataclass
class DenseGmm:
    """Homoscedastic GMM on ``span{k_j}`` (brute-force reference)."""

    means: np.ndarray  # (C, a)
    cov: np.ndarray  # (a, a), singular off the span when J < a
    log_weights: np.ndarray  # (C,)
    basis: np.ndarray  # (a, J) orthonormal basis of the span

    @property
    def weights(self):
        return np.exp(self.log_weights)

    def _span_params(self, t):
        Q = self.basis
        C = Q.T @ (self.cov + 2.0 * t * np.eye(self.cov.shape[0])) @ Q
        return self.means @ Q, C

    def logpdf(self, p, t=0.0):
        """Log-density of the GMM diffused to time ``t`` (covariance ``cov + 2t I``)."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        mz, C = self._span_params(t)
        z = p @ self.basis
        cf = cho_factor(C, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        diff = z[:, None, :] - mz[None, :, :]  # (N, C, J)
        maha = np.einsum("ncj,ncj->nc", diff, cho_solve(cf, diff.reshape(-1, C.shape[0]).T).T.reshape(diff.shape))
        comp = self.log_weights - 0.5 * (maha + logdet + C.shape[0] * np.log(2.0 * np.pi))
        return logsumexp(comp, axis=1)

    def posterior_mean(self, y, t):
        """``E[X | X + sqrt(2t) N = y]`` by component-wise Gaussian conditioning."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        mz, C0 = self._span_params(0.0)
        C = C0 + 2.0 * t * np.eye(C0.shape[0])
        z = y @ self.basis
        cf = cho_factor(C, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        diff = z[:, None, :] - mz[None, :, :]
        sol = cho_solve(cf, diff.reshape(-1, C.shape[0]).T).T.reshape(diff.shape)
        maha = np.einsum("ncj,ncj->nc", diff, sol)
        logpost = self.log_weights - 0.5 * (maha + logdet)
        post = np.exp(logpost - logsumexp(logpost, axis=1, keepdims=True))
        cond = mz[None] + np.einsum("ij,ncj->nci", C0, sol)  # mu_c + C0 C^-1 (z - mu_c)
        zhat = np.einsum("nc,nci->ni", post, cond)
        return y + (zhat - z) @ self.basis.T


def dense_oracle(model: PatchModel, max_components: int = 10_000) -> DenseGmm:
    """Expand the product of experts into its ``L^J``-component GMM at ``t = 0``."""
    L, J = model.grid.L, model.J
    if L**J > max_components:
        raise ValueError(f"dense expansion needs {L}^{J} components, more than {max_components}")
    K = model.K
    s0sq = model.grid.sigma0**2
    c = model.norms_sq
    khat = K / np.sqrt(c)
    cov = (khat * (s0sq / c)) @ khat.T
    idx = np.array(list(itertools.product(range(L), repeat=J)))  # (C, J)
    mu = model.grid.means[idx]  # (C, J)
    # completing the square: mean = cov @ sum_j k_j mu_j / sigma0^2
    means = (mu @ K.T) @ cov.T / s0sq
    lw = model.log_weights
    log_weights = lw[np.arange(J), idx].sum(axis=1)
    basis, _ = np.linalg.qr(K)
    return DenseGmm(means, cov, log_weights, basis)
