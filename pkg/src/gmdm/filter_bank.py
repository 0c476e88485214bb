"""Zero-mean filter banks and the orthogonality projection.

The projection finds the matrix with a diagonal Gram matrix closest to ``K``
in Frobenius norm, written as ``O @ diag(d)`` with ``O`` having orthonormal
columns.  It alternates two exact block minimisations:

* ``O``-step: ``O = U V^T`` from the thin SVD ``K diag(d) = U S V^T``, the
  polar factor that maximises ``<K diag(d), O>_F``;
* ``d``-step: ``d_i = max((O^T K)_ii, 0)``.

Both steps are exact minimisers of their sub-problem, so the objective
``||O diag(d) - K||_F^2`` never increases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10


class RankDeficientError(ValueError):
    """The filter matrix does not have full column rank."""

    def __init__(self, columns, smin, smax):
        self.columns = list(columns)
        super().__init__(
            f"filter matrix is rank deficient (sigma_min/sigma_max = {smin / smax:.3e}); "
            f"near-dependent columns: {self.columns}"
        )


@dataclass
class ProjectionTrace:
    """Per half-step objective and per-iteration orthogonality residual."""

    objective: list = field(default_factory=list)
    offdiag: list = field(default_factory=list)
    clamped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def is_monotone(self, rtol=1e-12) -> bool:
        obj = np.asarray(self.objective)
        if obj.size < 2:
            return True
        return bool(np.all(np.diff(obj) <= rtol * max(obj[0], 1.0)))


@dataclass
class FilterBank:
    """Filters stacked as the columns of an ``a x J`` matrix."""

    K: np.ndarray

    def __post_init__(self):
        self.K = np.array(self.K, dtype=float)
        if self.K.ndim != 2:
            raise ValueError("filter matrix must be 2-D (a x J)")
        if self.J > self.a:
            raise ValueError(f"more filters ({self.J}) than patch dimensions ({self.a})")

    @property
    def a(self) -> int:
        return self.K.shape[0]

    @property
    def J(self) -> int:
        return self.K.shape[1]

    @property
    def b(self) -> int | None:
        b = int(round(np.sqrt(self.a)))
        return b if b * b == self.a else None

    @property
    def norms_sq(self) -> np.ndarray:
        return np.einsum("ij,ij->j", self.K, self.K)

    def gram_offdiag_max(self) -> float:
        return gram_offdiag_max(self.K)

    def is_zero_mean(self, rtol=1e-10) -> bool:
        return bool(np.all(np.abs(self.K.sum(axis=0)) < rtol * np.sqrt(self.norms_sq)))

    def is_orthogonal(self, rtol=1e-8) -> bool:
        n = np.sqrt(self.norms_sq)
        G = self.K.T @ self.K
        np.fill_diagonal(G, 0.0)
        return bool(np.all(np.abs(G) <= rtol * np.outer(n, n)))


def gram_offdiag_max(K) -> float:
    """Largest off-diagonal magnitude of ``K^T K``."""
    K = np.asarray(K, dtype=float)
    if K.shape[1] < 2:
        return 0.0
    G = K.T @ K
    np.fill_diagonal(G, 0.0)
    return float(np.abs(G).max())


def check_full_rank(K):
    """Raise :class:`RankDeficientError` naming the near-dependent columns."""
    _, s, vt = np.linalg.svd(K, full_matrices=False)
    if s[-1] <= RANK_RTOL * s[0]:
        v = np.abs(vt[-1])
        cols = np.flatnonzero(v > 0.1 * v.max())
        raise RankDeficientError(cols.tolist(), s[-1], s[0])


def _objective(O, d, K):
    return float(np.sum((O * d - K) ** 2))


def orthogonalize(K, B: int = 3, *, tol: float | None = None, max_iter: int = 10_000):
    """Project ``K`` onto matrices with diagonal Gram matrix.

    Runs ``B`` rounds of (``O``-step, ``d``-step) starting from ``d = 1``.
    With ``tol`` set, ``B`` is ignored and rounds continue until the relative
    objective decrease drops below ``tol`` (or ``max_iter`` rounds).

    Returns ``(O @ diag(d), trace)``.  Columns whose scale was clamped to zero
    are listed in ``trace.clamped``.
    """
    K = np.asarray(K, dtype=float)
    a, J = K.shape
    if J > a:
        raise ValueError(f"need J <= a, got a={a}, J={J}")
    if B < 1:
        raise ValueError("need at least one iteration")
    check_full_rank(K)

    trace = ProjectionTrace()
    d = np.ones(J)
    rounds = max_iter if tol is not None else B
    prev = np.inf
    for _ in range(rounds):
        U, _, Vt = np.linalg.svd(K * d, full_matrices=False)
        O = U @ Vt
        trace.objective.append(_objective(O, d, K))
        d = np.maximum(np.einsum("ij,ij->j", O, K), 0.0)
        obj = _objective(O, d, K)
        trace.objective.append(obj)
        trace.offdiag.append(gram_offdiag_max(O * d))
        if tol is not None and prev - obj <= tol * max(obj, np.finfo(float).tiny):
            break
        prev = obj
    trace.clamped = np.flatnonzero(d == 0.0)
    if trace.clamped.size:
        log.warning("orthogonalize: %d column(s) clamped to zero norm: %s", trace.clamped.size, trace.clamped)
    return O * d, trace


def tangent_gradient_residual(K, P, rng: np.random.Generator, n_dirs: int = 32) -> float:
    """Largest ``|grad f(O) . M|`` over random unit tangents ``M`` at ``O``.

    ``P = O diag(d)`` is a projection result; ``f(O) = ||K||^2 - sum_i (O^T K)_ii^2``
    is the objective after eliminating ``d``.  Tangents of the orthonormal-column
    set at ``O`` have the form ``O A + (I - O O^T) B`` with ``A`` skew.
    """
    K = np.asarray(K, dtype=float)
    d = np.sqrt(np.einsum("ij,ij->j", P, P))
    if np.any(d == 0):
        raise ValueError("projection has zero columns; O is not determined")
    O = P / d
    grad = -2.0 * K * np.einsum("ij,ij->j", O, K)
    worst = 0.0
    for _ in range(n_dirs):
        A = rng.standard_normal((O.shape[1], O.shape[1]))
        A = A - A.T
        Bm = rng.standard_normal(O.shape)
        Bm -= O @ (O.T @ Bm)
        M = O @ A + Bm
        M /= np.linalg.norm(M)
        worst = max(worst, abs(float(np.sum(grad * M))))
    return worst


def subtract_mean(K) -> np.ndarray:
    return K - K.mean(axis=0, keepdims=True)


def project_filters(K, B: int = 3, rng: np.random.Generator | None = None):
    """Mean subtraction followed by orthogonalisation.

    Columns clamped to zero by the projection are replaced with small random
    zero-mean directions orthogonal to the remaining filters.
    """
    P, trace = orthogonalize(subtract_mean(K), B)
    if trace.clamped.size:
        P = _redraw_clamped(P, trace.clamped, rng or np.random.default_rng())
    return P, trace


def _redraw_clamped(P, cols, rng):
    P = P.copy()
    keep = np.setdiff1d(np.arange(P.shape[1]), cols)
    scale = np.sqrt(np.mean(np.einsum("ij,ij->j", P[:, keep], P[:, keep]))) if keep.size else 1.0
    basis = np.column_stack([np.ones(P.shape[0]) / np.sqrt(P.shape[0])] + [P[:, k] for k in keep])
    Q, _ = np.linalg.qr(basis)
    for c in cols:
        v = rng.standard_normal(P.shape[0])
        v -= Q @ (Q.T @ v)
        v *= 0.1 * scale / np.linalg.norm(v)
        P[:, c] = v
        Q = np.column_stack([Q, v / np.linalg.norm(v)])
    return P


def init_filters(b: int, seed=None, *, J: int | None = None, B: int = 3) -> FilterBank:
    """Random zero-mean, orthogonalised ``b x b`` filters (``J = b^2 - 1`` by default).

    Entries are drawn from ``N(0, b^-2)``.
    """
    if b < 2:
        raise ValueError(f"patch side must be >= 2, got {b}")
    a = b * b
    J = a - 1 if J is None else J
    if not 1 <= J <= a - 1:
        raise ValueError(f"zero-mean filters allow 1 <= J <= {a - 1}, got {J}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    while True:
        K = subtract_mean(rng.normal(0.0, 1.0 / b, size=(a, J)))
        try:
            P, trace = orthogonalize(K, B)
        except RankDeficientError:
            continue
        if trace.clamped.size == 0:
            return FilterBank(P)
