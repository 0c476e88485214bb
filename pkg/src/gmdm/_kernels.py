"""Compiled mixture kernels for batched expert evaluation.

All experts share one equidistant mean grid ``lo + l * delta`` and, per
sample, one variance.  Component terms are generated by a multiplicative
recurrence that walks outward from the mean nearest to ``x``; the walk stops
once the remaining terms cannot change the sum at double precision.  This
avoids one ``exp`` per component and makes the narrow-variance case (small
diffusion times) cheap.

Arrays are laid out as ``u[n, j]`` (sample, expert) and ``logw[j, l]``.
"""

import math

import numba
import numpy as np

# TBB in this ecosystem is often too old and numba warns on every import
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"

# terms below this fraction of the anchor term are dropped
_TRUNC = 1e-18
# below this log-ratio the precomputed weight table may underflow;
# such anchors take the exact fallback path
_WR_FLOOR = -600.0


@numba.njit(cache=True, nogil=True)
def _fill_terms(x, var, logw, wr, mx, lo, delta, buf, rho):
    """Write relative component terms into ``buf``; ``rho = exp(-delta^2 / var)``.

    Returns ``(l0, lmin, lmax, log_anchor)`` where ``buf[l]`` for
    ``lmin <= l <= lmax`` holds ``w_l G(x; mu_l, var) / (w_l0 G(x; mu_l0, var))``
    and ``log_anchor = log w_l0 - (x - mu_l0)^2 / (2 var)``.
    """
    L = logw.shape[0]
    l0 = int(math.floor((x - lo) / delta + 0.5)) if abs(x - lo) < 1e15 else (0 if x < lo else L - 1)
    if l0 < 0:
        l0 = 0
    elif l0 > L - 1:
        l0 = L - 1
    if logw[l0] - mx < _WR_FLOOR:
        # nearest component carries negligible weight: exact pass over all terms
        amax = -np.inf
        for l in range(L):
            r = x - (lo + l * delta)
            a = logw[l] - r * r / (2.0 * var)
            buf[l] = a
            if a > amax:
                amax = a
                l0 = l
        for l in range(L):
            buf[l] = math.exp(buf[l] - amax)
        return l0, 0, L - 1, amax
    xr = x - (lo + l0 * delta)
    log_anchor = logw[l0] - xr * xr / (2.0 * var)
    bound = 1.0 / wr[l0]
    buf[l0] = 1.0

    lmax = l0
    h_up = math.exp(min((xr * delta - 0.5 * delta * delta) / var, 700.0))
    # the downward ratio is rho / h_up unless h_up left the safe range
    if 1e-300 < h_up < 1e300:
        h_down = rho / h_up
    else:
        h_down = math.exp(min((-xr * delta - 0.5 * delta * delta) / var, 700.0))
    h = h_up
    g = 1.0
    for l in range(l0 + 1, L):
        g *= h
        h *= rho
        if g * bound < _TRUNC:
            break
        buf[l] = g * wr[l] * bound
        lmax = l

    lmin = l0
    h = h_down
    g = 1.0
    for l in range(l0 - 1, -1, -1):
        g *= h
        h *= rho
        if g * bound < _TRUNC:
            break
        buf[l] = g * wr[l] * bound
        lmin = l
    return l0, lmin, lmax, log_anchor


@numba.njit(cache=True, nogil=True)
def _walk_sums(x, var, logw, wr, mx, lo, delta, buf, rho):
    """Fused form of :func:`_fill_terms` followed by the zeroth and first sums.

    Returns ``(l0, log_anchor, s0, s1)`` with ``s0 = sum buf[l]`` and
    ``s1 = sum buf[l] * (l - l0)``.  Skipping the buffer lets the recurrence
    and the accumulators overlap, which roughly halves the cost per term.
    """
    L = logw.shape[0]
    l0 = int(math.floor((x - lo) / delta + 0.5)) if abs(x - lo) < 1e15 else (0 if x < lo else L - 1)
    if l0 < 0:
        l0 = 0
    elif l0 > L - 1:
        l0 = L - 1
    if logw[l0] - mx < _WR_FLOOR:
        l0, lmin, lmax, la = _fill_terms(x, var, logw, wr, mx, lo, delta, buf, rho)
        s0 = 0.0
        s1 = 0.0
        for l in range(lmin, lmax + 1):
            s0 += buf[l]
            s1 += buf[l] * (l - l0)
        return l0, la, s0, s1
    xr = x - (lo + l0 * delta)
    log_anchor = logw[l0] - xr * xr / (2.0 * var)
    bound = 1.0 / wr[l0]
    h_up = math.exp(min((xr * delta - 0.5 * delta * delta) / var, 700.0))
    if 1e-300 < h_up < 1e300:
        h_down = rho / h_up
    else:
        h_down = math.exp(min((-xr * delta - 0.5 * delta * delta) / var, 700.0))

    s0 = 1.0
    s1 = 0.0
    h = h_up
    g = 1.0
    for l in range(l0 + 1, L):
        g *= h
        h *= rho
        if g * bound < _TRUNC:
            break
        e = g * wr[l] * bound
        s0 += e
        s1 += e * (l - l0)

    h = h_down
    g = 1.0
    for l in range(l0 - 1, -1, -1):
        g *= h
        h *= rho
        if g * bound < _TRUNC:
            break
        e = g * wr[l] * bound
        s0 += e
        s1 += e * (l - l0)
    return l0, log_anchor, s0, s1


@numba.njit(cache=True, nogil=True, parallel=True)
def mixture_moments(u, var, logw, lo, delta):
    """Log-density and responsibility moments of the mean grid.

    Returns ``logpsi, m1, c2, c3``: the mixture log-density, the
    responsibility-weighted mean of the component means, and its second and
    third central moments.
    """
    N, J = u.shape
    L = logw.shape[1]
    logpsi = np.empty((N, J))
    m1 = np.empty((N, J))
    c2 = np.empty((N, J))
    c3 = np.empty((N, J))
    for j in numba.prange(J):
        row = logw[j]
        mx = row.max()
        wr = np.exp(row - mx)
        buf = np.empty(L)
        v_last = -1.0
        rho = half_log = 0.0
        for n in range(N):
            x = u[n, j]
            v = var[n, j]
            if v != v_last:
                v_last = v
                rho = math.exp(-delta * delta / v)
                half_log = 0.5 * math.log(2.0 * math.pi * v)
            l0, lmin, lmax, la = _fill_terms(x, v, row, wr, mx, lo, delta, buf, rho)
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            s3 = 0.0
            for l in range(lmin, lmax + 1):
                e = buf[l]
                d = (l - l0) * delta
                s0 += e
                s1 += e * d
                s2 += e * d * d
                s3 += e * d * d * d
            logpsi[n, j] = la + math.log(s0) - half_log
            md = s1 / s0
            e2 = s2 / s0
            m1[n, j] = lo + l0 * delta + md
            c2[n, j] = max(e2 - md * md, 0.0)
            c3[n, j] = s3 / s0 - 3.0 * md * e2 + 2.0 * md * md * md
    return logpsi, m1, c2, c3


@numba.njit(cache=True, nogil=True, parallel=True)
def mixture_mean(u, var, logw, lo, delta):
    """Cheaper variant of :func:`mixture_moments` returning ``logpsi, m1``.

    Meant for large ``N`` (whole images), so the work runs on ``(J, N)``
    copies: walking ``u[:, j]`` with stride ``J`` misses cache on every sample.
    """
    N, J = u.shape
    L = logw.shape[1]
    uT = np.ascontiguousarray(u.T)
    varT = np.ascontiguousarray(var.T)
    logpsi = np.empty((J, N))
    m1 = np.empty((J, N))
    for j in numba.prange(J):
        row = logw[j]
        mx = row.max()
        wr = np.exp(row - mx)
        buf = np.empty(L)
        v_last = -1.0
        rho = half_log = 0.0
        for n in range(N):
            v = varT[j, n]
            if v != v_last:
                v_last = v
                rho = math.exp(-delta * delta / v)
                half_log = 0.5 * math.log(2.0 * math.pi * v)
            l0, la, s0, s1 = _walk_sums(uT[j, n], v, row, wr, mx, lo, delta, buf, rho)
            logpsi[j, n] = la + math.log(s0) - half_log
            m1[j, n] = lo + (l0 + s1 / s0) * delta
    return np.ascontiguousarray(logpsi.T), np.ascontiguousarray(m1.T)


@numba.njit(cache=True, nogil=True, parallel=True)
def logit_gradient(u, var, logw, lo, delta, m1, coef):
    """Accumulate ``sum_n coef[n, j] * r[n, j, m] * (mu_m - m1[n, j])``.

    This is the chain rule through the responsibilities into the
    unconstrained logits, softmax Jacobian included.
    """
    N, J = u.shape
    L = logw.shape[1]
    out = np.zeros((J, L))
    for j in numba.prange(J):
        row = logw[j]
        mx = row.max()
        wr = np.exp(row - mx)
        buf = np.empty(L)
        acc = np.zeros(L)
        v_last = -1.0
        rho = 0.0
        for n in range(N):
            c = coef[n, j]
            if c == 0.0:
                continue
            v = var[n, j]
            if v != v_last:
                v_last = v
                rho = math.exp(-delta * delta / v)
            l0, lmin, lmax, la = _fill_terms(u[n, j], v, row, wr, mx, lo, delta, buf, rho)
            s0 = 0.0
            for l in range(lmin, lmax + 1):
                s0 += buf[l]
            scale = c / s0
            mref = m1[n, j]
            for l in range(lmin, lmax + 1):
                acc[l] += scale * buf[l] * (lo + l * delta - mref)
        out[j] = acc
    return out

