"""Image denoising and noise estimation with a trained patch model.

Images are 2-D float arrays in ``[0, 1]``.  Noise levels are standard
deviations ``s`` of additive Gaussian noise; the model is queried at the
matching diffusion time ``t = s^2 / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from gmdm.gmm_core import time_from_std

PSNR_CAP = 99.0
CHUNK = 1 << 15
# noise maps are stored as 16-bit PGM holding sigma * NOISE_MAP_SCALE
NOISE_MAP_SCALE = 2.0


def default_noise_grid(n: int = 128, lo: float = 0.005, hi: float = 0.4) -> np.ndarray:
    return np.linspace(lo, hi, n)


def check_image(y, b: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {y.shape}")
    if y.shape[0] < b or y.shape[1] < b:
        raise ValueError(f"image {y.shape[0]}x{y.shape[1]} is smaller than the patch side {b}")
    if not np.isfinite(y).all():
        raise ValueError("image contains non-finite values")
    return y


def _patch_side(model) -> int:
    if model.b is None:
        raise ValueError("model filters are not square patches")
    return model.b


def extract_patches(img, b: int, stride: int = 1) -> np.ndarray:
    """Patches at rows/cols ``0, stride, ...`` as an array ``(nr, nc, b*b)``."""
    v = np.lib.stride_tricks.sliding_window_view(img, (b, b))[::stride, ::stride]
    return v.reshape(v.shape[0], v.shape[1], b * b)


def recompose(est, shape, b: int, stride: int = 1, fallback=None) -> np.ndarray:
    """Average overlapping patch estimates ``(nr, nc, b*b)`` into an image.

    Pixels no patch covers take their value from ``fallback``.
    """
    nr, nc = est.shape[:2]
    est = est.reshape(nr, nc, b, b)
    acc = np.zeros(shape)
    cnt = np.zeros(shape)
    rs, cs = stride * (nr - 1) + 1, stride * (nc - 1) + 1
    for di in range(b):
        for dj in range(b):
            acc[di : di + rs : stride, dj : dj + cs : stride] += est[:, :, di, dj]
            cnt[di : di + rs : stride, dj : dj + cs : stride] += 1.0
    covered = cnt > 0
    out = np.where(covered, acc / np.maximum(cnt, 1.0), 0.0)
    if not covered.all():
        if fallback is None:
            raise ValueError("some pixels are covered by no patch and no fallback was given")
        out[~covered] = np.asarray(fallback)[~covered]
    return out


def _eb_patches(model, P, t):
    """EB step over a flat patch stack in chunks; ``t`` scalar or per patch."""
    out = np.empty_like(P)
    t = np.asarray(t, dtype=float)
    for i in range(0, P.shape[0], CHUNK):
        ti = t if t.ndim == 0 else t[i : i + CHUNK]
        out[i : i + CHUNK] = model.eb_step(P[i : i + CHUNK], ti)
    return out


def eb_patch_average(y, sigma: float, model, stride: int = 1) -> np.ndarray:
    """One EB step on every patch, overlaps averaged with uniform weights (no clipping)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    b = _patch_side(model)
    y = check_image(y, b)
    P = extract_patches(y, b, stride)
    est = _eb_patches(model, P.reshape(-1, b * b), time_from_std(sigma))
    return recompose(est.reshape(P.shape), y.shape, b, stride, fallback=y)


@dataclass
class HqsSchedule:
    """Strictly decreasing levels ``s_k``; penalties ``beta_k = s_k^-2``."""

    levels: np.ndarray
    sigma: float

    def __post_init__(self):
        self.levels = np.atleast_1d(np.asarray(self.levels, dtype=float))
        if self.levels.size < 1 or np.any(~(self.levels > 0)):
            raise ValueError("HQS levels must be positive")
        if np.any(np.diff(self.levels) >= 0):
            raise ValueError("HQS levels must be strictly decreasing")
        if not self.sigma > 0:
            raise ValueError("data-fidelity sigma must be positive")

    @classmethod
    def default(cls, sigma: float, n: int = 8, hi: float = 2.0, lo: float = 0.25):
        """``n`` levels log-spaced from ``hi * sigma`` down to ``lo * sigma``."""
        if n == 1:
            return cls([sigma], sigma)
        return cls(np.geomspace(hi * sigma, lo * sigma, n), sigma)

    @property
    def betas(self) -> np.ndarray:
        return self.levels**-2.0


def hqs_update(y, z, sigma: float, beta: float) -> np.ndarray:
    """Closed-form data step ``argmin_x |x - y|^2 / (2 sigma^2) + beta/2 |x - z|^2``."""
    w = 1.0 / sigma**2
    return (w * y + beta * z) / (w + beta)


def hqs_denoise(y, sigma: float, model, schedule: HqsSchedule | None = None, stride: int = 1) -> np.ndarray:
    """Half-quadratic splitting with one EB-PA step as the prior proximal map."""
    schedule = schedule or HqsSchedule.default(sigma)
    y = check_image(y, _patch_side(model))
    x = y
    for s, beta in zip(schedule.levels, schedule.betas):
        z = eb_patch_average(x, s, model, stride)
        x = hqs_update(y, z, sigma, beta)
    return np.clip(x, 0.0, 1.0)


def neg_logpdf_curve(model, P, s_grid) -> np.ndarray:
    """``-logpdf`` of each patch at every grid level, shape ``(len(s_grid), N)``."""
    out = np.empty((len(s_grid), P.shape[0]))
    for k, s in enumerate(s_grid):
        t = time_from_std(s)
        for i in range(0, P.shape[0], CHUNK):
            out[k, i : i + CHUNK] = -model.logpdf(P[i : i + CHUNK], t)
    return out


def _check_grid(s_grid):
    s_grid = np.asarray(s_grid, dtype=float)
    if s_grid.ndim != 1 or s_grid.size < 2:
        raise ValueError("noise grid needs at least 2 points")
    if np.any(s_grid < 0) or np.any(np.diff(s_grid) <= 0):
        raise ValueError("noise grid must be non-negative and increasing")
    return s_grid


def estimate_noise_global(y, model, s_grid=None, *, max_patches: int | None = 20000, rng=None):
    """Grid level minimising the mean ``-logpdf`` over patches.

    Returns ``(s_star, curve)``; ``curve`` is the raw mean over patches (shift
    it by its minimum for plotting).  With ``max_patches`` set, a random subset
    of patch locations is used.
    """
    s_grid = _check_grid(default_noise_grid() if s_grid is None else s_grid)
    b = _patch_side(model)
    P = extract_patches(check_image(y, b), b).reshape(-1, b * b)
    if max_patches is not None and P.shape[0] > max_patches:
        rng = rng if rng is not None else np.random.default_rng(0)
        P = P[np.sort(rng.choice(P.shape[0], max_patches, replace=False))]
    curve = neg_logpdf_curve(model, P, s_grid).mean(axis=1)
    return float(s_grid[np.argmin(curve)]), curve


def _covering_median(pmap, shape, b: int, stride: int):
    """Median over all computed patches covering each pixel."""
    H, W = shape
    full = np.full((H - b + 1, W - b + 1), np.nan)
    full[::stride, ::stride] = pmap
    pad = np.full((H + b - 1, W + b - 1), np.nan)
    pad[b - 1 : b - 1 + full.shape[0], b - 1 : b - 1 + full.shape[1]] = full
    stack = np.stack(
        [pad[b - 1 - di : b - 1 - di + H, b - 1 - dj : b - 1 - dj + W] for di in range(b) for dj in range(b)]
    )
    return np.nanmedian(stack, axis=0)


def estimate_noise_map(y, model, s_grid=None, window: int | None = None, stride: int = 1) -> np.ndarray:
    """Per-pixel noise std: per-patch argmin, median over covering patches, box smoothing."""
    s_grid = _check_grid(default_noise_grid() if s_grid is None else s_grid)
    b = _patch_side(model)
    window = 2 * b + 1 if window is None else window
    if window < b:
        raise ValueError(f"window must be >= patch side {b}")
    y = check_image(y, b)
    if stride > b:
        raise ValueError("stride larger than the patch side leaves pixels uncovered")
    P = extract_patches(y, b, stride)
    nll = neg_logpdf_curve(model, P.reshape(-1, b * b), s_grid)
    pmap = s_grid[np.argmin(nll, axis=0)].reshape(P.shape[:2])
    med = _covering_median(pmap, y.shape, b, stride)
    return np.maximum(uniform_filter(med, size=window, mode="nearest"), 0.0)


def denoise_with_map(y, noise_map, model, stride: int = 1) -> np.ndarray:
    """EB-PA where each patch uses the mean of ``noise_map`` over its footprint."""
    b = _patch_side(model)
    y = check_image(y, b)
    noise_map = np.asarray(noise_map, dtype=float)
    if noise_map.shape != y.shape:
        raise ValueError("noise map and image shapes differ")
    P = extract_patches(y, b, stride)
    s_patch = extract_patches(noise_map, b, stride).mean(axis=2).ravel()
    est = _eb_patches(model, P.reshape(-1, b * b), time_from_std(s_patch))
    return recompose(est.reshape(P.shape), y.shape, b, stride, fallback=y)


def blind_denoise(y, model, s_grid=None, window: int | None = None, stride: int = 1) -> np.ndarray:
    """Estimate a noise map, then denoise with it."""
    nmap = estimate_noise_map(y, model, s_grid, window, stride)
    return denoise_with_map(y, nmap, model, stride)


def psnr(x, ref) -> float:
    """Peak signal-to-noise ratio for peak 1; identical images give ``PSNR_CAP``."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def checkerboard_sigma(shape, block: int, levels=(0.1, 0.2)) -> np.ndarray:
    """Per-pixel noise std alternating between two levels on square blocks."""
    r = np.arange(shape[0])[:, None] // block
    c = np.arange(shape[1])[None, :] // block
    return np.where((r + c) % 2 == 0, levels[0], levels[1])
