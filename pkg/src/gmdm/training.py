"""Denoising score matching for the patch model.

Per patch ``x`` a noise level ``s = sqrt(2t) ~ U[0, s_max]`` and ``eta ~ N(0, I)``
are drawn, ``y = x + s eta``, and the residual

    r = P0 (x - y) - s^2 score(y, t)

is penalised by ``||r||^p`` (``p = 2`` by default).  ``P0`` removes the patch
mean, which the zero-mean filters cannot model.  Gradients with respect to the
filters and the logits are accumulated by hand; the per-expert derivatives
need the second and third central moments of the responsibilities, which the
compiled kernels provide.

The optimiser is an inertial proximal alternating scheme with two blocks:
filters (prox = mean removal + orthogonalisation) and logits (no prox).  Each
block keeps its own Lipschitz estimate, doubled on a failed sufficient-decrease
test and relaxed slightly after every accepted step.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

from gmdm import _kernels
from gmdm.filter_bank import FilterBank, gram_offdiag_max, init_filters, project_filters
from gmdm.gmm_core import MeanGrid, init_logits

log = logging.getLogger(__name__)

DIHEDRAL = 8


@dataclass
class TrainConfig:
    b: int = 7
    steps: int = 100_000
    batch: int = 3200
    s_max: float = 0.4
    seed: int = 0
    J: int | None = None
    L: int = 125
    gamma: float = 1.0
    alpha: float = 1000.0
    inertia: float = 0.8
    step0: float = 1e-2
    backtrack: float = 2.0
    relax: float = 0.95
    step_max: float = 1e3
    B: int = 3
    loss_power: float = 2.0
    stratified: bool = False
    log_every: int = 100
    checkpoint_every: int = 1000
    checkpoint: str | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.s_max > 0:
            raise ValueError("s_max must be positive")
        if self.B < 1:
            raise ValueError("projection iterations B must be >= 1")
        if not 0.0 <= self.inertia < 1.0:
            raise ValueError("inertia must lie in [0, 1)")
        if not self.step0 > 0 or not self.backtrack > 1 or not 0 < self.relax <= 1:
            raise ValueError("need step0 > 0, backtrack > 1 and 0 < relax <= 1")
        if not self.step_max >= self.step0:
            raise ValueError("step_max must be >= step0")
        if not self.loss_power > 0:
            raise ValueError("loss_power must be positive")


# ---------------------------------------------------------------- data


class PatchDataset:
    """Grayscale images in ``[0, 1]`` with uniform patch locations and dihedral augmentation."""

    def __init__(self, images, b: int, names=None, augment: bool = True):
        self.b = int(b)
        self.augment = augment
        self._patches = None
        names = list(names) if names is not None else [f"image{i}" for i in range(len(images))]
        self.images = []
        self.names = []
        for name, img in zip(names, images):
            img = np.asarray(img, dtype=float)
            if img.ndim != 2:
                raise ValueError(f"{name}: expected a grayscale image, got shape {img.shape}")
            if img.shape[0] < self.b or img.shape[1] < self.b:
                log.warning("skipping %s: %dx%d is smaller than the patch side %d", name, *img.shape, self.b)
                continue
            if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
                raise ValueError(f"{name}: intensities must be finite and in [0, 1]")
            self.images.append(img)
            self.names.append(name)
        if not self.images:
            raise ValueError(f"no image is at least {self.b}x{self.b}")
        self._views = [np.lib.stride_tricks.sliding_window_view(im, (self.b, self.b)) for im in self.images]
        counts = np.array([v.shape[0] * v.shape[1] for v in self._views], dtype=float)
        self._probs = counts / counts.sum()

    @classmethod
    def from_patches(cls, patches, b: int, augment: bool = False):
        """Dataset drawing rows of a fixed patch matrix ``(N, b*b)``.

        Intended for synthetic data, so intensities are only required to be finite.
        """
        patches = np.asarray(patches, dtype=float)
        if patches.ndim != 2 or patches.shape[1] != b * b or patches.shape[0] == 0:
            raise ValueError(f"expected a non-empty (N, {b * b}) patch matrix")
        if not np.isfinite(patches).all():
            raise ValueError("patches must be finite")
        ds = cls.__new__(cls)
        ds.b, ds.augment, ds.names = int(b), augment, ["patches"]
        ds.images = [patches]
        ds._patches = patches
        ds._views, ds._probs = [], np.ones(1)
        return ds

    @classmethod
    def from_directory(cls, directory, b: int):
        from gmdm.metrics_io import image_files, read_image

        files = image_files(directory)
        if not files:
            raise ValueError(f"no images found in {directory}")
        return cls([read_image(f) for f in files], b, names=[f.name for f in files])

    def __len__(self):
        return len(self.images)

    @property
    def n_locations(self) -> int:
        if self._patches is not None:
            return self._patches.shape[0]
        return int(sum(v.shape[0] * v.shape[1] for v in self._views))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for im in self.images:
            h.update(np.ascontiguousarray(im).tobytes())
        return h.hexdigest()[:16]

    def all_patches(self) -> np.ndarray:
        """Every patch location without augmentation, as rows of length ``b^2``."""
        if self._patches is not None:
            return self._patches
        return np.concatenate([v.reshape(-1, self.b * self.b) for v in self._views])


def dihedral(p: np.ndarray, k: int) -> np.ndarray:
    """Apply the ``k``-th of the 8 square symmetries to the trailing two axes."""
    out = np.rot90(p, k % 4, axes=(-2, -1))
    return out[..., ::-1] if k >= 4 else out


def draw_batch(dataset: PatchDataset, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Patches at i.i.d. uniform locations with i.i.d. uniform dihedral transforms."""
    b = dataset.b
    if dataset._patches is not None:
        out = dataset._patches[rng.integers(0, dataset._patches.shape[0], size=batch)].reshape(batch, b, b)
    else:
        out = _draw_locations(dataset, batch, rng)
    if dataset.augment:
        k = rng.integers(0, DIHEDRAL, size=batch)
        for t in range(1, DIHEDRAL):
            sel = k == t
            if sel.any():
                out[sel] = dihedral(out[sel], t)
    return out.reshape(batch, b * b)


def _draw_locations(dataset, batch, rng):
    b = dataset.b
    which = rng.choice(len(dataset._views), size=batch, p=dataset._probs)
    out = np.empty((batch, b, b))
    for i in np.unique(which):
        idx = np.flatnonzero(which == i)
        v = dataset._views[i]
        r = rng.integers(0, v.shape[0], size=idx.size)
        c = rng.integers(0, v.shape[1], size=idx.size)
        out[idx] = v[r, c]
    return out


# ---------------------------------------------------------------- loss


@dataclass
class Noise:
    """Noise draw for a batch: per-sample level ``s`` and standard normal ``eta``."""

    s: np.ndarray
    eta: np.ndarray


def draw_noise(n: int, a: int, rng: np.random.Generator, s_max: float, stratified: bool = False) -> Noise:
    u = rng.random(n)
    if stratified:
        u = (rng.permutation(n) + u) / n
    return Noise(s_max * u, rng.standard_normal((n, a)))


@dataclass
class DsmGrad:
    K: np.ndarray
    logits: np.ndarray


def _dsm(K, logits, grid: MeanGrid, x, noise: Noise, power=2.0, grad=True):
    """Loss (and gradients) at arbitrary, not necessarily orthogonal, filters.

    ``grad`` is ``True`` for both gradients, ``"K"`` or ``"logits"`` for one
    block only (the other field of the result is then ``None``), or ``False``.
    """
    x = np.asarray(x, dtype=float)
    s = noise.s
    tau = s * s  # 2t
    eta0 = noise.eta - noise.eta.mean(axis=1, keepdims=True)
    y = x + s[:, None] * noise.eta
    c = np.einsum("ij,ij->j", K, K)
    u = y @ K
    v = grid.sigma0**2 + tau[:, None] * c
    logw = np.ascontiguousarray(log_softmax(logits, axis=1))
    lo, delta = -grid.gamma, grid.spacing
    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(v)
    if grad is True or grad == "K":
        _, m1, c2, c3 = _kernels.mixture_moments(u, v, logw, lo, delta)
    else:
        _, m1 = _kernels.mixture_mean(u, v, logw, lo, delta)
    g = (m1 - u) / v
    r = -s[:, None] * eta0 - tau[:, None] * (g @ K.T)
    q = np.einsum("ij,ij->i", r, r)
    n = x.shape[0]
    if power == 2.0:
        loss = float(q.mean())
    else:
        loss = float(np.mean(q ** (0.5 * power)))
    if not grad:
        return loss, None

    if power == 2.0:
        dr = (2.0 / n) * r
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(q > 0, power * q ** (0.5 * power - 1.0), 0.0)
        dr = (w / n)[:, None] * r
    tdr = tau[:, None] * dr
    G = -(tdr @ K)  # dL/dg
    dZ = dK = None
    if grad is True or grad == "logits":
        dZ = _kernels.logit_gradient(u, v, logw, lo, delta, m1, np.ascontiguousarray(G / v))
    if grad == "logits":
        return loss, DsmGrad(dK, dZ)

    dK = -(tdr.T @ g)
    m = m1 - u
    dg_du = c2 / v**2 - 1.0 / v
    dm1_dv = (c3 + 2.0 * m * c2) / (2.0 * v**2)
    dg_dv = dm1_dv / v - m / v**2
    dL_du = G * dg_du
    dL_dv = G * dg_dv
    dK += y.T @ dL_du
    dK += 2.0 * K * (tau @ dL_dv)
    return loss, DsmGrad(dK, dZ)


def dsm_loss(model, patches, rng: np.random.Generator | None = None, *, noise: Noise | None = None,
             s_max: float = 0.4, power: float = 2.0, stratified: bool = False):
    """Batch-mean DSM loss and its gradients with respect to filters and logits.

    Pass ``noise`` to evaluate at a fixed draw (finite-difference checks, line
    searches); otherwise it is drawn from ``rng``.
    """
    patches = np.asarray(patches, dtype=float)
    if noise is None:
        if rng is None:
            raise ValueError("need either rng or noise")
        noise = draw_noise(patches.shape[0], patches.shape[1], rng, s_max, stratified)
    return _dsm(model.K, model.logits, model.grid, patches, noise, power)


def gaussian_expected_loss(sigma0: float, c, s_max: float) -> float:
    """Expected squared-residual loss for a single zero-mean Gaussian per expert.

    With data drawn from the model and ``J = a - 1``, the residual is the
    posterior error on the span, so the expectation over ``s ~ U[0, s_max]``
    is the averaged posterior-variance trace.
    """
    from scipy.integrate import quad

    prior = sigma0**2 / np.asarray(c, dtype=float)

    def trace(s):
        return float(np.sum(prior * s * s / (prior + s * s)))

    return quad(trace, 0.0, s_max, epsabs=1e-14, epsrel=1e-12)[0] / s_max


# ---------------------------------------------------------------- optimiser


@dataclass
class TrainState:
    K: np.ndarray
    logits: np.ndarray
    K_prev: np.ndarray
    logits_prev: np.ndarray
    lip_K: float
    lip_Z: float
    step: int = 0


@dataclass
class TrainResult:
    model: object
    trace: list = field(default_factory=list)  # (step, loss)
    seconds: float = 0.0


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_model, trace):
        self.step = step
        self.last_model = last_model
        self.trace = trace
        super().__init__(f"loss became non-finite at step {step}; returning the last checkpoint")


def _block_step(f, x, x_prev, inertia, lip, backtrack, prox, max_tries=40):
    """One inertial proximal gradient step with backtracking on the block Lipschitz constant.

    ``f(z, grad)`` returns ``(loss, gradient or None)``.  Returns
    ``(new point, lip, loss at extrapolated point)``.
    """
    z = x + inertia * (x - x_prev)
    fz, gz = f(z, True)
    if not math.isfinite(fz):
        return None, lip, fz
    for _ in range(max_tries):
        cand = prox(z - gz / lip)
        d = cand - z
        fc, _ = f(cand, False)
        if math.isfinite(fc) and fc <= fz + np.sum(gz * d) + 0.5 * lip * np.sum(d * d):
            return cand, lip, fz
        lip *= backtrack
    return cand, lip, fz


def initial_model(config: TrainConfig, rng: np.random.Generator):
    from gmdm.patch_model import PatchModel

    grid = MeanGrid(config.L, config.gamma)
    bank = init_filters(config.b, rng, J=config.J, B=config.B)
    return PatchModel(bank, np.tile(init_logits(grid, config.alpha), (bank.J, 1)), grid)


def train(dataset: PatchDataset, config: TrainConfig, *, model=None, callback=None) -> TrainResult:
    """Optimise filters and logits by alternating inertial proximal steps.

    Every accepted filter update is mean-subtracted and orthogonalised, so
    each intermediate model satisfies the model invariants.  ``callback(step,
    loss, model)`` runs at every logging step.
    """
    from gmdm.metrics_io import save_model
    from gmdm.patch_model import PatchModel

    if dataset.b != config.b:
        raise ValueError(f"dataset patch side {dataset.b} != config.b {config.b}")
    rng = np.random.default_rng(config.seed)
    model = model or initial_model(config, rng)
    grid = model.grid
    st = TrainState(model.K.copy(), model.logits.copy(), model.K.copy(), model.logits.copy(),
                    1.0 / config.step0, 1.0 / config.step0)
    meta = {"seed": config.seed, "data_hash": dataset.fingerprint(), "config": asdict(config)}
    result = TrainResult(model)
    last_good = model
    window = []
    t0 = time.perf_counter()

    def prox_K(K):
        return project_filters(K, config.B, rng)[0]

    for step in range(1, config.steps + 1):
        x = draw_batch(dataset, config.batch, rng)
        noise = draw_noise(x.shape[0], x.shape[1], rng, config.s_max, config.stratified)

        def f_K(K, want):
            loss, g = _dsm(K, st.logits, grid, x, noise, config.loss_power, want and "K")
            return loss, (g.K if want else None)

        K_new, st.lip_K, _ = _block_step(f_K, st.K, st.K_prev, config.inertia, st.lip_K, config.backtrack, prox_K)
        if K_new is None:
            raise TrainingDiverged(step, last_good, result.trace)

        def f_Z(Z, want):
            loss, g = _dsm(K_new, Z, grid, x, noise, config.loss_power, want and "logits")
            return loss, (g.logits if want else None)

        Z_new, st.lip_Z, loss = _block_step(f_Z, st.logits, st.logits_prev, config.inertia, st.lip_Z,
                                            config.backtrack, lambda z: z)
        if Z_new is None or not np.isfinite(Z_new).all() or not np.isfinite(K_new).all():
            raise TrainingDiverged(step, last_good, result.trace)

        st.K_prev, st.K = st.K, K_new
        st.logits_prev, st.logits = st.logits, Z_new
        st.lip_K = max(st.lip_K * config.relax, 1.0 / config.step_max)
        st.lip_Z = max(st.lip_Z * config.relax, 1.0 / config.step_max)
        st.step = step
        window.append(loss)

        if step % config.log_every == 0 or step == config.steps:
            mean_loss = float(np.mean(window))
            window.clear()
            result.trace.append((step, mean_loss))
            log.info("step %d  loss %.6g  1/lipK %.3g  1/lipZ %.3g  offdiag %.2e",
                     step, mean_loss, 1 / st.lip_K, 1 / st.lip_Z, gram_offdiag_max(st.K))
            if callback is not None:
                callback(step, mean_loss, PatchModel(FilterBank(st.K), st.logits, grid))
        if step % config.checkpoint_every == 0 or step == config.steps:
            last_good = PatchModel(FilterBank(st.K.copy()), st.logits.copy(), grid)
            if config.checkpoint:
                save_model(last_good, config.checkpoint, {**meta, "steps": step})
                write_trace(Path(config.checkpoint).with_suffix(".loss.csv"), result.trace)

    result.model = PatchModel(FilterBank(st.K), st.logits, grid)
    result.seconds = time.perf_counter() - t0
    return result


def write_trace(path, trace):
    from gmdm.metrics_io import write_csv

    write_csv(path, ["step", "loss"], trace)
