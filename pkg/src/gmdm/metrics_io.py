"""Model and image files, CSV output, response histograms and the NMSE fit metric.

Model file (``.gmdm``): UTF-8 JSON with the keys

    format     "gmdm"          version  1
    b, J, L    integers         gamma, sigma0   floats
    filters    a x J nested list (row-major)
    logits     J x L nested list
    meta       free-form provenance (seed, steps, data hash, ...)

Floats are written with Python's shortest round-trip ``repr``, so a
save/load cycle reproduces every parameter bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gmdm.filter_bank import FilterBank
from gmdm.gmm_core import MeanGrid, expert_cdf, expert_logpdf
from gmdm.patch_model import PatchModel

FORMAT_NAME = "gmdm"
FORMAT_VERSION = 1


class ParseError(ValueError):
    """Malformed input file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int, path=None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte {offset})")


# ---------------------------------------------------------------- models


def model_to_dict(model: PatchModel, meta: dict | None = None) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "b": model.b,
        "J": model.J,
        "L": model.grid.L,
        "gamma": model.grid.gamma,
        "sigma0": model.grid.sigma0,
        "filters": model.K.tolist(),
        "logits": model.logits.tolist(),
        "meta": dict(meta or {}),
    }


def save_model(model: PatchModel, path, meta: dict | None = None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, meta), fh, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def _json_error_offset(text: str, err: json.JSONDecodeError) -> int:
    return len(text[: err.pos].encode("utf-8"))


def model_from_dict(d: dict, path=None) -> PatchModel:
    def fail(msg):
        raise ParseError(msg, 0, path)

    if d.get("format") != FORMAT_NAME:
        fail(f"not a model file (format = {d.get('format')!r})")
    if d.get("version") != FORMAT_VERSION:
        fail(f"unsupported model format version {d.get('version')!r}")
    try:
        K = np.array(d["filters"], dtype=float)
        logits = np.array(d["logits"], dtype=float)
        grid = MeanGrid(d["L"], d["gamma"], d["sigma0"])
    except KeyError as exc:
        fail(f"missing field {exc.args[0]!r}")
    except (TypeError, ValueError) as exc:
        fail(f"bad field value: {exc}")
    if K.ndim != 2 or K.shape[1] != d["J"]:
        fail(f"filters must be a x J with J = {d['J']}, got shape {K.shape}")
    if d.get("b") is not None and K.shape[0] != d["b"] ** 2:
        fail(f"filters have {K.shape[0]} rows, expected b^2 = {d['b'] ** 2}")
    return PatchModel(FilterBank(K), logits, grid)


def load_model(path) -> PatchModel:
    """Read a ``.gmdm`` file; the result passes all model invariant checks."""
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("model file is not UTF-8", exc.start, path) from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", _json_error_offset(text, exc), path) from None
    if not isinstance(d, dict):
        raise ParseError("top level must be an object", 0, path)
    return model_from_dict(d, path)


def load_model_meta(path) -> dict:
    return json.loads(Path(path).read_text("utf-8")).get("meta", {})


# ---------------------------------------------------------------- images


def _pgm_header(data: bytes, path=None):
    """Parse a binary PGM header; returns ``(width, height, maxval, data_offset)``."""
    pos = token = 0
    n = len(data)

    def skip_space():
        nonlocal pos
        while pos < n:
            c = data[pos : pos + 1]
            if c == b"#":
                while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break

    def read_int(name):
        nonlocal pos, token
        skip_space()
        start = token = pos
        while pos < n and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError(f"expected {name}", start, path)
        return int(data[start:pos])

    if data[:2] != b"P5":
        raise ParseError("not a binary PGM (magic 'P5' missing)", 0, path)
    pos = 2
    width = read_int("width")
    height = read_int("height")
    maxval = read_int("maxval")
    maxval_at = token
    if width < 1 or height < 1:
        raise ParseError(f"invalid image size {width}x{height}", 2, path)
    if not 0 < maxval < 65536:
        raise ParseError(f"maxval must be in 1..65535, got {maxval}", maxval_at, path)
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ParseError("expected a single whitespace byte after maxval", pos, path)
    return width, height, maxval, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit binary PGM as floats in ``[0, 1]``."""
    data = Path(path).read_bytes()
    w, h, maxval, off = _pgm_header(data, path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(data) - off < need:
        raise ParseError(f"truncated pixel data: need {need} bytes, found {len(data) - off}", len(data), path)
    px = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    if px.max(initial=0) > maxval:
        bad = int(np.argmax(px.ravel() > maxval))
        raise ParseError(f"pixel value exceeds maxval {maxval}", off + bad * dtype.itemsize, path)
    return px.astype(float) / maxval


def write_pgm(path, img, bits: int = 8, scale: float = 1.0):
    """Write ``img * scale`` (clipped to ``[0, 1]``) as a binary PGM."""
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    maxval = 255 if bits == 8 else 65535
    px = np.rint(np.clip(img * scale, 0.0, 1.0) * maxval)
    px = px.astype(">u2" if bits == 16 else "u1")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + px.tobytes())


IMAGE_SUFFIXES = {".pgm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif"}


def read_image(path) -> np.ndarray:
    """Grayscale image in ``[0, 1]``; PGM natively, other formats through Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L"):
            return np.asarray(im, dtype=float) / 65535.0
        return np.asarray(im.convert("L"), dtype=float) / 255.0


def write_image(path, img):
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, img)
        return
    from PIL import Image

    Image.fromarray(np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------- CSV


def write_csv(path, header, rows):
    """Header row plus rows; floats use shortest round-trip ``repr``."""

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        if isinstance(v, np.integer):
            return str(int(v))
        return v

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    """Returns ``(header, rows)`` with numeric cells converted to float."""

    def conv(v):
        try:
            return float(v)
        except ValueError:
            return v

    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [[conv(v) for v in row] for row in r]


# ---------------------------------------------------------------- marginals


@dataclass
class MarginalHistogram:
    j: int
    s: float
    edges: np.ndarray
    counts: np.ndarray

    @property
    def widths(self):
        return np.diff(self.edges)

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def density(self):
        total = self.counts.sum()
        if total == 0:
            return np.zeros_like(self.widths)
        return self.counts / (total * self.widths)

    @property
    def neg_log(self):
        with np.errstate(divide="ignore"):
            return -np.log(self.density)


def histogram_range(grid: MeanGrid, c_j: float, s: float) -> float:
    """Half-width ``gamma + 4 sqrt(sigma0^2 + s^2 c_j)`` of the binned interval."""
    return grid.gamma + 4.0 * math.sqrt(grid.sigma0**2 + s * s * c_j)


def marginal_histogram(patches, k_j, s, bins, rng: np.random.Generator, grid: MeanGrid, j: int = 0):
    """Histogram of ``<k_j, p + s eta>`` over the given patches."""
    if bins < 10:
        raise ValueError(f"need at least 10 bins, got {bins}")
    patches = np.asarray(patches, dtype=float)
    k_j = np.asarray(k_j, dtype=float)
    noisy = patches + s * rng.standard_normal(patches.shape) if s > 0 else patches
    resp = noisy @ k_j
    half = histogram_range(grid, float(k_j @ k_j), s)
    edges = np.linspace(-half, half, bins + 1)
    counts, _ = np.histogram(resp, bins=edges)
    return MarginalHistogram(j, float(s), edges, counts)


def credible_interval(hist: MarginalHistogram, kappa: float):
    """Bin range ``[lo, hi)`` cutting ``kappa`` empirical mass off each tail."""
    cdf = np.cumsum(hist.counts) / max(hist.counts.sum(), 1)
    lo = int(np.searchsorted(cdf, kappa, side="right"))
    hi = int(np.searchsorted(cdf, 1.0 - kappa, side="left")) + 1
    return lo, min(hi, hist.counts.size)


def expert_bin_density(model: PatchModel, j: int, s: float, edges) -> np.ndarray:
    """Bin-averaged density of ``psi_j`` at ``t = s^2 / 2``."""
    e = model.experts[j]
    cdf = expert_cdf(edges, e, model.grid, 0.5 * s * s)
    return np.diff(cdf) / np.diff(edges)


def nmse_kappa(model: PatchModel, histograms, kappa: float) -> dict:
    """NMSE between ``psi_j`` and empirical densities on the credible interval, per ``s``.

    Returns ``{s: sum_j mean_Omega (psi_j - h_j)^2 / max_Omega(h_j)^2}``.
    """
    if not 0.0 < kappa < 0.5:
        raise ValueError(f"kappa must lie in (0, 0.5), got {kappa}")
    out: dict[float, float] = {}
    for h in histograms:
        lo, hi = credible_interval(h, kappa)
        if hi <= lo:
            raise ValueError(f"empty credible interval for filter {h.j} at s={h.s} (kappa={kappa})")
        emp = h.density[lo:hi]
        mdl = expert_bin_density(model, h.j, h.s, h.edges)[lo:hi]
        peak = emp.max()
        if peak == 0:
            raise ValueError(f"no samples inside the credible interval for filter {h.j}")
        out[h.s] = out.get(h.s, 0.0) + float(np.mean((mdl - emp) ** 2) / peak**2)
    return out


def expert_curve(model: PatchModel, j: int, s: float, z) -> np.ndarray:
    """``-log psi_j(z, s^2/2)``, for plot-ready CSV output next to histograms."""
    return -expert_logpdf(z, model.experts[j], model.grid, 0.5 * s * s)
