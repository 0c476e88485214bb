"""Command-line interface: ``gmdm <subcommand> ...`` or ``python -m gmdm``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("gmdm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _global_flags(top: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; their defaults are suppressed so a
    # value given before the subcommand survives
    g = argparse.ArgumentParser(add_help=False)
    dflt = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    g.add_argument("--seed", type=int, default=dflt(0), help="random seed (default 0)")
    g.add_argument("--threads", type=int, default=dflt(None), help="worker threads (default: all cores)")
    g.add_argument("--verbose", "-v", action="store_true", default=dflt(False), help="debug logging")
    return g


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmdm", description="Patch priors from products of diffusing GMM experts.",
                parents=[_global_flags(True)])
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    common = _global_flags(False)

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, parents=[common])

    s = add("train", "train a patch model by denoising score matching")
    s.add_argument("--data", required=True, help="directory of grayscale training images")
    s.add_argument("--patch-size", type=int, default=7)
    s.add_argument("--filters", type=int, default=None, help="number of filters J (default b^2 - 1)")
    s.add_argument("--components", type=int, default=125, help="mixture components L")
    s.add_argument("--steps", type=int, default=100_000)
    s.add_argument("--batch", type=int, default=3200)
    s.add_argument("--smax", type=_positive, default=0.4)
    s.add_argument("--loss-power", type=_positive, default=2.0)
    s.add_argument("--stratified", action="store_true", help="stratify noise levels within each batch")
    s.add_argument("--inertia", type=float, default=0.8)
    s.add_argument("--step0", type=_positive, default=1e-2, help="initial step size")
    s.add_argument("--projection-iters", type=int, default=3)
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--checkpoint-every", type=int, default=1000)
    s.add_argument("--out", required=True, help="output model file (.gmdm)")
    s.add_argument("--trace", help="loss trace CSV (default: OUT with .loss.csv)")

    s = add("orthogonalize", "project a filter matrix onto pairwise-orthogonal columns")
    s.add_argument("--in", dest="inp", required=True, help="CSV matrix (a rows, J columns) or .gmdm model")
    s.add_argument("--out", required=True, help="CSV matrix output")
    s.add_argument("-B", "--iterations", type=int, default=3)
    s.add_argument("--trace", help="CSV of the objective after every half-step")

    s = add("denoise", "non-blind denoising")
    s.add_argument("--model", required=True)
    s.add_argument("--sigma", type=_positive, required=True, help="noise std (intensities in [0, 1])")
    s.add_argument("--method", choices=["eb-pa", "hqs"], default="eb-pa")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--hqs-levels", type=int, default=8)
    s.add_argument("--reference", help="clean image; prints PSNR of input and output")

    s = add("blind-denoise", "denoising with a per-pixel noise estimate")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--map", help="also write the noise map (16-bit PGM)")
    s.add_argument("--window", type=int, default=None, help="box-filter window (default 2b+1)")
    s.add_argument("--grid-size", type=int, default=128)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--reference", help="clean image; prints PSNR of input and output")

    s = add("estimate-noise", "global (and optionally per-pixel) noise estimation")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--curve", help="CSV of (s, mean_neg_logpdf)")
    s.add_argument("--map", help="16-bit PGM noise map")
    s.add_argument("--window", type=int, default=None)
    s.add_argument("--grid-size", type=int, default=128)
    s.add_argument("--max-patches", type=int, default=20000)

    s = add("sample", "draw patches from the model at one noise level")
    s.add_argument("--model", required=True)
    s.add_argument("--s", type=float, default=0.0, help="noise level s = sqrt(2t)")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--dc", type=float, default=0.5)
    s.add_argument("--out", required=True, help="PGM mosaic of the samples")

    s = add("marginals", "empirical filter-response histograms next to the model potentials")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--s", type=_floats, default=[0.0, 0.025, 0.05, 0.1, 0.2])
    s.add_argument("--bins", type=int, default=201)
    s.add_argument("--patches", type=int, default=100_000)
    s.add_argument("--out", required=True)

    s = add("nmse", "NMSE between potentials and empirical marginals on credible intervals")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--kappa", type=_floats, default=[0.005, 0.01, 0.02])
    s.add_argument("--s", type=_floats, default=[0.0, 0.025, 0.05, 0.1, 0.2])
    s.add_argument("--bins", type=int, default=201)
    s.add_argument("--patches", type=int, default=100_000)
    s.add_argument("--out", required=True)

    s = add("conv-verify", "numerical checks of the convolutional model")
    s.add_argument("--n-min", type=int, default=4)
    s.add_argument("--n-max", type=int, default=16)
    s.add_argument("--out", help="CSV of every check")

    s = add("info", "print model dimensions and parameter count")
    s.add_argument("model")
    return p


# ---------------------------------------------------------------- commands


def _read(path):
    from gmdm.metrics_io import read_image

    return read_image(path)


def _report_psnr(args, y, x):
    if args.reference:
        from gmdm.restoration import psnr

        ref = _read(args.reference)
        print(f"psnr_in\t{psnr(y, ref):.4f}")
        print(f"psnr_out\t{psnr(x, ref):.4f}")


def cmd_train(args):
    from gmdm.metrics_io import save_model
    from gmdm.training import PatchDataset, TrainConfig, train, write_trace

    out = Path(args.out)
    cfg = TrainConfig(
        b=args.patch_size, steps=args.steps, batch=args.batch, s_max=args.smax, seed=args.seed,
        J=args.filters, L=args.components, inertia=args.inertia, step0=args.step0,
        B=args.projection_iters, loss_power=args.loss_power, stratified=args.stratified,
        log_every=args.log_every, checkpoint_every=args.checkpoint_every,
        checkpoint=str(out.with_name(out.stem + ".ckpt.gmdm")),
    )
    ds = PatchDataset.from_directory(args.data, cfg.b)
    log.info("training on %d images (%d patch locations)", len(ds), ds.n_locations)
    res = train(ds, cfg)
    save_model(res.model, out, {"seed": cfg.seed, "steps": cfg.steps, "data_hash": ds.fingerprint()})
    write_trace(args.trace or out.with_suffix(".loss.csv"), res.trace)
    print(f"wrote {out} ({res.model.param_count()} parameters, final loss {res.trace[-1][1]:.6g})")


def cmd_orthogonalize(args):
    from gmdm.filter_bank import orthogonalize
    from gmdm.metrics_io import load_model, write_csv

    src = Path(args.inp)
    K = load_model(src).K if src.suffix == ".gmdm" else np.loadtxt(src, delimiter=",", ndmin=2)
    P, trace = orthogonalize(K, args.iterations)
    np.savetxt(args.out, P, delimiter=",", fmt="%.17g")
    if args.trace:
        write_csv(args.trace, ["half_step", "objective"], list(enumerate(trace.objective)))
    print(f"objective {trace.objective[-1]:.6g}  max offdiag Gram {trace.offdiag[-1]:.3e}  "
          f"clamped {trace.clamped.tolist()}")


def cmd_denoise(args):
    from gmdm.metrics_io import load_model, write_image
    from gmdm.restoration import HqsSchedule, eb_patch_average, hqs_denoise

    model = load_model(args.model)
    y = _read(args.inp)
    if args.method == "hqs":
        x = hqs_denoise(y, args.sigma, model, HqsSchedule.default(args.sigma, args.hqs_levels), args.stride)
    else:
        x = np.clip(eb_patch_average(y, args.sigma, model, args.stride), 0.0, 1.0)
    write_image(args.out, x)
    _report_psnr(args, y, x)


def cmd_blind_denoise(args):
    from gmdm.metrics_io import load_model, write_image, write_pgm
    from gmdm.restoration import NOISE_MAP_SCALE, default_noise_grid, denoise_with_map, estimate_noise_map

    model = load_model(args.model)
    y = _read(args.inp)
    nmap = estimate_noise_map(y, model, default_noise_grid(args.grid_size), args.window, args.stride)
    x = np.clip(denoise_with_map(y, nmap, model, args.stride), 0.0, 1.0)
    write_image(args.out, x)
    if args.map:
        write_pgm(args.map, nmap, bits=16, scale=NOISE_MAP_SCALE)
    _report_psnr(args, y, x)


def cmd_estimate_noise(args):
    from gmdm.metrics_io import load_model, write_csv, write_pgm
    from gmdm.restoration import NOISE_MAP_SCALE, default_noise_grid, estimate_noise_global, estimate_noise_map

    model = load_model(args.model)
    y = _read(args.inp)
    grid = default_noise_grid(args.grid_size)
    s_star, curve = estimate_noise_global(y, model, grid, max_patches=args.max_patches,
                                          rng=np.random.default_rng(args.seed))
    print(f"sigma\t{s_star:.6g}")
    if args.curve:
        write_csv(args.curve, ["s", "mean_neg_logpdf"], zip(grid, curve))
    if args.map:
        nmap = estimate_noise_map(y, model, grid, args.window)
        write_pgm(args.map, nmap, bits=16, scale=NOISE_MAP_SCALE)


def mosaic(patches, b: int, gap: int = 1, fill: float = 1.0) -> np.ndarray:
    n = len(patches)
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    out = np.full((rows * (b + gap) + gap, cols * (b + gap) + gap), fill)
    for i, p in enumerate(patches):
        r, c = divmod(i, cols)
        out[gap + r * (b + gap) : gap + r * (b + gap) + b, gap + c * (b + gap) : gap + c * (b + gap) + b] = (
            p.reshape(b, b)
        )
    return out


def cmd_sample(args):
    from gmdm.gmm_core import time_from_std
    from gmdm.metrics_io import load_model, write_pgm

    model = load_model(args.model)
    if args.count < 1:
        raise ValueError("--count must be >= 1")
    rng = np.random.default_rng(args.seed)
    P = model.sample(time_from_std(args.s), rng, size=args.count, dc=args.dc)
    write_pgm(args.out, mosaic(P, model.b))
    print(f"wrote {args.count} samples at s={args.s} to {args.out}")


def _histograms(model, args):
    from gmdm.metrics_io import marginal_histogram
    from gmdm.training import PatchDataset, draw_batch

    ds = PatchDataset.from_directory(args.data, model.b)
    rng = np.random.default_rng(args.seed)
    P = draw_batch(ds, args.patches, rng)
    return [
        marginal_histogram(P, model.K[:, j], s, args.bins, rng, model.grid, j)
        for s in args.s
        for j in range(model.J)
    ]


def cmd_marginals(args):
    from gmdm.metrics_io import expert_bin_density, load_model, write_csv

    model = load_model(args.model)
    rows = []
    for h in _histograms(model, args):
        psi = expert_bin_density(model, h.j, h.s, h.edges)
        with np.errstate(divide="ignore"):
            nl_psi = -np.log(psi)
        for z, d, nh, npsi in zip(h.centers, h.density, h.neg_log, nl_psi):
            rows.append((h.j, h.s, z, d, nh, npsi))
    write_csv(args.out, ["j", "s", "z", "density", "neg_log_hist", "neg_log_psi"], rows)
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_nmse(args):
    from gmdm.metrics_io import load_model, nmse_kappa, write_csv

    model = load_model(args.model)
    hists = _histograms(model, args)
    rows = []
    for kappa in args.kappa:
        for s, v in nmse_kappa(model, hists, kappa).items():
            rows.append((s, kappa, v))
            print(f"s={s:<6g} kappa={kappa:<6g} nmse={v:.6g}")
    write_csv(args.out, ["s", "kappa", "nmse"], rows)


def cmd_conv_verify(args):
    from gmdm.conv_model import verify
    from gmdm.metrics_io import write_csv

    if not 2 <= args.n_min <= args.n_max:
        raise ValueError("need 2 <= --n-min <= --n-max")
    records = verify(range(args.n_min, args.n_max + 1), seed=args.seed)
    if args.out:
        write_csv(args.out, ["name", "n", "value", "passed"], [(r["name"], r["n"], r["value"], r["passed"]) for r in records])
    failed = [r for r in records if not r["passed"]]
    names = sorted({r["name"] for r in records})
    for name in names:
        rs = [r for r in records if r["name"] == name]
        bad = [r["n"] for r in rs if not r["passed"]]
        worst = max(r["value"] for r in rs)
        print(f"{'FAIL' if bad else 'ok  '}  {name:<32} worst {worst:.3e}" + (f"  failing n={bad}" if bad else ""))
    if failed:
        raise RuntimeError(f"{len(failed)} of {len(records)} convolutional checks failed")


def cmd_info(args):
    from gmdm.metrics_io import load_model, load_model_meta

    m = load_model(args.model)
    print(f"b\t{m.b}")
    print(f"J\t{m.J}")
    print(f"L\t{m.grid.L}")
    print(f"gamma\t{m.grid.gamma:g}")
    print(f"sigma0\t{m.grid.sigma0:.6g}")
    print(f"params\t{m.param_count()}")
    for k, v in load_model_meta(args.model).items():
        if k != "config":
            print(f"{k}\t{v}")


COMMANDS = {
    "train": cmd_train,
    "orthogonalize": cmd_orthogonalize,
    "denoise": cmd_denoise,
    "blind-denoise": cmd_blind_denoise,
    "estimate-noise": cmd_estimate_noise,
    "sample": cmd_sample,
    "marginals": cmd_marginals,
    "nmse": cmd_nmse,
    "conv-verify": cmd_conv_verify,
    "info": cmd_info,
}


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def dispatch(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            parser.print_usage(sys.stderr)
            return 1
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        _set_threads(args.threads)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("config: %s", {k: v for k, v in sorted(vars(args).items())})
    try:
        COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"gmdm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(dispatch())
