"""``spdiff`` command-line interface.

Exit codes: 0 success, 1 verification failure, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import verify
from .corruption import EPS_MIN, FilterSchedule, build_schedule, calibrate_c1_for_m, corrupt
from .diffusion import (
    LinearFrequencyDenoiser,
    SigmaVariant,
    TrainState,
    default_variant,
    gaussian_oracle_denoiser,
    inverse_time_lr,
    load_denoiser,
    sample,
    save_denoiser,
    train,
)
from .errors import ShapeMismatch, SPDError
from .spectrum import (
    PowerSpectrum,
    SpectrumFit,
    compute_power_spectrum,
    fit_spectrum,
    frequency_grid,
    load_image,
    load_images,
    save_image,
)
from .tensorio import write_tensor

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class InputError(SPDError, ValueError):
    """Bad command-line input detected before computation."""


def _need_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{p}: no such file")
    return p


def _need_out(path: str) -> Path:
    p = Path(path)
    if not p.parent.is_dir():
        raise InputError(f"{p.parent}: output directory does not exist")
    return p


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[c if isinstance(c, str) else f"{c:.6g}" for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines)


# --------------------------------------------------------------------------- subcommands

def cmd_fit_spectrum(args) -> int:
    src = Path(args.data)
    out = _need_out(args.out)
    csv_path = _need_out(args.csv) if args.csv else out.with_name("SPECTRUM.csv")
    if src.is_file() and src.suffix.lower() == ".json":
        ps = PowerSpectrum.load(src)
    elif src.is_dir():
        ps = compute_power_spectrum(load_images(src))
    else:
        raise InputError(f"{src}: expected an image directory or a spectrum JSON file")
    fit = fit_spectrum(ps, fix_m=None if args.free_m else args.m)
    fit.save(out)
    _write_csv(csv_path, ["channel", "fx", "fy", "f", "power"], ps.rows())
    if args.spectrum_out:
        ps.save(args.spectrum_out)
    print(f"c1 = {fit.c1!r}\nc2 = {fit.c2!r}\nm = {fit.m!r}\nresidual = {fit.residual!r}")
    return EXIT_OK


def psi_rows(schedule: FilterSchedule):
    """``(t, f, psi)`` for every step and every distinct frequency norm."""
    f = frequency_grid(*schedule.shape).ravel()
    fu, first = np.unique(np.round(f, 12), return_index=True)
    table = schedule.psi_table.reshape(schedule.T + 1, -1)
    for t in range(schedule.T + 1):
        for fv, k in zip(fu, first):
            yield t, float(fv), float(table[t, k])


def cmd_make_filter(args) -> int:
    fit = SpectrumFit.load(_need_file(args.fit))
    out = _need_out(args.out)
    csv_path = _need_out(args.csv) if args.csv else out.with_name("PSI.csv")
    if args.calibrate:
        m = fit.m if args.m is None else args.m
        fit = calibrate_c1_for_m(fit, m, args.H, args.W, args.T)
    elif args.m is not None:
        fit = replace(fit, m=args.m)
    schedule = build_schedule(fit, args.H, args.W, args.T, eps_min=args.eps_min)
    schedule.save(out)
    schedule = FilterSchedule.load(out)
    _write_csv(csv_path, ["t", "f", "psi"], psi_rows(schedule))
    print(f"c1 = {fit.c1!r}\nc2 = {fit.c2!r}\nm = {fit.m!r}\nT = {schedule.T}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    image = _need_file(args.image)
    schedule = FilterSchedule.load(_need_file(args.filter))
    out = _need_out(args.out)
    if not 0 <= args.t <= schedule.T:
        raise InputError(f"--t {args.t} outside [0, {schedule.T}]")
    x0 = load_image(image)
    if x0.shape[1:] != schedule.shape:
        raise ShapeMismatch(f"image is {x0.shape[1:]}, filter is {schedule.shape}")
    x_t, eps = corrupt(x0, args.t, schedule, args.seed)
    save_image(out, x_t)
    write_tensor(out.with_suffix(".xt.spdt"), x_t)
    write_tensor(out.with_suffix(".eps.spdt"), eps)
    return EXIT_OK


def cmd_train(args) -> int:
    schedule = FilterSchedule.load(_need_file(args.filter))
    out = _need_out(args.out)
    data = load_images(args.data)
    if data.shape[2:] != schedule.shape:
        raise ShapeMismatch(f"images are {data.shape[2:]}, filter is {schedule.shape}")
    C = data.shape[1]
    if args.init == "oracle":
        weights = LinearFrequencyDenoiser.from_oracle(schedule, C).weights
    else:
        weights = LinearFrequencyDenoiser.zeros(schedule.T, C, *schedule.shape).weights
    state = TrainState(weights, lr=args.lr)
    lr_schedule = inverse_time_lr(args.lr, args.lr_scale) if args.lr_scale else None
    state, losses = train(state, schedule, data, args.steps, args.seed, args.batch, lr_schedule)
    save_denoiser(out, state.denoiser)
    if args.log:
        _write_csv(Path(args.log), ["step", "loss"], ((k + 1, float(v)) for k, v in enumerate(losses)))
    print(f"steps = {state.step}\nrunning_loss = {state.running_loss!r}")
    return EXIT_OK


def _denoiser(spec: str, schedule: FilterSchedule):
    if spec == "gaussian":
        return gaussian_oracle_denoiser(schedule)
    if spec.startswith("linear:"):
        den = load_denoiser(_need_file(spec[len("linear:"):]))
        if den.T != schedule.T or den.weights.shape[2:] != schedule.shape:
            raise ShapeMismatch(f"denoiser weights {den.weights.shape} do not fit the filter")
        return den
    raise InputError(f"--denoiser must be 'gaussian' or 'linear:PARAMS', got {spec!r}")


def cmd_sample(args) -> int:
    schedule = FilterSchedule.load(_need_file(args.filter))
    den = _denoiser(args.denoiser, schedule)
    if args.n < 0:
        raise InputError("--n must be >= 0")
    if args.n == 0:
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variant = SigmaVariant(args.sigma) if args.sigma else default_variant(schedule.T)
    channels = args.channels if args.denoiser == "gaussian" else None
    xs = sample(schedule, den, variant, args.seed, args.n, channels=channels)
    suffix = ".pgm" if xs.shape[1] == 1 else ".png"
    for i, x in enumerate(xs):
        if args.format in ("spdt", "both"):
            write_tensor(out / f"sample_{i:05d}.spdt", x)
        if args.format in ("image", "both"):
            save_image(out / f"sample_{i:05d}{suffix}", x)
    if args.report:
        rep = verify.check_sample_variance(xs, schedule.d_values, rel_tol=args.rel_tol,
                                           name=f"generated variance ({variant.value})")
        (out / "report.json").write_text(rep.dumps())
        print(_report_table([rep]))
        return EXIT_OK if rep.passed else EXIT_VERIFY
    return EXIT_OK


# --------------------------------------------------------------------------- verify

def _schedule_from_args(args) -> FilterSchedule:
    if args.filter:
        schedule = FilterSchedule.load(_need_file(args.filter))
        if args.m is None:
            return schedule
        fit = schedule.fit
        H, W = schedule.shape
        return build_schedule(replace(fit, m=args.m), H, W, schedule.T, schedule.eps_min)
    if args.fit:
        fit = SpectrumFit.load(_need_file(args.fit))
    else:
        fit = SpectrumFit(args.c1, args.c2, 2.0)
    if args.m is not None:
        fit = replace(fit, m=args.m)
    return build_schedule(fit, args.H, args.W, args.T)


def _report_table(reports) -> str:
    rows = [[r.name, r.max_deviation_se, r.max_rel_deviation, "PASS" if r.passed else "FAIL"] for r in reports]
    return _table(["check", "max dev (SE)", "max rel dev", "status"], rows)


def _verify_geodesic(args) -> bool:
    cases = verify.geodesic_suite(args.seed, args.count, args.max_dim)
    rows = [[str(i), str(c.dim), c.max_residual, c.boundary_error, c.geodesic_length, c.straight_length,
             "PASS" if c.passed else "FAIL"] for i, c in enumerate(cases)]
    print(_table(["case", "dim", "ode residual", "boundary err", "geodesic len", "straight len", "status"], rows))
    if args.json:
        Path(args.json).write_text(json.dumps([{k: float(v) for k, v in vars(c).items()} | {"dim": c.dim, "passed": bool(c.passed)}
                                               for c in cases], indent=2))
    return all(c.passed for c in cases)


def _verify_covariance(args) -> bool:
    schedule = _schedule_from_args(args)
    T = schedule.T
    ts = args.t if args.t else sorted({0, T // 4, T // 2, (3 * T) // 4, T})
    reports = [verify.check_forward_covariance(schedule, t, args.n, args.seed) for t in ts]
    print(_report_table(reports))
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_json() for r in reports], indent=2))
    return all(r.passed for r in reports)


def _verify_ordering(args) -> bool:
    schedule = _schedule_from_args(args)
    m = schedule.fit.m if schedule.fit is not None else 2.0
    expected = "increasing" if m > 0 else "decreasing" if m < 0 else "flat"
    rows, ok = [], True
    for t in range(1, schedule.T):
        got = verify.frequency_ordering(schedule, t)
        ok &= got == expected
        rows.append([str(t), got, expected, "PASS" if got == expected else "FAIL"])
    print(_table(["t", "psi vs f", "expected", "status"], rows))
    if args.json:
        Path(args.json).write_text(json.dumps({"m": m, "expected": expected, "passed": bool(ok),
                                               "rows": [r[:2] for r in rows]}, indent=2))
    return bool(ok)


def _verify_lengths(args) -> bool:
    schedule = _schedule_from_args(args)
    lengths = verify.compare_path_lengths(schedule.d_values, n_steps=args.n_steps)
    print(_table(["curve", "fisher length"], [[k, v] for k, v in lengths.items()]))
    if args.json:
        Path(args.json).write_text(json.dumps(lengths, indent=2))
    return lengths["spd"] <= min(lengths.values())


def cmd_verify(args) -> int:
    if args.json:
        _need_out(args.json)
    suite = {"geodesic": _verify_geodesic, "covariance": _verify_covariance,
             "ordering": _verify_ordering, "lengths": _verify_lengths}[args.suite]
    return EXIT_OK if suite(args) else EXIT_VERIFY


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit-spectrum", help="fit c1 / |c2 + f|^m to a dataset power spectrum")
    s.add_argument("--data", required=True, help="image directory (PGM/PNG/SPDT) or spectrum JSON")
    s.add_argument("--out", required=True, help="fit JSON to write")
    s.add_argument("--free-m", action="store_true", help="fit the exponent as well")
    s.add_argument("--m", type=float, default=2.0, help="fixed exponent (default 2)")
    s.add_argument("--csv", help="spectrum CSV (default SPECTRUM.csv next to --out)")
    s.add_argument("--spectrum-out", help="also save the measured spectrum as JSON")
    s.set_defaults(func=cmd_fit_spectrum)

    s = sub.add_parser("make-filter", help="build the corruption filter schedule")
    s.add_argument("--fit", required=True)
    s.add_argument("--H", type=int, required=True)
    s.add_argument("--W", type=int, required=True)
    s.add_argument("--T", type=int, required=True)
    s.add_argument("--m", type=float, help="replace the fitted exponent")
    s.add_argument("--calibrate", action="store_true", help="rescale c1 to keep half-time noise")
    s.add_argument("--eps-min", type=float, default=EPS_MIN)
    s.add_argument("--out", default="FILTER.json")
    s.add_argument("--csv", help="psi CSV (default PSI.csv next to --out)")
    s.set_defaults(func=cmd_make_filter)

    s = sub.add_parser("corrupt", help="forward-corrupt one image")
    s.add_argument("--image", required=True)
    s.add_argument("--filter", required=True)
    s.add_argument("--t", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output image; .xt.spdt and .eps.spdt written alongside")
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("train", help="train the linear frequency denoiser")
    s.add_argument("--filter", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--lr-scale", type=float, help="decay the rate as min(lr, scale / step)")
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--init", choices=["zero", "oracle"], default="zero")
    s.add_argument("--log", help="per-step loss CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate images with the reverse process")
    s.add_argument("--filter", required=True)
    s.add_argument("--denoiser", required=True, help="gaussian | linear:PARAMS")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--sigma", choices=[v.value for v in SigmaVariant])
    s.add_argument("--out", required=True)
    s.add_argument("--channels", type=int, default=1, help="channels for the gaussian denoiser")
    s.add_argument("--format", choices=["spdt", "image", "both"], default="both")
    s.add_argument("--report", action="store_true", help="compare per-bin variance to the filter spectrum")
    s.add_argument("--rel-tol", type=float, default=0.05)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("verify", help="run a verification suite")
    s.add_argument("--suite", required=True, choices=["geodesic", "covariance", "ordering", "lengths"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--max-dim", type=int, default=6)
    s.add_argument("--filter")
    s.add_argument("--fit")
    s.add_argument("--c1", type=float, default=7.7)
    s.add_argument("--c2", type=float, default=-0.3)
    s.add_argument("--m", type=float)
    s.add_argument("--H", type=int, default=8)
    s.add_argument("--W", type=int, default=8)
    s.add_argument("--T", type=int, default=100)
    s.add_argument("--n", type=int, default=100_000)
    s.add_argument("--t", type=int, nargs="*")
    s.add_argument("--n-steps", type=int, default=1000)
    s.add_argument("--json", help="write the reports as JSON")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ArithmeticError as exc:
        print(f"spdiff: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"spdiff: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
