"""Command-line entry point: ``moneyvelocity <command> [flags]``.

Exit codes: 0 success, 1 runtime or domain error, 2 usage error.  Every
command writes into ``--out`` (default: ``$MONEYVELOCITY_OUT`` or the current
directory) and leaves a ``manifest.json`` describing the invocation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .distributions import (
    SampleSet,
    build_histogram,
    fit_exponential_loglinear,
    fit_exponential_mle,
    fit_from_dict,
    fit_plot_csv,
    fit_powerlaw_loglog,
    parse_binning,
)
from .errors import ConfigError, DegenerateSamplesError, LedgerValidationError, VelocityError
from .exchange import SimConfig, run, write_run
from .ledger import (
    FitConfig,
    ParseStats,
    SyntheticLedgerConfig,
    generate_synthetic_ledger,
    ingest,
    parse_ledger,
    write_ledger,
    write_reports,
)
from .sampling import DEFAULT_RATIOS, StudyConfig, emit_study_csv, run_study
from .velocity import (
    CorrectionParams,
    VelocityEstimate,
    velocity_corrected,
    velocity_from_exponent,
    velocity_from_f0,
    velocity_from_lifespans,
)

OUT_ENV = "MONEYVELOCITY_OUT"
log = logging.getLogger("moneyvelocity")


class UsageError(Exception):
    """Bad flag combination detected after parsing (exit code 2)."""


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _period(text: str):
    if text in ("month", "day"):
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("period must be month, day or a number of seconds") from None


def _binning(text: str):
    try:
        return parse_binning(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def read_samples(path: str | Path, time_unit: str = "iteration") -> SampleSet:
    """One-column CSV with a header, plus an optional ``weight`` column."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise DegenerateSamplesError(f"degenerate samples: {path} is empty")
        names = [h.strip() for h in header.split(",")]
        rows = [line.split(",") for line in fh if line.strip()]
    if not rows:
        raise DegenerateSamplesError(f"degenerate samples: {path} has no data rows")
    try:
        data = np.array([[float(x) for x in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise DegenerateSamplesError(f"{path}: non-numeric sample ({exc})") from None
    weights = data[:, names.index("weight")] if "weight" in names else None
    value_col = next(i for i, n in enumerate(names) if n != "weight")
    return SampleSet(data[:, value_col], time_unit, weights)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _resolve_seed(args, argv: list[str]) -> list[str]:
    if getattr(args, "seed", "absent") is None:
        args.seed = secrets.randbits(32)
        print(f"seed: {args.seed}", file=sys.stderr)
        argv = [*argv, "--seed", str(args.seed)]
    return argv


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
def cmd_simulate(args, out: Path) -> list[Path]:
    config = SimConfig(
        n_agents=args.agents,
        total_money=args.money,
        transfer_mode="fixed" if args.v is not None else "uniform",
        v=args.v if args.v is not None else 1.0,
        unit_selection=args.selection,
        burn_in_iterations=args.burn_in,
        measure_iterations=args.measure,
        rng_seed=args.seed,
        entropy_stride=args.entropy_stride,
    )
    try:
        config.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    result = run(config, progress=lambda t: log.info("tick %d", t))
    log.info("v_g = %.6g over %d iterations", result.v_g, result.window)
    return write_run(result, out)


def _fit(samples: SampleSet, model: str, binning, xmin, min_count):
    if model == "exp-mle":
        fit = fit_exponential_mle(samples, binning)
        try:
            hist = build_histogram(samples, binning)
        except DegenerateSamplesError:
            hist = None
        return fit, hist
    hist = build_histogram(samples, binning)
    if model == "exp-loglin":
        return fit_exponential_loglinear(hist, min_count), hist
    return fit_powerlaw_loglog(hist, xmin, min_count), hist


def cmd_fit(args, out: Path) -> list[Path]:
    samples = read_samples(args.input, args.time_unit)
    binning = args.binning
    if args.model == "powerlaw" and binning == "auto":
        binning = parse_binning("log:30")
    fit, hist = _fit(samples, args.model, binning, args.xmin, args.min_count)
    if fit.flagged:
        log.warning("fit flagged: %s", ", ".join(fit.flags))
    data = fit.to_dict()
    data["n_samples"] = len(samples)
    data["time_unit"] = samples.time_unit
    paths = [_write_json(out / "fit.json", data)]
    if hist is not None:
        p = out / "fitplot.csv"
        p.write_text(fit_plot_csv(hist, fit))
        paths.append(p)
        paths.append(_write_json(out / "histogram.json", hist.to_dict()))
    return paths


def cmd_velocity(args, out: Path) -> list[Path]:
    if args.method == "lifespan":
        if not args.samples:
            raise UsageError("--method lifespan needs --samples")
        est = velocity_from_lifespans(read_samples(args.samples), inputs_digest=str(args.samples))
    else:
        if not args.fit:
            raise UsageError(f"--method {args.method} needs --fit")
        fit = fit_from_dict(json.loads(Path(args.fit).read_text()))
        digest = str(args.fit)
        if args.method == "f0":
            est = velocity_from_f0(fit, digest)
        elif args.method == "exponent":
            est = velocity_from_exponent(fit, digest)
        else:
            params = CorrectionParams(
                delta_t=args.dt,
                order=args.order,
                derivative_source=args.derivatives,
                step=args.step,
            )
            est = velocity_corrected(fit.model(), params, digest)
    log.info("velocity = %.6g (%s)", est.value, est.method)
    return [_write_json(out / "velocity.json", est.to_dict())]


def cmd_study(args, out: Path) -> list[Path]:
    samples = read_samples(args.samples)
    if args.baseline is not None:
        baseline = VelocityEstimate(args.baseline, "ground-truth", "--baseline")
    elif args.summary:
        summary = json.loads(Path(args.summary).read_text())
        baseline = VelocityEstimate(float(summary["v_g"]), "ground-truth", str(args.summary))
    else:
        raise UsageError("study needs --baseline or --summary")
    config = StudyConfig(
        ratios=args.ratios,
        repetitions=args.reps,
        estimator=args.estimator,
        rng_seed=args.seed,
        binning=args.binning,
        min_count=args.min_count,
    )
    result = run_study(samples, baseline, config, max_workers=args.workers)
    p = out / "study.csv"
    p.write_text(emit_study_csv(result))
    q = out / "study.json"
    q.write_text(result.to_json())
    return [p, q]


def _read_supply(args):
    if args.supply_file:
        supply = {}
        with open(args.supply_file) as fh:
            next(fh, None)
            for line in fh:
                if line.strip():
                    label, value = line.strip().split(",")[:2]
                    supply[label] = float(value)
        return supply
    if args.supply is None:
        raise UsageError("ingest needs --supply or --supply-file")
    return args.supply


def cmd_ingest(args, out: Path) -> list[Path]:
    supply = _read_supply(args)
    stats = ParseStats()
    with open(args.ledger) as fh:
        txs = parse_ledger(fh, strict=not args.lenient, stats=stats)
        reports = ingest(
            txs,
            supply,
            period=args.period,
            fit_config=FitConfig(args.binning, args.xmin, args.min_count),
            time_unit=args.time_unit,
            sample_ratio=args.sample_ratio,
            seed=args.seed,
            volume_cap=args.volume_cap,
        )
    if stats.skipped:
        log.warning("skipped %d invalid ledger lines", stats.skipped)
        for err in stats.errors[:10]:
            log.warning("  %s", err)
    for r in reports:
        if r.flags:
            log.warning("period %s: fit flagged %s", r.period, ", ".join(r.flags))
    return write_reports(reports, out)


def cmd_synth_ledger(args, out: Path) -> list[Path]:
    config = SyntheticLedgerConfig(
        n_coins=args.coins,
        rate=args.rate,
        duration=args.duration,
        supply=args.supply,
        seed=args.seed,
        mode=args.mode,
        monthly_rates=args.monthly_rates,
        alpha=args.alpha,
        monthly_alphas=args.monthly_alphas,
        xmin=args.xmin,
        xmax=args.xmax,
    )
    try:
        config.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    path = out / "ledger.jsonl"
    with open(path, "w") as fh:
        n = write_ledger(generate_synthetic_ledger(config), fh)
    log.info("wrote %d transactions (supply %d)", n, config.total_supply)
    return [path]


def cmd_repro(args, out: Path) -> list[Path]:
    """Simulation, both exponential fits, velocities and the subsample study."""
    sim_args = argparse.Namespace(
        agents=args.agents, money=args.money, v=args.v, selection="random",
        burn_in=args.burn_in, measure=args.measure, seed=args.seed, entropy_stride=args.entropy_stride,
    )
    paths = cmd_simulate(sim_args, out)
    ages = out / "ages.csv"
    for model, sub in (("exp-mle", "mle"), ("exp-loglin", "loglin")):
        d = out / sub
        d.mkdir(exist_ok=True)
        fit_args = argparse.Namespace(
            input=ages, model=model, binning=args.binning, xmin=None,
            min_count=args.min_count, time_unit="iteration",
        )
        paths += cmd_fit(fit_args, d)
        vel_args = argparse.Namespace(method="f0", fit=d / "fit.json", samples=None)
        paths += cmd_velocity(vel_args, d)
    d = out / "lifespan"
    d.mkdir(exist_ok=True)
    paths += cmd_velocity(argparse.Namespace(method="lifespan", samples=out / "lifespans.csv", fit=None), d)
    for estimator in ("exponent", "f0"):
        d = out / f"study_{estimator}"
        d.mkdir(exist_ok=True)
        study_args = argparse.Namespace(
            samples=ages, baseline=None, summary=out / "summary.json", ratios=args.ratios,
            reps=args.reps, estimator=estimator, seed=args.seed, binning=args.binning,
            min_count=args.min_count, workers=None,
        )
        paths += cmd_study(study_args, d)
    return paths


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "velocity": cmd_velocity,
    "study": cmd_study,
    "ingest": cmd_ingest,
    "synth-ledger": cmd_synth_ledger,
    "repro": cmd_repro,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moneyvelocity", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUT_ENV} or .)")
        return p

    def sim_flags(p):
        p.add_argument("--agents", type=int, default=10_000)
        p.add_argument("--money", type=int, default=1_000_000)
        p.add_argument("--burn-in", type=int, default=10_000)
        p.add_argument("--measure", type=int, default=40_000)
        p.add_argument("--v", type=float, default=None, help="fixed transfer fraction; uniform in (0,1] if omitted")
        p.add_argument("--entropy-stride", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)

    p = add("simulate", "run the random-exchange simulator")
    sim_flags(p)
    p.add_argument("--selection", choices=("random", "oldest-first", "newest-first"), default="random")

    p = add("fit", "fit a duration distribution")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", choices=("exp-mle", "exp-loglin", "powerlaw"), default="exp-mle")
    p.add_argument("--binning", type=_binning, default="auto", help="auto, width:W or log:N")
    p.add_argument("--xmin", type=float, default=None)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--time-unit", choices=("iteration", "second", "day"), default="iteration")

    p = add("velocity", "estimate velocity from a fit or lifespans")
    p.add_argument("--fit", type=Path)
    p.add_argument("--samples", type=Path)
    p.add_argument("--method", choices=("f0", "exponent", "corrected", "lifespan"), default="f0")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--derivatives", choices=("analytic", "finite-difference"), default="analytic")
    p.add_argument("--step", type=float, default=None)

    p = add("study", "subsample study of velocity estimates")
    p.add_argument("--samples", type=Path, required=True)
    p.add_argument("--ratios", type=_floats, default=DEFAULT_RATIOS)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--estimator", choices=("f0", "exponent", "lifespan-mean"), default="exponent")
    p.add_argument("--baseline", type=float, default=None)
    p.add_argument("--summary", type=Path, default=None, help="summary.json from simulate (uses v_g)")
    p.add_argument("--binning", type=_binning, default="auto")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("ingest", "per-period velocities from a JSON-lines ledger")
    p.add_argument("--ledger", type=Path, required=True)
    p.add_argument("--period", type=_period, default="month")
    p.add_argument("--supply", type=float, default=None)
    p.add_argument("--supply-file", type=Path, default=None, help="CSV period,supply")
    p.add_argument("--binning", type=_binning, default="log:30")
    p.add_argument("--xmin", type=float, default=None)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--time-unit", choices=("second", "day"), default="day")
    p.add_argument("--sample-ratio", type=float, default=1.0)
    p.add_argument("--volume-cap", type=int, default=None)
    p.add_argument("--lenient", action="store_true", help="skip invalid lines instead of aborting")
    p.add_argument("--seed", type=int, default=None)

    p = add("synth-ledger", "write a synthetic ledger")
    p.add_argument("--coins", type=int, default=1000)
    p.add_argument("--mode", choices=("exponential", "heavy-tail"), default="exponential")
    p.add_argument("--rate", type=float, default=0.1, help="spends per coin per day")
    p.add_argument("--monthly-rates", type=_floats, default=None)
    p.add_argument("--alpha", type=float, default=1.6)
    p.add_argument("--monthly-alphas", type=_floats, default=None)
    p.add_argument("--xmin", type=float, default=0.1)
    p.add_argument("--xmax", type=float, default=3650.0)
    p.add_argument("--duration", type=float, default=90.0, help="days")
    p.add_argument("--supply", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("repro", "simulation, fits, velocities and subsample study in one go")
    sim_flags(p)
    p.add_argument("--ratios", type=_floats, default=DEFAULT_RATIOS)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--binning", type=_binning, default="auto")
    p.add_argument("--min-count", type=int, default=100)

    p = sub.add_parser("rerun", help="repeat the invocation recorded in a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, default=None)
    return parser


def _manifest(command, args, argv, out, outputs, started) -> dict:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("command", "verbose", "out")}
    config = {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in config.items()}
    inputs = [str(v) for k, v in vars(args).items() if k in ("input", "samples", "fit", "ledger", "summary", "supply_file") and v]
    return {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": [str(p.relative_to(out)) for p in outputs],
        "out": str(out),
        "version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "rerun":
        try:
            manifest = json.loads(args.manifest.read_text())
        except (OSError, ValueError) as exc:
            print(f"error: cannot read manifest: {exc}", file=sys.stderr)
            return 1
        new_argv = list(manifest["argv"])
        out = args.out or Path(manifest["out"])
        return main(_replace_out(new_argv, out))

    argv = _resolve_seed(args, argv)
    out = args.out or Path(os.environ.get(OUT_ENV, "."))
    started = time.time()
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, out)
        mpath = out / "manifest.json"
        _write_json(mpath, _manifest(args.command, args, argv, out, outputs, started))
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except LedgerValidationError as exc:
        print(f"error: invalid ledger, {exc}", file=sys.stderr)
        return 1
    except (VelocityError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _replace_out(argv: list[str], out: Path) -> list[str]:
    res, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        res.append(tok)
    return [*res, "--out", str(out)]


if __name__ == "__main__":
    sys.exit(main())
