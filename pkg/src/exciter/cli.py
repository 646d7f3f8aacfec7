"""``exciter`` command line: extract, simulate, fit, stability, moments, diagnose.

Exit codes: 0 ok, 2 bad input, 3 empty extraction, 4 fit failure, 5 unstable model.
Every command writes a ``manifest.json`` next to its outputs holding a digest
of the inputs and flags, so identical runs can be recognized.
"""
from __future__ import annotations

import hashlib
import json
import sys
import time
import warnings
from pathlib import Path

import click
import numpy as np

from . import __version__
from .data import (ExtractionConfig, extract_jumps, intensity_vs_marks, load_price_csv,
                   log_returns)
from .errors import (DimensionError, DomainError, FitError, FormatError, InsufficientDataError,
                     StabilityError, UnsupportedConfigurationError)
from .estimate import OptimizerSettings, fit, nest_start, render_table, stderr_fd, table_rows
from .io import (dumps_json, fmt, load_spec, read_path_csv, write_path_csv,
                 write_table_csv, write_text)
from .model import VARIANT_IDS, VariantMask
from .moments import autocovariance_curve, stability_report
from .simulate import SimConfig, simulate_path

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_EMPTY = 3
EXIT_FIT = 4
EXIT_UNSTABLE = 5


class Exit(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


INPUT_ERRORS = (FormatError, DomainError, DimensionError, InsufficientDataError,
                UnsupportedConfigurationError)


def _run(body):
    """Map package errors onto exit codes."""
    try:
        body()
    except Exit as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)
    except StabilityError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_UNSTABLE)
    except FitError as exc:
        click.echo(f"error: fit failed: {exc}", err=True)
        sys.exit(EXIT_FIT)
    except INPUT_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT)


def _digest(subcommand, inputs, flags):
    h = hashlib.sha256()
    h.update(subcommand.encode())
    h.update(json.dumps(flags, sort_keys=True, default=str).encode())
    for p in inputs:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _manifest(out_file, subcommand, inputs, flags, seed, started, outputs):
    doc = {
        "subcommand": subcommand,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "flags": flags,
        "digest": _digest(subcommand, inputs, flags),
        "seed": seed,
        "version": __version__,
        "wall_time": time.time() - started,
    }
    write_text(out_file, dumps_json(doc))


def _manifest_path(out):
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def parse_grid(text):
    """``a:b:step`` (inclusive) or a comma-separated list of times."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise Exit(EXIT_INPUT, f"grid {text!r} must look like start:stop:step")
        a, b, s = (float(p) for p in parts)
        if not s > 0 or b < a:
            raise Exit(EXIT_INPUT, f"grid {text!r} needs step > 0 and stop >= start")
        n = int(np.floor((b - a) / s + 1e-9))
        return a + s * np.arange(n + 1)
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError as exc:
        raise Exit(EXIT_INPUT, f"bad grid {text!r}") from exc


@click.group()
@click.version_option(__version__, prog_name="exciter")
def main():
    """Marked self-exciting point processes with stochastic intensity."""


@main.command("extract")
@click.argument("prices_1", type=click.Path(exists=True, dir_okay=False))
@click.argument("prices_2", type=click.Path(exists=True, dir_okay=False))
@click.option("--threshold", default=0.025, show_default=True, type=float)
@click.option("--sign", type=click.Choice(["all", "pos", "neg"]), default="all", show_default=True)
@click.option("--date-col", default="Date", show_default=True)
@click.option("--close-col", default="Close", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_extract(prices_1, prices_2, threshold, sign, date_col, close_col, out):
    """Threshold exceedances of two daily price files as a bivariate path CSV."""
    started = time.time()

    def body():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s1 = load_price_csv(prices_1, date_col, close_col, name=Path(prices_1).stem)
            s2 = load_price_csv(prices_2, date_col, close_col, name=Path(prices_2).stem)
            path = extract_jumps(log_returns(s1), log_returns(s2), ExtractionConfig(threshold, sign))
        write_path_csv(path, out)
        flags = {"threshold": threshold, "sign": sign, "date_col": date_col, "close_col": close_col}
        _manifest(_manifest_path(out), "extract", [prices_1, prices_2], flags, None, started, [out])
        counts = path.n_events.tolist()
        click.echo(f"events: {counts[0]} (series 1), {counts[1]} (series 2); T={fmt(path.T)}")
        if len(path) == 0:
            raise Exit(EXIT_EMPTY, "no events extracted")

    _run(body)


@main.command("simulate")
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--T", "horizon", required=True, type=float)
@click.option("--paths", default=1, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--record-step", default=None, type=float, help="Also write intensity checkpoints.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def cmd_simulate(spec_file, horizon, paths, seed, record_step, out_dir):
    """Simulate independent paths of a spec JSON."""
    started = time.time()

    def body():
        spec = load_spec(spec_file)
        cfg = SimConfig(seed=seed, record_grid=record_step)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for i in range(paths):
            res = simulate_path(spec, horizon, cfg, stream=i)
            f = out / f"path_{i:04d}.csv"
            write_path_csv(res.path, f)
            written.append(f)
            if record_step is not None:
                g = out / f"checkpoints_{i:04d}.csv"
                header = ["t"] + [f"lambda{k + 1}" for k in range(spec.d)]
                rows = [[t, *lam] for t, lam in zip(res.checkpoint_times, res.checkpoint_lambda)]
                write_table_csv(g, header, rows)
                written.append(g)
        flags = {"T": horizon, "paths": paths, "seed": seed, "record_step": record_step}
        _manifest(out / "manifest.json", "simulate", [spec_file], flags, seed, started, written)
        click.echo(f"wrote {paths} path(s) to {out}")

    _run(body)


def _variants(values):
    out = []
    for v in values:
        for part in v.split(","):
            part = part.strip().upper()
            if part == "ALL":
                out.extend(VARIANT_IDS)
            elif part:
                if part not in VARIANT_IDS:
                    raise Exit(EXIT_INPUT, f"unknown variant {part!r}; expected one of {', '.join(VARIANT_IDS)}")
                out.append(part)
    return list(dict.fromkeys(out)) or ["I"]


def _warm_starts(fits, mask):
    """The best finite fit among the variants nested in ``mask``, embedded as a start."""
    nested = [f for f in fits.values() if np.isfinite(f.loglik) and f.mask.nests_in(mask)]
    if not nested:
        return []
    return [nest_start(max(nested, key=lambda f: f.loglik), mask)]


@main.command("fit")
@click.argument("path_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--variant", "variants", multiple=True, default=("I",), show_default=True,
              help="I..VIII, a comma list, or 'all'.")
@click.option("--restarts", default=3, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--max-iterations", default=4000, show_default=True, type=int)
@click.option("--stderr/--no-stderr", "with_stderr", default=False, show_default=True)
@click.option("--spec", "template_file", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Spec JSON whose mark laws are used; defaults to the path's empirical marks.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_fit(path_file, variants, restarts, seed, max_iterations, with_stderr, template_file, out):
    """Maximum-likelihood fit of one or more variants to a bivariate path CSV."""
    started = time.time()

    def body():
        ids = _variants(variants)
        path = read_path_csv(path_file)
        if path.d != 2:
            raise Exit(EXIT_INPUT, f"variants I..VIII are bivariate; {path_file} has d={path.d}")
        template = load_spec(template_file) if template_file else None
        settings = OptimizerSettings(max_iterations=max_iterations, restarts=restarts, seed=seed)
        fits = {}
        for vid in ids:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                mask = VariantMask.table(vid)
                res = fit(path, mask, template, settings, warm_starts=_warm_starts(fits, mask))
                if with_stderr and res.converged:
                    stderr_fd(res, path, settings)
            fits[vid] = res
        doc = {"path": Path(path_file).name, "path_metadata": path.metadata,
               "settings": settings.to_dict(), "fits": [f.to_dict() for f in fits.values()]}
        write_text(out, dumps_json(doc))
        table = render_table(fits.values())
        table_file = Path(out).with_suffix(".table.txt")
        write_text(table_file, table)
        csv_file = Path(out).with_suffix(".table.csv")
        header, rows = table_rows(fits.values())
        write_table_csv(csv_file, header, [[("" if v is None else v) for v in row] for row in rows])
        flags = {"variants": ids, "restarts": restarts, "seed": seed, "max_iterations": max_iterations,
                 "stderr": with_stderr}
        inputs = [path_file] + ([template_file] if template_file else [])
        _manifest(_manifest_path(out), "fit", inputs, flags, seed, started, [out, table_file, csv_file])
        click.echo(table, nl=False)
        failed = [v for v, f in fits.items() if not f.converged]
        if failed:
            raise Exit(EXIT_FIT, f"not converged: {', '.join(failed)}")

    _run(body)


@main.command("stability")
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, type=click.Path(dir_okay=False))
def cmd_stability(spec_file, out):
    """Eigenvalues of M + M^T and the stability verdict."""
    started = time.time()

    def body():
        spec = load_spec(spec_file)
        rep = stability_report(spec)
        click.echo(f"stable: {'true' if rep.stable else 'false'}")
        click.echo("gamma: " + ", ".join(fmt(g) for g in rep.gamma))
        click.echo("gamma_max: " + fmt(rep.gamma_max))
        if rep.stationary_mean is not None:
            click.echo("stationary_mean: " + ", ".join(fmt(v) for v in rep.stationary_mean))
        if out:
            write_text(out, dumps_json(rep.to_dict()))
            _manifest(_manifest_path(out), "stability", [spec_file], {}, None, started, [out])

    _run(body)


@main.command("moments")
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", default="0:10:1", show_default=True, help="start:stop:step or t1,t2,...")
@click.option("--h", "lag", default=0.0, show_default=True, type=float)
@click.option("--steps-per-unit", default=100, show_default=True, type=int)
@click.option("--out-dir", default=".", show_default=True, type=click.Path(file_okay=False))
def cmd_moments(spec_file, grid, lag, steps_per_unit, out_dir):
    """Mean, second moment and autocovariance curves from lambda(0) = lambda0."""
    started = time.time()

    def body():
        spec = load_spec(spec_file)
        rep = stability_report(spec)
        if not rep.stable:
            raise StabilityError(f"model is unstable: gamma_max = {fmt(rep.gamma_max)}", rep.gamma_max)
        times = parse_grid(grid)
        curve, C = autocovariance_curve(spec, None, times, lag, steps_per_unit)
        d = spec.d
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pairs = [f"{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        files = [out / "mean.csv", out / "second_moment.csv", out / "autocovariance.csv"]
        write_table_csv(files[0], ["t"] + [f"y{k + 1}" for k in range(d)],
                        [[t, *y] for t, y in zip(curve.grid, curve.y)])
        write_table_csv(files[1], ["t"] + [f"V{p}" for p in pairs],
                        [[t, *V.ravel()] for t, V in zip(curve.grid, curve.V)])
        write_table_csv(files[2], ["t", "h"] + [f"C{p}" for p in pairs],
                        [[t, lag, *c.ravel()] for t, c in zip(curve.grid, C)])
        flags = {"grid": grid, "h": lag, "steps_per_unit": steps_per_unit}
        _manifest(out / "manifest.json", "moments", [spec_file], flags, None, started, files)
        click.echo(f"wrote {len(times)} rows to {', '.join(str(f) for f in files)}")

    _run(body)


@main.command("diagnose")
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("path_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--bins", "n_bins", default=10, show_default=True, type=int)
@click.option("--out-dir", default=".", show_default=True, type=click.Path(file_okay=False))
def cmd_diagnose(spec_file, path_file, n_bins, out_dir):
    """Intensity just before each event against its mark, plus binned means."""
    started = time.time()

    def body():
        spec = load_spec(spec_file)
        path = read_path_csv(path_file, d=spec.d)
        diag = intensity_vs_marks(spec, path, n_bins=n_bins)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = [out / "diagnostics.csv", out / "bins.csv"]
        ev = diag.events
        write_table_csv(files[0], ["t", "k", "lambda", "y"],
                        [[float(t), int(k), float(l), float(y)]
                         for t, k, l, y in ev[["t", "k", "lambda", "y"]].itertuples(index=False)])
        write_table_csv(files[1], ["component", "bin_lo", "bin_hi", "mean_abs_jump", "count"],
                        [[int(r.component), float(r.bin_lo), float(r.bin_hi), float(r.mean_abs_jump),
                          int(r.count)] for r in diag.bins.itertuples(index=False)])
        _manifest(out / "manifest.json", "diagnose", [spec_file, path_file], {"bins": n_bins},
                  None, started, files)
        click.echo(f"{len(ev)} events, {len(diag.bins)} bins written to {out}")

    _run(body)


def fit_spec_file(fit_json, variant, out):
    """Write the fitted spec of ``variant`` from a fit JSON as a spec JSON."""
    doc = json.loads(Path(fit_json).read_text())
    for f in doc["fits"]:
        if f["variant_id"] == variant:
            write_text(out, dumps_json(f["spec_hat"]))
            return out
    raise KeyError(variant)


@main.command("export-spec")
@click.argument("fit_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--variant", required=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_export_spec(fit_file, variant, out):
    """Extract one fitted spec from a fit JSON, for use with diagnose or simulate."""

    def body():
        try:
            fit_spec_file(fit_file, variant.upper(), out)
        except (KeyError, json.JSONDecodeError) as exc:
            raise Exit(EXIT_INPUT, f"{fit_file} has no fit for variant {variant}") from exc

    _run(body)


if __name__ == "__main__":  # pragma: no cover
    main()
