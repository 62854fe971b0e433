"""Command-line entry point: ``multicurve {bond,fra,caplet,simulate,calibrate}``.

Every command reads one JSON run configuration, writes its tables into the
output directory and exits with 0 (ok), 2 (configuration), 3 (numerical
failure) or 4 (I/O).  Files are written to a temporary name and renamed, so
a failing run leaves no partial output.  Numbers carry 17 significant digits;
outputs depend only on the configuration, the flags and the seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Sequence

from .affine import Curve, FactorState, ModelParams, bond_price, validate_params
from .calibration import QuoteSet, calibrate, generate_quotes
from .errors import ConfigError, InvalidConfig, MulticurveError, NumericalError
from .montecarlo import SimConfig, mc_bond_price, mc_caplet, mc_fra_legs, simulate
from .pricing import (
    CapletContract,
    FraContract,
    QuadratureConfig,
    caplet_fourier,
    fra_decomposition,
    fra_price,
)

__all__ = ["RunConfig", "load_config", "main", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERICAL", "EXIT_IO"]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

FORMATS = ("csv", "json")


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class SimulateSpec:
    horizon: float = 1.0
    checkpoints: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.horizon > 0:
            raise InvalidConfig(f"simulate.horizon must be > 0, got {self.horizon}")
        if any(not 0 <= t <= self.horizon for t in self.checkpoints):
            raise InvalidConfig("simulate.checkpoints must lie in [0, horizon]")


@dataclass(frozen=True)
class CalibrationSpec:
    """Synthetic-market settings; ``quotes_file`` replaces quote generation."""

    maturities: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0)
    tenors: tuple[float, ...] = (0.25, 0.5)
    noise_sd: float = 0.0
    quotes_file: str | None = None
    initial_guess: ModelParams | None = None
    n_starts: int = 3
    refine: bool = True

    def __post_init__(self):
        if int(self.n_starts) < 1:
            raise InvalidConfig("calibration.n_starts must be >= 1")


@dataclass(frozen=True)
class OutputSpec:
    directory: str = "out"
    format: str = "csv"

    def __post_init__(self):
        if self.format not in FORMATS:
            raise InvalidConfig(f"output format must be one of {FORMATS}, got {self.format!r}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams
    bond_maturities: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0)
    fra: tuple[FraContract, ...] = ()
    caplet: tuple[CapletContract, ...] = ()
    simulation: SimConfig = field(default_factory=SimConfig)
    simulate: SimulateSpec = field(default_factory=SimulateSpec)
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise InvalidConfig("configuration must be a JSON object")
        _check_keys(data, {"model", "bond", "fra", "caplet", "simulation", "simulate",
                           "quadrature", "calibration", "output"}, "config", required={"model"})
        kwargs: dict[str, Any] = {"model": validate_params(ModelParams.from_dict(data["model"]))}
        if "bond" in data:
            _check_keys(data["bond"], {"maturities"}, "bond")
            kwargs["bond_maturities"] = _floats(data["bond"].get("maturities", []), "bond.maturities")
        if "fra" in data:
            kwargs["fra"] = tuple(_build(FraContract, row, "fra", required={"T", "Delta", "K"})
                                  for row in _list(data["fra"], "fra"))
        if "caplet" in data:
            kwargs["caplet"] = tuple(_build(CapletContract, row, "caplet")
                                     for row in _list(data["caplet"], "caplet"))
        if "simulation" in data:
            kwargs["simulation"] = _build(SimConfig, data["simulation"], "simulation")
        if "simulate" in data:
            block = dict(data["simulate"])
            _check_keys(block, {"horizon", "checkpoints"}, "simulate")
            if "checkpoints" in block:
                block["checkpoints"] = _floats(block["checkpoints"], "simulate.checkpoints")
            kwargs["simulate"] = _build(SimulateSpec, block, "simulate")
        if "quadrature" in data:
            kwargs["quadrature"] = _build(QuadratureConfig, data["quadrature"], "quadrature")
        if "calibration" in data:
            block = dict(data["calibration"])
            _check_keys(block, {f.name for f in fields(CalibrationSpec)}, "calibration")
            for key in ("maturities", "tenors"):
                if key in block:
                    block[key] = _floats(block[key], f"calibration.{key}")
            if block.get("initial_guess") is not None:
                block["initial_guess"] = ModelParams.from_dict(block["initial_guess"])
            kwargs["calibration"] = _build(CalibrationSpec, block, "calibration")
        if "output" in data:
            kwargs["output"] = _build(OutputSpec, data["output"], "output")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        calib = {f.name: getattr(self.calibration, f.name) for f in fields(CalibrationSpec)}
        calib["maturities"] = list(calib["maturities"])
        calib["tenors"] = list(calib["tenors"])
        if calib["initial_guess"] is not None:
            calib["initial_guess"] = calib["initial_guess"].to_dict()
        sim = {f.name: getattr(self.simulation, f.name) for f in fields(SimConfig)}
        sim["scheme"] = self.simulation.scheme.value
        quad = {f.name: getattr(self.quadrature, f.name) for f in fields(QuadratureConfig)}
        quad["scheme"] = self.quadrature.scheme.value
        return {
            "model": self.model.to_dict(),
            "bond": {"maturities": list(self.bond_maturities)},
            "fra": [{"T": c.T, "Delta": c.Delta, "K": c.K, "N": c.N} for c in self.fra],
            "caplet": [{"T": c.T, "Delta": c.Delta, "K": c.K} for c in self.caplet],
            "simulation": sim,
            "simulate": {"horizon": self.simulate.horizon,
                         "checkpoints": list(self.simulate.checkpoints)},
            "quadrature": quad,
            "calibration": calib,
            "output": {"directory": self.output.directory, "format": self.output.format},
        }


def _check_keys(block, allowed: set, where: str, required: set = frozenset()):
    if not isinstance(block, dict):
        raise InvalidConfig(f"{where} must be a JSON object")
    unknown = set(block) - allowed
    if unknown:
        raise InvalidConfig(f"unknown keys in {where}: {sorted(unknown)}")
    missing = set(required) - set(block)
    if missing:
        raise InvalidConfig(f"missing keys in {where}: {sorted(missing)}")


def _list(value, where: str) -> list:
    if not isinstance(value, list):
        raise InvalidConfig(f"{where} must be a list")
    return value


def _floats(values, where: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in _list(values, where))
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{where} must contain numbers") from exc


def _build(cls, block, where: str, required: set = frozenset()):
    _check_keys(block, {f.name for f in fields(cls)}, where, required)
    try:
        return cls(**block)
    except TypeError as exc:
        raise InvalidConfig(f"{where}: {exc}") from exc


def load_config(path: str | os.PathLike) -> RunConfig:
    """Parse a run configuration; unreadable files raise ``OSError``."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return RunConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Serialisation


def _num(x) -> str:
    return format(float(x), ".17g")


def _cell(x) -> str:
    if isinstance(x, bool) or x is None or isinstance(x, str):
        return "" if x is None else str(x)
    return _num(x)


def dumps_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with floats at 17 significant digits and non-finite values as null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps_json(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + dumps_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _num(obj) if math.isfinite(obj) else "null"
    if hasattr(obj, "item"):
        return dumps_json(obj.item(), indent, _level)
    return json.dumps(str(obj))


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


class _Output:
    """Collects files and publishes them only once every write succeeded."""

    def __init__(self, directory: str):
        self.directory = Path(directory)
        self._staged: list[tuple[Path, Path]] = []

    def _stage(self, name: str, write: Callable[[io.TextIOBase], None]):
        self.directory.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.directory)
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                write(fh)
        except BaseException:
            os.unlink(tmp)
            raise
        self._staged.append((Path(tmp), self.directory / name))

    def text(self, name: str, content: str):
        self._stage(name, lambda fh: fh.write(content))

    def stream(self, name: str, write: Callable[[io.TextIOBase], None]):
        self._stage(name, write)

    def table(self, stem: str, fmt: str, header: Sequence[str], rows: Sequence[Sequence]):
        if fmt == "csv":
            self.text(f"{stem}.csv", _csv_text(header, rows))
        else:
            records = [dict(zip(header, row)) for row in rows]
            self.text(f"{stem}.json", dumps_json(records) + "\n")

    def commit(self) -> list[Path]:
        done = []
        for tmp, final in self._staged:
            os.replace(tmp, final)
            done.append(final)
        self._staged.clear()
        return done

    def discard(self):
        for tmp, _ in self._staged:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
        self._staged.clear()


# ---------------------------------------------------------------------------
# Commands


def cmd_bond(config: RunConfig, out: _Output, fmt: str, maturities=None) -> list[list]:
    """Risk-free and risky discount curves with the implied spread."""
    params = config.model
    state = params.initial_state()
    mats = config.bond_maturities if maturities is None else tuple(maturities)
    rows = []
    for T in mats:
        p = bond_price(Curve.RISK_FREE, state, T, params)
        pbar = bond_price(Curve.RISKY, state, T, params)
        spread = -math.log(pbar / p) / T if T > 0 else state.spread(params.kappa)
        rows.append([T, p, pbar, spread])
    out.table("bond", fmt, ["T", "p", "pbar", "spread"], rows)
    return rows


_FRA_HEADER = ["T", "Delta", "K", "N", "nu_single", "adjustment", "corr_exponential",
               "nu_bar", "K_single", "K_risky", "value"]


def cmd_fra(config: RunConfig, out: _Output, fmt: str, use_mc: bool = False) -> list[list]:
    """Per trade: single-curve quantity, both factors, risky result and FRA value."""
    if not config.fra:
        raise InvalidConfig("no FRA trades in the configuration")
    params = config.model
    state = params.initial_state()
    header = list(_FRA_HEADER)
    if use_mc:
        header += ["mc_value", "mc_std_error", "mc_flag"]
    rows = []
    for c in config.fra:
        d = fra_decomposition(state, c.T, c.Delta, params)
        row = [c.T, c.Delta, c.K, c.N, d.nu_single, d.adjustment, d.corr_exponential,
               d.nu_bar, d.K_single, d.K_risky, fra_price(state, c, params)]
        if use_mc:
            est = mc_fra_legs(c, params, config.simulation).value
            row += [est.mean, est.std_error, _flag(est.mean, est.std_error, row[-1])]
        rows.append(row)
    out.table("fra", fmt, header, rows)
    return rows


def _flag(mc_mean: float, mc_se: float, reference: float) -> str:
    return "PASS" if abs(mc_mean - reference) <= 3.0 * mc_se else "FAIL"


def cmd_caplet(config: RunConfig, out: _Output, fmt: str, use_mc: bool = False,
               damping: float | None = None) -> list[list]:
    """Fourier caplet prices with inversion diagnostics and an optional MC check.

    ``damping`` forces the damping parameter and disables its adaptation, so
    a value outside the MGF strip surfaces as an error.
    """
    if not config.caplet:
        raise InvalidConfig("no caplet trades in the configuration")
    params = config.model
    state = params.initial_state()
    quad = config.quadrature
    if damping is not None:
        quad = replace(quad, R=float(damping), adapt_R=False)
    header = ["T", "Delta", "K", "price", "R", "v_max", "n_points", "method"]
    if use_mc:
        header += ["mc_mean", "mc_std_error", "mc_flag"]
    rows = []
    for c in config.caplet:
        res = caplet_fourier(c, params, state, quad)
        row = [c.T, c.Delta, c.K, res.price, res.R, res.v_max, res.n_points, res.method]
        if use_mc:
            est = mc_caplet(c, params, config.simulation)
            row += [est.mean, est.std_error, _flag(est.mean, est.std_error, res.price)]
        rows.append(row)
    out.table("caplet", fmt, header, rows)
    return rows


def cmd_simulate(config: RunConfig, out: _Output, fmt: str) -> dict:
    """Factor paths plus MC bond prices at the horizon against the analytic ones."""
    params = config.model
    spec = config.simulate
    paths = simulate(params, config.simulation, spec.horizon, spec.checkpoints)
    out.stream("paths.csv", paths.to_csv)
    state = params.initial_state()
    report: dict[str, Any] = {
        "horizon": spec.horizon,
        "n_paths": int(config.simulation.n_paths),
        "seed": int(config.simulation.seed),
        "scheme": config.simulation.scheme.value,
        "bonds": {},
    }
    for curve in (Curve.RISK_FREE, Curve.RISKY):
        est = mc_bond_price(curve, spec.horizon, params, config.simulation)
        exact = bond_price(curve, state, spec.horizon, params)
        report["bonds"][curve.value] = {**est.as_dict(), "analytic": exact,
                                        "flag": _flag(est.mean, est.std_error, exact)}
    out.text("simulate.json", dumps_json(report) + "\n")
    return report


def cmd_calibrate(config: RunConfig, out: _Output, fmt: str, seed: int) -> dict:
    """Generate (or read) quotes, run both calibration stages, write the result."""
    spec = config.calibration
    if spec.quotes_file is not None:
        path = Path(spec.quotes_file)
        text = path.read_text()
        if path.suffix.lower() == ".json":
            try:
                quotes = QuoteSet.from_dict(json.loads(text))
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"{path}: invalid JSON ({exc.msg})") from exc
        else:
            quotes = QuoteSet.from_csv(text)
    else:
        quotes = generate_quotes(config.model, spec.maturities, spec.tenors,
                                 noise_sd=spec.noise_sd, seed=seed)
    if fmt == "csv":
        out.text("quotes.csv", quotes.to_csv())
    else:
        out.text("quotes.json", dumps_json(quotes.to_dict()) + "\n")
    guess = spec.initial_guess or config.model
    result = calibrate(quotes, guess, seed=seed, n_starts=spec.n_starts, refine=spec.refine)
    report = result.to_dict()
    if spec.quotes_file is None:
        report["kappa_true"] = config.model.kappa
    out.text("calibration.json", dumps_json(report) + "\n")
    return report


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="seed (unsigned 64-bit)")
    common.add_argument("--out", default=None, metavar="DIR", help="output directory")
    common.add_argument("--mc", action="store_true", help="add a Monte Carlo cross-check")
    common.add_argument("--format", choices=FORMATS, default=None, help="table format")
    common.add_argument("--jobs", type=int, default=None, help="simulation worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="multicurve", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    bond = sub.add_parser("bond", parents=[common], help="discount curves for both bonds")
    bond.add_argument("--maturities", type=float, nargs="+", default=None)
    sub.add_parser("fra", parents=[common], help="FRA decomposition report")
    caplet = sub.add_parser("caplet", parents=[common], help="Fourier caplet prices")
    caplet.add_argument("--damping", type=float, default=None,
                        help="force the damping parameter R (no adaptation)")
    sub.add_parser("simulate", parents=[common], help="factor paths and MC bond prices")
    sub.add_parser("calibrate", parents=[common], help="two-stage synthetic calibration")
    return parser


def _apply_flags(config: RunConfig, args) -> RunConfig:
    sim = config.simulation
    if args.seed is not None:
        sim = replace(sim, seed=args.seed)
    if args.jobs is not None:
        sim = replace(sim, n_jobs=args.jobs)
    output = config.output
    if args.out is not None:
        output = replace(output, directory=args.out)
    if args.format is not None:
        output = replace(output, format=args.format)
    return replace(config, simulation=sim, output=output)


def run(args) -> list[Path]:
    config = _apply_flags(load_config(args.config), args)
    out = _Output(config.output.directory)
    fmt = config.output.format
    try:
        if args.command == "bond":
            cmd_bond(config, out, fmt, args.maturities)
        elif args.command == "fra":
            cmd_fra(config, out, fmt, args.mc)
        elif args.command == "caplet":
            cmd_caplet(config, out, fmt, args.mc, args.damping)
        elif args.command == "simulate":
            cmd_simulate(config, out, fmt)
        else:
            cmd_calibrate(config, out, fmt, int(config.simulation.seed))
        return out.commit()
    except BaseException:
        out.discard()
        raise


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        for path in run(args):
            print(path)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    except MulticurveError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)
    return EXIT_OK


def _fail(code: int, exc: BaseException) -> int:
    message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
