"""Command line interface.

Each subcommand writes one artifact (JSON or CSV of plot-ready columns) and a
``<artifact>.manifest.json`` next to it holding the resolved configuration,
the seed and library versions.  Options can also come from a JSON file given
with ``--config``; explicit flags win over the file, which wins over the
built-in defaults.

Exit status is 0 on success, 1 on a runtime failure and 2 when the inputs
are rejected.  Failures are reported on stderr as one line of JSON.
"""

import argparse
import csv
import io
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, constants
from .avalanche import AvalancheConfig, sample_gain_histogram
from .errors import ApdGainError, InvalidParameterError, ParseError, ValidationError
from .gainstats import (
    McIntyreParams,
    TruncationPolicy,
    enf_empirical,
    enf_theory,
    mcintyre_pmf,
    moments,
)
from .inference import (
    SPECTRUM_PARAMETERS,
    EnfPoint,
    GainCurvePoint,
    calibrate_gain,
    enf_standard_error,
    fit_k,
    fit_spectrum,
)
from .ingest import PulseTiming, Readout, extract_pulse_heights, parse_trace, render_staircase
from .spectrum import (
    DeviceModel,
    Histogram,
    default_edges,
    histogram,
    synthesize_pulses,
    theoretical_spectrum,
)

OUTPUT_DIR_ENV = "APDGAIN_OUTPUT_DIR"


class UsageError(ValidationError):
    kind = "usage-error"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# option tables: (flag, dest, type, default, help)

def _csv_names(text):
    return [s.strip() for s in str(text).split(",") if s.strip()]


_GAIN = [
    ("--k", "k", float, constants.REF_K, "ionization coefficient ratio beta/alpha"),
    ("--M", "M", float, 3.7, "average gain"),
]
_TRUNC = [("--tail-tolerance", "tail_tolerance", float, 1e-9, "tail mass allowed beyond the pmf support")]
_DEVICE = _GAIN + [
    ("--n-bar", "n_bar", float, constants.N_BAR, "mean primaries per pulse"),
    ("--dark-rate", "dark_rate", float, constants.DARK_RATE, "dark primaries per pulse"),
    ("--sigma-read", "sigma_read", float, constants.SIGMA_READ, "amplifier noise, electrons r.m.s."),
    ("--sigma-post", "sigma_post", float, constants.SIGMA_POST, "post-amplifier noise, electrons r.m.s."),
    ("--C-f", "C_f", float, constants.FEEDBACK_CAPACITANCE, "feedback capacitance, F"),
    ("--voltage-gain", "voltage_gain", float, constants.VOLTAGE_GAIN, "voltage gain after the integrator"),
]
_TIMING = [
    ("--repetition-rate", "repetition_rate", float, constants.REPETITION_RATE, "pulse rate, Hz"),
    ("--pulse-width", "pulse_width", float, constants.PULSE_WIDTH, "pulse width, s"),
    ("--sampling-rate", "sampling_rate", float, constants.SAMPLING_RATE, "trace sampling rate, Hz"),
]
_SEEDED = [
    ("--seed", "seed", int, 0, "random seed"),
    ("--workers", "workers", int, 1, "worker threads (results do not depend on it)"),
]
_FIT = [
    ("--free", "free", _csv_names, ["M", "k"], "comma-separated parameters to fit"),
    ("--restarts", "restarts", int, 3, "random simplex restarts"),
    ("--n-max", "n_max", int, 3, "highest Poisson order in the mixture"),
]

SUBCOMMANDS = {
    "pmf": ("single-carrier gain pmf table", _GAIN + _TRUNC),
    "enf": ("excess noise factor versus gain", [
        ("--k", "k", float, constants.REF_K, "ionization coefficient ratio"),
        ("--M", "M", float, None, "single gain (overrides the range)"),
        ("--M-min", "M_min", float, 1.0, "first gain of the curve"),
        ("--M-max", "M_max", float, 20.0, "last gain of the curve"),
        ("--points", "points", int, 39, "number of gains on the curve"),
    ] + _TRUNC),
    "mc": ("Monte Carlo gain histogram", _GAIN + _SEEDED + [
        ("--trials", "trials", int, 100000, "injected holes"),
        ("--event-cap", "event_cap", int, 10**7, "ionizations per trial before censoring"),
    ]),
    "synth": ("synthetic pulse-height data", _DEVICE + _SEEDED + _TIMING + _TRUNC + [
        ("--pulses", "pulses", int, 100000, "number of light pulses"),
        ("--trace", "trace", str, None, "also write the rendered amplifier trace to this CSV"),
        ("--drift", "drift", float, 0.0, "linear drift added to the trace, electrons/s"),
        ("--reset-every", "reset_every", int, None, "discharge the integrator every N pulses"),
    ]),
    "spectrum-theory": ("theoretical pulse-height density", _DEVICE + _TRUNC + [
        ("--grid-min", "grid_min", float, -30.0, "first grid point, electrons"),
        ("--grid-max", "grid_max", float, 200.0, "last grid point, electrons"),
        ("--grid-step", "grid_step", float, 0.25, "grid spacing, electrons"),
        ("--n-max", "n_max", int, 3, "highest Poisson order in the mixture"),
    ]),
    "fit-k": ("fit k to (M, F) points", [
        ("--input", "input", str, None, "CSV with columns M,F[,weight]"),
    ]),
    "fit-spectrum": ("fit a pulse-height histogram", _DEVICE + _FIT + _TRUNC + [
        ("--input", "input", str, None, "histogram JSON or pulse CSV"),
        ("--seed", "seed", int, 0, "seed for restart points"),
    ]),
    "gain-curve": ("average gain versus bias", [
        ("--input", "input", str, None, "CSV with columns bias_voltage,mean_output_carriers"),
        ("--unity-bias", "unity_bias", float, constants.UNITY_GAIN_BIAS, "bias where the gain is 1, V"),
        ("--window", "window", float, 0.5, "plateau half-width, V"),
        ("--max-slope", "max_slope", float, 0.02, "largest relative plateau slope per volt"),
    ]),
    "analyze": ("trace -> pulse heights -> histogram -> spectrum fit", _DEVICE + _FIT + _TIMING + _TRUNC + [
        ("--input", "input", str, None, "trace CSV with columns timestamp,voltage"),
        ("--drift-window", "drift_window", int, 50, "drift slope window, samples"),
        ("--heights-out", "heights_out", str, None, "also write per-pulse heights to this CSV"),
        ("--seed", "seed", int, 0, "seed for restart points"),
    ]),
}

_REQUIRED = {"fit-k": ["input"], "fit-spectrum": ["input"], "gain-curve": ["input"], "analyze": ["input"]}


def build_parser():
    parser = _Parser(prog="apdgain", description="APD gain statistics toolkit.")
    parser.add_argument("--version", action="version", version=f"apdgain {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (help_text, options) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        for flag, dest, typ, default, help_ in options:
            shown = ",".join(default) if isinstance(default, list) else default
            p.add_argument(flag, dest=dest, type=typ, default=None, help=f"{help_} (default: {shown})")
        p.add_argument("--out", default=None, help="output file, '-' for stdout")
        p.add_argument("--format", choices=("json", "csv"), default=None, help="output format")
        p.add_argument("--config", default=None, help="JSON file of option values")
    return parser


def resolve_config(command, args):
    """Defaults, then the ``--config`` file, then explicit flags."""
    options = SUBCOMMANDS[command][1]
    cfg = {dest: default for _, dest, _, default, _ in options}
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidParameterError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise InvalidParameterError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg) - {"out", "format"}
        if unknown:
            raise InvalidParameterError(f"unknown config keys for {command}: {sorted(unknown)}")
        for key in ("out", "format"):
            if key in loaded and getattr(args, key) is None:
                setattr(args, key, loaded.pop(key))
        if "free" in loaded and isinstance(loaded["free"], str):
            loaded["free"] = _csv_names(loaded["free"])
        cfg.update(loaded)
    for _, dest, _, _, _ in options:
        value = getattr(args, dest)
        if value is not None:
            cfg[dest] = value
    for dest in _REQUIRED.get(command, []):
        if not cfg.get(dest):
            raise UsageError(f"{command}: --{dest} is required")
        if not Path(cfg[dest]).is_file():
            raise InvalidParameterError(f"{command}: input file {cfg[dest]} does not exist")
    return cfg


# --------------------------------------------------------------------------
# helpers

def _versions():
    import numba
    import scipy

    return {
        "apdgain": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "python": platform.python_version(),
    }


def _json_text(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_text(header, rows):
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")
    return buf.getvalue()


def _trunc(cfg):
    return TruncationPolicy(tail_tolerance=cfg["tail_tolerance"])


def _device(cfg):
    return DeviceModel(
        n_bar=cfg["n_bar"], dark_rate=cfg["dark_rate"], gain=McIntyreParams(cfg["k"], cfg["M"]),
        C_f=cfg["C_f"], voltage_gain=cfg["voltage_gain"], sigma_read=cfg["sigma_read"],
        sigma_post=cfg["sigma_post"],
    )


def _timing(cfg):
    return PulseTiming(cfg["repetition_rate"], cfg["pulse_width"], cfg["sampling_rate"])


def _read_csv_columns(path, required, optional=()):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path} is empty")
    header = [c.strip() for c in rows[0]]
    missing = [c for c in required if c not in header]
    if missing:
        raise ParseError(f"{path}: missing columns {missing}; header is {header}")
    cols = {}
    bad = []
    for name in list(required) + [c for c in optional if c in header]:
        j = header.index(name)
        values = []
        for lineno, row in enumerate(rows[1:], start=2):
            try:
                values.append(float(row[j]))
            except (ValueError, IndexError):
                bad.append(lineno)
        cols[name] = np.array(values)
    if bad:
        raise ParseError(f"{path}: malformed lines {sorted(set(bad))[:20]}", sorted(set(bad)))
    return cols


def _histogram_from_file(path):
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        return Histogram.from_dict(data.get("histogram", data))
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    column = "electrons_observed" if "electrons_observed" in header else "electrons"
    values = _read_csv_columns(path, [column])[column]
    return histogram(values, default_edges(values))


def _fit_artifacts(result, fmt, extra=None):
    if fmt == "csv":
        buf = io.StringIO()
        result.residuals.to_csv(buf)
        return buf.getvalue()
    out = result.to_dict()
    if extra:
        out.update(extra)
    return _json_text(out)


# --------------------------------------------------------------------------
# subcommands; each returns (artifact text, default format, extra manifest fields)

def cmd_pmf(cfg, fmt):
    dist = mcintyre_pmf(McIntyreParams(cfg["k"], cfg["M"]), _trunc(cfg))
    if fmt == "csv":
        return _csv_text(("m", "p"), ((m, float(dist.pmf[m])) for m in dist.support))
    out = dist.to_dict()
    mean, var = moments(dist)
    out.update({"mean": mean, "variance": var, "enf": enf_empirical(dist), "enf_theory": enf_theory(dist.params)})
    return _json_text(out)


def cmd_enf(cfg, fmt):
    k = cfg["k"]
    if cfg["M"] is not None:
        gains = [cfg["M"]]
    else:
        if cfg["points"] < 1:
            raise InvalidParameterError("points must be >= 1")
        gains = np.linspace(cfg["M_min"], cfg["M_max"], cfg["points"]).tolist()
    rows = []
    for M in gains:
        params = McIntyreParams(k, M)
        rows.append((M, enf_theory(params), enf_empirical(mcintyre_pmf(params, _trunc(cfg)))))
    if fmt == "csv":
        return _csv_text(("M", "F", "F_pmf"), rows)
    return _json_text({"k": k, "points": [{"M": M, "F": F, "F_pmf": Fp} for M, F, Fp in rows]})


def cmd_mc(cfg, fmt):
    acfg = AvalancheConfig.for_gain(cfg["k"], cfg["M"], seed=cfg["seed"], event_cap=cfg["event_cap"])
    run = sample_gain_histogram(acfg, cfg["trials"], workers=cfg["workers"])
    dist = run.distribution
    counts = np.bincount(run.outcomes[run.outcomes > 0], minlength=dist.pmf.size)
    if fmt == "csv":
        return _csv_text(("m", "count", "p"), ((m, int(counts[m]), float(dist.pmf[m])) for m in dist.support))
    mean, var = moments(dist)
    analytic = McIntyreParams(cfg["k"], cfg["M"])
    return _json_text({
        "distribution": dist.to_dict(),
        "run": run.manifest(),
        "mean": mean,
        "mean_standard_error": float(np.sqrt(var / run.trials)),
        "enf": enf_empirical(dist),
        "enf_standard_error": enf_standard_error(dist, run.trials),
        "enf_theory": enf_theory(analytic),
    })


def cmd_synth(cfg, fmt):
    device = _device(cfg)
    table = synthesize_pulses(device, cfg["pulses"], seed=cfg["seed"], workers=cfg["workers"],
                              trunc=_trunc(cfg))
    if cfg["trace"]:
        trace = render_staircase(table.electrons_observed, _timing(cfg),
                                 Readout(cfg["C_f"], cfg["voltage_gain"]),
                                 drift_rate=cfg["drift"], reset_every=cfg["reset_every"])
        with open(cfg["trace"], "w", newline="") as fh:
            trace.to_csv(fh)
    if fmt == "csv":
        buf = io.StringIO()
        table.to_csv(buf)
        return buf.getvalue()
    values = table.electrons_observed
    hist = histogram(values, default_edges(values))
    return _json_text({"device": device.to_dict(), "pulses": len(table), "histogram": hist.to_dict()})


def cmd_spectrum_theory(cfg, fmt):
    if cfg["grid_step"] <= 0 or cfg["grid_max"] <= cfg["grid_min"]:
        raise InvalidParameterError("need grid_step > 0 and grid_max > grid_min")
    n = int(round((cfg["grid_max"] - cfg["grid_min"]) / cfg["grid_step"])) + 1
    grid = cfg["grid_min"] + cfg["grid_step"] * np.arange(n)
    dens = theoretical_spectrum(_device(cfg), grid, n_max=cfg["n_max"], trunc=_trunc(cfg))
    if fmt == "csv":
        return _csv_text(("electrons", "density"), zip(dens.grid.tolist(), dens.density.tolist()))
    return _json_text(dens.to_dict())


def cmd_fit_k(cfg, fmt):
    cols = _read_csv_columns(cfg["input"], ["M", "F"], ["weight"])
    weights = cols.get("weight", np.ones_like(cols["M"]))
    points = [EnfPoint(float(M), float(F), float(w)) for M, F, w in zip(cols["M"], cols["F"], weights)]
    result = fit_k(points)
    if fmt == "csv":
        k = result.parameters["k"]
        return _csv_text(("M", "F", "F_fit"), ((p.M, p.F, enf_theory(McIntyreParams(k, p.M))) for p in points))
    return _json_text(result.to_dict())


def _check_free(free):
    unknown = set(free) - set(SPECTRUM_PARAMETERS)
    if unknown:
        raise InvalidParameterError(f"cannot fit {sorted(unknown)}; choose from {list(SPECTRUM_PARAMETERS)}")


def cmd_fit_spectrum(cfg, fmt):
    _check_free(cfg["free"])
    hist = _histogram_from_file(cfg["input"])
    result = fit_spectrum(hist, _device(cfg), set(cfg["free"]), n_max=cfg["n_max"],
                          restarts=cfg["restarts"], seed=cfg["seed"], trunc=_trunc(cfg))
    return _fit_artifacts(result, fmt)


def cmd_gain_curve(cfg, fmt):
    cols = _read_csv_columns(cfg["input"], ["bias_voltage", "mean_output_carriers"])
    curve = [GainCurvePoint(float(b), float(v)) for b, v in zip(cols["bias_voltage"], cols["mean_output_carriers"])]
    gains = calibrate_gain(curve, cfg["unity_bias"], window=cfg["window"], max_relative_slope=cfg["max_slope"])
    if fmt == "csv":
        return _csv_text(("bias_voltage", "M"), gains)
    return _json_text({"unity_bias": cfg["unity_bias"], "points": [{"bias_voltage": b, "M": M} for b, M in gains]})


def cmd_analyze(cfg, fmt):
    _check_free(cfg["free"])
    trace = parse_trace(cfg["input"])
    heights = extract_pulse_heights(trace, _timing(cfg), Readout(cfg["C_f"], cfg["voltage_gain"]),
                                    window=cfg["drift_window"])
    if cfg["heights_out"]:
        with open(cfg["heights_out"], "w", newline="") as fh:
            heights.to_csv(fh)
    hist = histogram(heights.electrons, default_edges(heights.electrons))
    result = fit_spectrum(hist, _device(cfg), set(cfg["free"]), n_max=cfg["n_max"],
                          restarts=cfg["restarts"], seed=cfg["seed"], trunc=_trunc(cfg))
    extra = {
        "pulses": len(heights),
        "dropped_resets": len(heights.dropped),
        "drift_corrected": heights.drift_corrected,
        "histogram": hist.to_dict(),
    }
    return _fit_artifacts(result, fmt, extra)


COMMANDS = {
    "pmf": cmd_pmf,
    "enf": cmd_enf,
    "mc": cmd_mc,
    "synth": cmd_synth,
    "spectrum-theory": cmd_spectrum_theory,
    "fit-k": cmd_fit_k,
    "fit-spectrum": cmd_fit_spectrum,
    "gain-curve": cmd_gain_curve,
    "analyze": cmd_analyze,
}

_DEFAULT_FORMAT = {"synth": "csv"}


def _output_path(command, out, fmt):
    if out == "-":
        return None
    if out:
        return Path(out)
    base = Path(os.environ.get(OUTPUT_DIR_ENV) or ".")
    return base / f"{command}.{fmt}"


def run(argv=None, stdout=None):
    """Execute one command; returns the exit status."""
    stdout = stdout or sys.stdout
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        cfg = resolve_config(command, args)
        fmt = args.format or _DEFAULT_FORMAT.get(command, "json")
        text = COMMANDS[command](cfg, fmt)
        path = _output_path(command, args.out, fmt)
        manifest = {"command": command, "config": cfg, "format": fmt,
                    "seed": cfg.get("seed"), "versions": _versions()}
        if path is None:
            stdout.write(text)
            stdout.flush()
            manifest_path = _output_path(command, None, fmt).with_suffix(".manifest.json")
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
            manifest["output"] = str(path)
            manifest_path = path.with_name(path.name + ".manifest.json")
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(_json_text(manifest))
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ApdGainError as exc:
        _report(exc.kind, str(exc), command)
        return 2 if isinstance(exc, ValidationError) else 1
    except (OSError, ValueError) as exc:
        _report("invalid-input" if isinstance(exc, ValueError) else "io-error", str(exc), command)
        return 2 if isinstance(exc, ValueError) else 1
    except Exception as exc:  # noqa: BLE001 - last line of defence, still one line
        _report("internal-error", f"{type(exc).__name__}: {exc}", command)
        return 1


def _report(kind, message, command):
    line = {"error": kind, "message": " ".join(message.split())}
    if command:
        line["command"] = command
    sys.stderr.write(json.dumps(line, sort_keys=True) + "\n")


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
