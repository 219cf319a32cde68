"""Command-line front end.

    nanocool run <config>        run the scenario named in the config
    nanocool design <config>     controller design only
    nanocool calibrate <config>  synthetic calibration round trip
    nanocool sweep <config>      delay or pressure sweep

Every run writes ``manifest.json`` (config echo, seed, versions; it can be
passed back as the config to repeat the run), result tables and
``summary.json``. Exit codes: 0 success, 1 other failure, 2 invalid
config, 3 closed-loop instability (results so far are still written).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, dump_manifest, load_raw, validate_config
from .errors import InstabilityError

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_UNSTABLE = 0, 1, 2, 3

VERB_KINDS = {
    "design": ("design",),
    "calibrate": ("calibrate",),
    "sweep": ("delay-sweep", "pressure-sweep"),
}


def versions() -> dict:
    import numba
    import scipy

    return {"nanocool": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _cell(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.15g}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_table(path: Path, header, rows, fmt: str) -> Path:
    rows = [list(r) for r in rows]
    if fmt == "json":
        path = path.with_suffix(".json")
        recs = [dict(zip(header, (_jsonable(v) for v in r))) for r in rows]
        path.write_text(json.dumps(recs, indent=1))
        return path
    path = path.with_suffix(".csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def _fail(category: str, details, code: int, out_dir: Path | None = None) -> int:
    err = {"error": category, "details": list(details)}
    print(json.dumps(err), file=sys.stderr)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(json.dumps(err, indent=2))
        except OSError:
            pass
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nanocool", description="Feedback-cooling simulations and controller design.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, text in [("run", "run the configured scenario"), ("design", "design the controller"),
                       ("calibrate", "synthetic calibration round trip"), ("sweep", "delay or pressure sweep")]:
        s = sub.add_parser(verb, help=text)
        s.add_argument("config", help="YAML config or a manifest.json from an earlier run")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out-dir", default=None, help="override output.directory")
        s.add_argument("--threads", type=int, default=1, help="worker threads for ensemble runs")
        s.add_argument("--format", choices=("csv", "json"), default=None, help="result table format")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out_dir) if args.out_dir else None
    try:
        raw = load_raw(args.config)
        if args.verb in ("design", "calibrate"):
            scen = dict(raw.get("scenario") or {})
            if scen.get("kind") != args.verb:
                # the verb selects the scenario; keep its own options if the kinds match
                raw = {**raw, "scenario": {"kind": args.verb}}
        if args.seed is not None:
            raw = {**raw, "seed": args.seed}
        cfg = validate_config(raw)
    except ConfigError as exc:
        return _fail("config", exc.errors, EXIT_CONFIG, out_dir)
    except OSError as exc:
        return _fail("config", [f"cannot read {args.config}: {exc}"], EXIT_CONFIG, out_dir)
    if args.verb == "sweep" and cfg.scenario.kind not in VERB_KINDS["sweep"]:
        return _fail("config", [f"scenario.kind: 'sweep' needs a delay-sweep or pressure-sweep, got "
                                f"{cfg.scenario.kind!r}"], EXIT_CONFIG, out_dir)
    if args.threads < 1:
        return _fail("config", ["--threads must be at least 1"], EXIT_CONFIG, out_dir)
    out_dir = out_dir or Path(cfg.output.directory)
    fmt = args.format or cfg.output.format

    from .scenarios import execute_scenario

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(dump_manifest(raw, cfg.seed, versions()))
        result = execute_scenario(cfg, threads=args.threads)
    except InstabilityError as exc:
        return _fail("instability", [str(exc)], EXIT_UNSTABLE, out_dir)
    except ConfigError as exc:
        return _fail("config", exc.errors, EXIT_CONFIG, out_dir)
    except (ValueError, OverflowError) as exc:
        return _fail("invalid-input", [f"{type(exc).__name__}: {exc}"], EXIT_OTHER, out_dir)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable category
        return _fail("runtime", [f"{type(exc).__name__}: {exc}"], EXIT_OTHER, out_dir)

    files = [str(write_table(out_dir / name, header, rows, fmt).name)
             for name, (header, rows) in result.tables.items()]
    summary = {"scenario": cfg.scenario.kind, "seed": cfg.seed, "status": "unstable" if result.unstable else "ok",
               "files": files, **result.summary}
    if result.message:
        summary["message"] = result.message
    (out_dir / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2))
    if result.unstable:
        return _fail("instability", [result.message], EXIT_UNSTABLE)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
