"""Command-line entry point.

Verbs: ``run``, ``sweep``, ``bandwidth``, ``selftest``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 internal
invariant violation (including a failed selftest).

Environment: ``TIERKV_OUT`` overrides the config file's output directory
(``--out`` still wins); ``TIERKV_VERBOSE=1`` enables debug logging.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import analytics
from .analytics import GB, TB, BandwidthParams
from .config import ShadowConfig
from .errors import DataError, ParameterError, StateError, TierKVError
from .pipeline import SWEEP_AXES, SWEEP_COLUMNS, RunConfig, execute, sweep_point
from .workload import GeneratorSpec

log = logging.getLogger("tierkv")

SCHEMA_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_INTERNAL = 0, 2, 3


class ConfigError(TierKVError):
    pass


_NUM = {"type": "number"}
_INT = {"type": "integer", "minimum": 0}

RUN_REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "schema_version",
        "timestamp",
        "generator",
        "shadow",
        "metrics",
        "footprint",
        "tier_stats",
        "bandwidth",
        "steps",
    ],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "timestamp": {"type": "string"},
        "generator": {"type": "object"},
        "shadow": {"type": "object", "required": ["rank", "chunk_size", "outliers", "budget"]},
        "metrics": {
            "type": "object",
            "required": ["hit_rate"],
            "properties": {
                "hit_rate": {"type": "number", "minimum": 0, "maximum": 1},
                "max_abs_error": {"type": "number", "minimum": 0},
                "recall_mean": {"type": "number", "minimum": 0, "maximum": 1},
                "needle": {
                    "type": "object",
                    "required": ["positions", "max_abs_error"],
                    "properties": {"max_abs_error": {"type": "number", "minimum": 0}},
                },
            },
        },
        "footprint": {
            "type": "object",
            "required": ["fast_tier_bytes", "slow_tier_bytes", "key_compression"],
            "additionalProperties": _NUM,
        },
        "tier_stats": {
            "type": "object",
            "required": ["slow_tier_bytes", "fast_tier_bytes", "bytes_fetched_total", "chunks_requested", "chunks_hit"],
            "properties": {
                "slow_tier_bytes": _INT,
                "fast_tier_bytes": _INT,
                "bytes_fetched_total": _INT,
                "chunks_requested": _INT,
                "chunks_hit": _INT,
            },
        },
        "bandwidth": {"type": "object", "required": ["params", "equivalent_bandwidth"]},
        "steps": {"type": "integer", "minimum": 1},
    },
}

TRACE_RECORD_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "step", "selected_chunks", "hit_rate", "chunks_requested", "chunks_hit"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "step": {"type": "integer", "minimum": 0},
        "selected_chunks": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
        "hit_rate": {"type": "number", "minimum": 0, "maximum": 1},
    },
}


# -- config ------------------------------------------------------------------


def _keys(cls):
    return {f.name for f in fields(cls)}


def _section(known, data, name):
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return data


BANDWIDTH_KEYS = _keys(BandwidthParams) | {"gpu_bandwidth_tbps", "pcie_bandwidth_gbps"}


def _bandwidth_from(data):
    data = dict(_section(BANDWIDTH_KEYS, data, "bandwidth"))
    if "gpu_bandwidth_tbps" in data:
        data["gpu_bandwidth"] = data.pop("gpu_bandwidth_tbps") * TB
    if "pcie_bandwidth_gbps" in data:
        data["pcie_bandwidth"] = data.pop("pcie_bandwidth_gbps") * GB
    return BandwidthParams(**data)


RUN_KEYS = {"steps", "oracle", "out", "format"}


def load_config(path=None) -> RunConfig:
    """Parse a YAML run configuration (see README for the grammar)."""
    doc = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
    unknown = set(doc) - {"generator", "shadow", "bandwidth", "run"}
    if unknown:
        raise ConfigError(f"unknown top-level sections: {sorted(unknown)}")
    run = doc.get("run") or {}
    if not isinstance(run, dict) or set(run) - RUN_KEYS:
        raise ConfigError(f"'run' accepts only {sorted(RUN_KEYS)}")
    base = RunConfig()
    try:
        gen = GeneratorSpec(**_section(_keys(GeneratorSpec), doc.get("generator"), "generator"))
        shadow_doc = _section(_keys(ShadowConfig), doc.get("shadow"), "shadow")
        shadow = ShadowConfig(**{**base.shadow.as_dict(), **shadow_doc})
        bw = _bandwidth_from(doc.get("bandwidth"))
        return RunConfig(generator=gen, shadow=shadow, bandwidth=bw, **run)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _resolve(args) -> RunConfig:
    rc = load_config(args.config)
    out = rc.out if args.config else None
    out = os.environ.get("TIERKV_OUT") or out
    out = args.out or out or "."
    kw = {"out": out}
    if getattr(args, "format", None):
        kw["format"] = args.format
    if getattr(args, "oracle", False):
        kw["oracle"] = True
    if getattr(args, "steps", None) is not None:
        kw["steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        kw["generator"] = replace(rc.generator, seed=args.seed)
    rc = replace(rc, **kw)
    if not Path(rc.out).is_dir():
        raise ConfigError(f"output directory {rc.out} does not exist")
    return rc


# -- output ------------------------------------------------------------------


def atomic_write(path: Path, data: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, list):
            yield key, json.dumps(v)
        else:
            yield key, v


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _timestamp():
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_run_report(result: dict, out_dir, fmt: str) -> list:
    out_dir = Path(out_dir)
    trace = [{"schema_version": SCHEMA_VERSION, **_jsonable(r)} for r in result["trace"]]
    report = {"schema_version": SCHEMA_VERSION, "timestamp": _timestamp()}
    report.update(_jsonable({k: v for k, v in result.items() if k != "trace" and not k.startswith("_")}))
    try:
        jsonschema.validate(report, RUN_REPORT_SCHEMA)
        for rec in trace:
            jsonschema.validate(rec, TRACE_RECORD_SCHEMA)
    except jsonschema.ValidationError as e:
        raise StateError(f"report failed schema validation: {e.message}") from e
    written = []
    if fmt == "json":
        atomic_write(out_dir / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
        atomic_write(out_dir / "trace.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in trace))
        written += [out_dir / "report.json", out_dir / "trace.jsonl"]
    else:
        flat = [{"key": k, "value": v} for k, v in _flatten(report)]
        atomic_write(out_dir / "report.csv", _csv(flat, ["key", "value"]))
        cols = sorted({k for r in trace for k in r})
        rows = [{k: (json.dumps(v) if isinstance(v, list) else v) for k, v in r.items()} for r in trace]
        atomic_write(out_dir / "trace.csv", _csv(rows, cols))
        written += [out_dir / "report.csv", out_dir / "trace.csv"]
    return written


# -- verbs -------------------------------------------------------------------


def cmd_run(args) -> int:
    rc = _resolve(args)
    result = execute(rc)
    for p in write_run_report(result, rc.out, rc.format):
        print(p)
    m = result["metrics"]
    print(f"hit_rate={m['hit_rate']:.4f}" + (f" max_abs_error={m['max_abs_error']:.3e}" if "max_abs_error" in m else ""))
    return EXIT_OK


def _parse_values(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"sweep values must be integers: {text!r}") from e
    if not vals:
        raise ConfigError("no sweep values given")
    return vals


def cmd_sweep(args) -> int:
    rc = _resolve(args)
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {sorted(SWEEP_AXES)}")
    values = _parse_values(args.values)
    for v in values:  # validate every point before doing any work
        try:
            replace(rc.shadow, **{SWEEP_AXES[args.axis]: v})
        except ParameterError as e:
            raise ConfigError(f"{args.axis}={v}: {e}") from e
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(sweep_point, [rc] * len(values), [args.axis] * len(values), values))
    else:
        rows = [sweep_point(rc, args.axis, v) for v in values]
    path = Path(rc.out) / f"sweep_{args.axis}.csv"
    atomic_write(path, _csv(rows, SWEEP_COLUMNS))
    print(path)
    return EXIT_OK


def _bandwidth_params(args) -> BandwidthParams:
    base = load_config(args.config).bandwidth if args.config else BandwidthParams()
    kw = {}
    for flag, name, scale in (
        ("seq_len", "seq_len", 1),
        ("chunk_size", "chunk_size", 1),
        ("budget", "budget", 1),
        ("outliers", "outliers", 1),
        ("alpha", "hit_rate", 1),
        ("gpu_tbps", "gpu_bandwidth", TB),
        ("pcie_gbps", "pcie_bandwidth", GB),
    ):
        v = getattr(args, flag)
        if v is not None:
            kw[name] = v * scale
    return replace(base, **kw)


def cmd_bandwidth(args) -> int:
    p = _bandwidth_params(args)
    if args.alpha_sweep:
        rows = []
        for a in np.round(np.arange(0.0, 1.0 + 1e-9, 0.2), 10):
            q = replace(p, hit_rate=float(a))
            b = analytics.equivalent_bandwidth(q)
            rows.append({"alpha": f"{a:.1f}", "equivalent_bandwidth_tbps": f"{b / TB:.4f}", "speedup": f"{b / q.gpu_bandwidth:.4f}"})
        if args.format == "csv":
            sys.stdout.write(_csv(rows, ["alpha", "equivalent_bandwidth_tbps", "speedup"]))
        elif args.format == "json":
            print(json.dumps({"schema_version": SCHEMA_VERSION, "params": p.as_dict(),
                              "alpha_sweep": [{k: float(v) for k, v in r.items()} for r in rows]}, indent=2))
        else:
            print(f"{'alpha':>6}  {'B_eq (TB/s)':>12}  {'x B_GPU':>8}")
            for r in rows:
                print(f"{r['alpha']:>6}  {r['equivalent_bandwidth_tbps']:>12}  {r['speedup']:>8}")
        return EXIT_OK
    b = analytics.equivalent_bandwidth(p)
    table = [
        ("seq_len S", p.seq_len),
        ("chunk_size C", p.chunk_size),
        ("budget K", p.budget),
        ("outliers O", p.outliers),
        ("hit_rate alpha", p.hit_rate),
        ("B_GPU (TB/s)", p.gpu_bandwidth / TB),
        ("B_PCIe (GB/s)", p.pcie_bandwidth / GB),
        ("B_equivalent (TB/s)", round(b / TB, 4)),
        ("speedup over B_GPU", round(b / p.gpu_bandwidth, 4)),
    ]
    if args.format == "csv":
        sys.stdout.write(_csv([{"quantity": k, "value": v} for k, v in table], ["quantity", "value"]))
    elif args.format == "json":
        print(json.dumps({"schema_version": SCHEMA_VERSION, "params": p.as_dict(), "equivalent_bandwidth": b,
                          "speedup": b / p.gpu_bandwidth}, indent=2))
    else:
        for k, v in table:
            print(f"{k:<22}{v}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_checks

    ok = True
    for name, passed, detail in run_checks():
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tierkv", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--format", choices=("json", "csv"))
        p.add_argument("--oracle", action="store_true")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)

    p = sub.add_parser("run", help="prefill + decode a synthetic workload and write reports")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep rank, chunk size or budget; writes one CSV")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bandwidth", help="evaluate the equivalent-bandwidth model")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--format", choices=("json", "csv"), help="default: aligned text table")
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--outliers", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gpu-tbps", dest="gpu_tbps", type=float)
    p.add_argument("--pcie-gbps", dest="pcie_gbps", type=float)
    p.add_argument("--alpha-sweep", action="store_true", help="tabulate alpha = 0, 0.2, ..., 1")
    p.set_defaults(func=cmd_bandwidth)

    p = sub.add_parser("selftest", help="run the golden checks")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    verbose = args.verbose or os.environ.get("TIERKV_VERBOSE", "0") not in ("", "0")
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StateError, AssertionError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
