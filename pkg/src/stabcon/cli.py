"""Command line entry point ``stabcon``.

Subcommands: ``evaluate`` (datasets only), ``fit`` (full pipeline),
``verify`` (recheck an exported constraint against a dataset CSV) and
``export`` (convert a constraint JSON to text or CSV).  Log verbosity comes
from ``STABCON_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import os
import sys

from .errors import StabconError
from .io import bundled_path, check_against_model, describe, dumps, load, load_constraint
from .pipeline import run_pipeline
from .scenarios import load_dataset, partition
from .surrogate import SocSurrogate, verify

logger = logging.getLogger("stabcon")


def _metrics_arg(text: str) -> tuple:
    return tuple(m.strip() for m in text.split(",") if m.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stabcon", description="Compile stability metrics into SOC constraints.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (("evaluate", "sample scenarios and write datasets"), ("fit", "run the full pipeline")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--network", default=str(bundled_path("ninebus.json")), help="network JSON")
        p.add_argument("--config", default=str(bundled_path("ninebus_config.json")), help="pipeline config JSON")
        p.add_argument("--metrics", type=_metrics_arg, help="comma separated subset, e.g. g3,g5")
        p.add_argument("--nc", type=int, help="regions per continuous variable")
        p.add_argument("--budget", type=int, help="maximum number of scenarios")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("verify", help="recheck an exported constraint against a dataset")
    p.add_argument("constraint")
    p.add_argument("dataset", help="dataset CSV (with its JSON sidecar)")
    p.add_argument("--nu", type=float, help="band width to partition with (default: the constraint's)")

    p = sub.add_parser("export", help="convert an exported constraint")
    p.add_argument("constraint")
    p.add_argument("--format", choices=("json", "text", "csv"), default="text")
    p.add_argument("--output", help="write here instead of stdout")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("STABCON_LOG_LEVEL", "WARNING").upper()
    numeric = getattr(logging, level, logging.WARNING)
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s")
    # the run-log capture lowers the package logger level; keep the console quiet anyway
    for handler in logging.getLogger().handlers:
        handler.setLevel(numeric)


def _cmd_pipeline(args, fit: bool) -> int:
    config, model = load(args.config, args.network)
    config = config.replace(metrics=args.metrics, n_c=args.nc, budget=args.budget, seed=args.seed, out=args.out)
    check_against_model(config, model)
    print(f"loaded {describe(model)}")
    bundle = run_pipeline(config, model, fit=fit)
    print((bundle.out_dir / "report.txt").read_text(), end="")
    return bundle.exit_code


def _cmd_verify(args) -> int:
    data = load_constraint(args.constraint)
    if "targets" in data:
        raise StabconError("verify works on cone constraints; equality regressions carry their own residuals")
    sur = SocSurrogate.from_dict(data)
    ds = load_dataset(args.dataset)
    if tuple(ds.variables) != sur.variables:
        raise StabconError(f"dataset variables {list(ds.variables)} do not match constraint {list(sur.variables)}")
    nu = args.nu if args.nu is not None else (sur.nu or 0.0)
    report = verify(sur, partition(ds, sur.g_lim, nu))
    print(dumps(report.to_dict()), end="")
    return 0 if report.conservative else 1


def _as_text(data: dict) -> str:
    if "targets" in data:
        lines = [f"{data['metric']}: linear regressions over {len(data['features'])} features"]
        for t in data["targets"]:
            terms = " ".join(f"{v:+.6g}*{k}" for k, v in t["coefficients"].items())
            lines.append(f"  {t['target']} = {t['intercept']:.6g} {terms}")
        return "\n".join(lines) + "\n"
    sur = SocSurrogate.from_dict(data)
    var = ", ".join(sur.variables)
    lines = [
        f"{sur.metric}: || A X + b || <= c.X + d - g_lim   with X = ({var})",
        f"  g_lim = {sur.g_lim:.6g}   d = {sur.d:.6g}   nu = {sur.nu}",
        f"  c = {sur.c.tolist()}",
        f"  b = {sur.b.tolist()}",
        "  A =",
        *(f"    {row}" for row in sur.A.tolist()),
    ]
    return "\n".join(lines) + "\n"


def _as_csv(data: dict) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if "targets" in data:
        w.writerow(["target", "intercept", *data["features"]])
        for t in data["targets"]:
            w.writerow([t["target"], repr(t["intercept"]), *(repr(t["coefficients"][f]) for f in data["features"])])
    else:
        # one row per cone row, then the affine part
        w.writerow(["row", *data["variables"], "b"])
        for k, (row, b) in enumerate(zip(data["A"], data["b"])):
            w.writerow([f"A{k}", *map(repr, row), repr(b)])
        w.writerow(["c", *map(repr, data["c"]), repr(data["d"])])
    return buf.getvalue()


def _cmd_export(args) -> int:
    data = load_constraint(args.constraint)
    text = {"json": dumps, "text": _as_text, "csv": _as_csv}[args.format](data)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("evaluate", "fit"):
            return _cmd_pipeline(args, fit=args.command == "fit")
        if args.command == "verify":
            return _cmd_verify(args)
        return _cmd_export(args)
    except StabconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
