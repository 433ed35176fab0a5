"""End-to-end compilation: scenarios -> datasets -> cone constraints -> reports.

Each target (one metric bound to a unit and/or fault bus) runs in isolation.
A failure is recorded in its result and never stops the other targets.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import StabconError, UnfittableMetricError
from .grid import NetworkModel, check_connected
from .io import LogCapture, PipelineConfig, describe, ensure_writable, write_json
from .scenarios import (
    StabilityDataset,
    enumerate_scenarios,
    equality_targets,
    evaluate_metric_dataset,
    metric_targets,
    nadir_dataset,
    partition,
)
from .surrogate import (
    SocSurrogate,
    default_nu0,
    exact_soc_nadir,
    exact_soc_voltage,
    fit_equality_linear,
    tune_nu,
    verify,
)

logger = logging.getLogger(__name__)


def slug(name: str) -> str:
    """File-safe version of a target name: ``g4[bus7,W1]`` -> ``g4_bus7_W1``."""
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_")


def clean(obj):
    """Replace non-finite floats by None so the JSON stays strict."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class TargetResult:
    """Outcome of one target; ``status`` is ok, unfittable or error."""

    name: str
    metric: str
    method: str
    status: str = "ok"
    n_samples: int = 0
    n_skipped: int = 0
    counts: dict = field(default_factory=dict)
    omega2_rms: float | None = None
    nu: float | None = None
    max_rel_residual: float | None = None
    wall_time: float = 0.0
    dataset_path: str | None = None
    constraint_path: str | None = None
    message: str = ""

    def misclassified(self) -> tuple:
        return tuple(self.counts.get(k, {}).get("misclassified", 0) for k in ("omega1", "omega3"))

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "name": self.name,
            "metric": self.metric,
            "method": self.method,
            "status": self.status,
            "n_samples": self.n_samples,
            "n_skipped": self.n_skipped,
            "counts": self.counts,
            "omega2_rms": self.omega2_rms,
            "nu": self.nu,
            "max_rel_residual": self.max_rel_residual,
            "dataset": self.dataset_path,
            "constraint": self.constraint_path,
            "message": self.message,
        }
        if timing:
            d["wall_time_s"] = round(self.wall_time, 3)
        return clean(d)


@dataclass
class ArtifactBundle:
    out_dir: Path
    network: str
    n_scenarios: int
    seed: int
    results: list = field(default_factory=list)
    wall_time: float = 0.0
    log_path: Path | None = None

    @property
    def exit_code(self) -> int:
        return 1 if any(r.status == "unfittable" for r in self.results) else 0

    def result(self, name: str) -> TargetResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)


def write_metric_values(ds: StabilityDataset, path: Path) -> Path:
    """Columnar record of raw evaluations: scenario, metric, value, limit, feasible."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", "metric", "value", "limit", "feasible"])
        for sid, g, bad in zip(ds.scenario_ids, ds.g, ds.infeasible):
            w.writerow([sid, ds.metric, repr(float(g)), repr(float(ds.limit)), int(not bad and g >= ds.limit)])
    return path


# ------------------------------------------------------------ per target

def _fit_constraint(ds: StabilityDataset, config: PipelineConfig):
    sur, nu = tune_nu(
        ds, config.nu0, config.nu_growth, max_attempts=config.nu_max_attempts, j=config.cone_rows, seed=config.seed
    )
    return sur, partition(ds, ds.limit, nu)


def _exact_constraint(sur: SocSurrogate, ds: StabilityDataset):
    nu = default_nu0(ds)
    labelled = partition(ds, sur.g_lim, nu)
    report = verify(sur, labelled)
    # an exact cone must agree with the metric everywhere, not only outside the band
    accepted = sur.accepts(ds.X)
    finite = ~ds.infeasible
    disagree = int(np.sum(accepted[finite] != (ds.g[finite] >= ds.limit)))
    diag = {**sur.diagnostics, **report.summary(), "exact_disagreements": disagree}
    return SocSurrogate(sur.metric, sur.A, sur.b, sur.c, sur.d, sur.variables, sur.g_lim, nu, diag), labelled


def _run_inequality(name, metric, make_dataset, make_exact, config, out: Path, fit: bool) -> TargetResult:
    t0 = time.perf_counter()
    method = "exact" if make_exact is not None else "fit"
    res = TargetResult(name, metric, method if fit else "evaluate")
    try:
        ds = make_dataset()
        res.n_samples, res.n_skipped = len(ds), len(ds.skipped)
        if make_exact is not None:
            sur, labelled = _exact_constraint(make_exact(), ds)
            logger.info("%s: exact cone, %d samples", name, len(ds))
        elif fit:
            logger.info("%s: fitting %d samples", name, len(ds))
            sur, labelled = _fit_constraint(ds, config)
        else:
            sur, labelled = None, partition(ds, ds.limit, config.nu0 or default_nu0(ds))
        res.nu = labelled.nu
        labelled = replace(labelled, meta={**labelled.meta, "seed": config.seed})
        csv_path = out / "datasets" / f"{slug(name)}.csv"
        labelled.save(csv_path)
        write_metric_values(labelled, out / "metrics" / f"{slug(name)}.csv")
        res.dataset_path = str(csv_path.relative_to(out))
        if sur is None:
            res.counts = {k: {"n": v, "misclassified": 0} for k, v in labelled.counts().items()}
        elif fit:
            report = verify(sur, labelled)
            report.assert_conservative()
            res.counts = report.summary()
            del res.counts["omega2_rms"]
            # an exact cone is a different function of X than the metric, so its RMS says nothing
            res.omega2_rms = None if make_exact is not None else report.omega2_rms
            path = write_json(out / "constraints" / f"{slug(name)}.json", clean(sur.to_dict()))
            res.constraint_path = str(path.relative_to(out))
            logger.info(
                "%s: nu=%.4g, misclassified %d/%d, omega2 rms %s",
                name, res.nu, *res.misclassified(), f"{res.omega2_rms:.3g}" if res.omega2_rms is not None else "n/a",
            )
    except UnfittableMetricError as exc:
        res.status, res.message = "unfittable", str(exc)
        logger.error("%s: unfittable: %s", name, exc)
    except (StabconError, ArithmeticError, ValueError) as exc:
        res.status, res.message = "error", f"{type(exc).__name__}: {exc}"
        logger.error("%s: %s", name, res.message)
    res.wall_time = time.perf_counter() - t0
    return res


def _run_equality(metric, model, scenarios, cache, out: Path, fit: bool) -> TargetResult:
    t0 = time.perf_counter()
    res = TargetResult(metric, metric, "regression" if fit else "evaluate")
    try:
        if "eq" not in cache:
            cache["eq"] = equality_targets(model, scenarios)
        features, targets = cache["eq"]
        if metric in ("h1", "h2"):
            chosen = {k: v for k, v in targets.items() if k.startswith("ratio[")}
        else:
            # Gamma = |V|^2 / (2 |Z_kk|) at unit voltage
            chosen = {f"Gamma[{k[6:-1]}]": 0.5 * v for k, v in targets.items() if k.startswith("inv_z[")}
        res.n_samples = len(features.values)
        if fit and chosen:
            fits = fit_equality_linear(chosen, features)
            res.max_rel_residual = max(f.residuals["max_rel"] for f in fits.values())
            data = {
                "metric": metric,
                "features": list(features.names),
                "targets": [clean(fits[k].to_dict()) for k in sorted(fits)],
            }
            path = write_json(out / "constraints" / f"{metric}.json", data)
            res.constraint_path = str(path.relative_to(out))
            logger.info("%s: %d regressions, worst residual %.3g of mean target", metric, len(fits),
                        res.max_rel_residual)
        elif not chosen:
            res.message = "no targets (needs at least two GFL units)" if metric != "h3" else "no GFL units"
            logger.warning("%s: %s", metric, res.message)
    except (StabconError, ArithmeticError, ValueError) as exc:
        res.status, res.message = "error", f"{type(exc).__name__}: {exc}"
        logger.error("%s: %s", metric, res.message)
    res.wall_time = time.perf_counter() - t0
    return res


# ------------------------------------------------------------- pipeline

def run_pipeline(config: PipelineConfig, model: NetworkModel, *, fit: bool = True, out=None) -> ArtifactBundle:
    """Run every selected metric and write datasets, constraints and reports.

    ``fit=False`` stops after the datasets (the ``evaluate`` subcommand).
    The output directory is checked for writability before any compute.
    """
    out = ensure_writable(config.out if out is None else out)
    t_start = time.perf_counter()
    bundle = ArtifactBundle(out, model.name, 0, config.seed, log_path=out / "run.log")
    with LogCapture(bundle.log_path):
        logger.info("network %s: %s", model.name or "<unnamed>", describe(model))
        logger.info("config: %s", json.dumps(clean(config.resolved()), sort_keys=True))
        check_connected(model)
        scenarios = []
        if any(m in config.metrics for m in ("g1", "g2", "g3", "g4", "g5", "h1", "h2", "h3")):
            scenarios = list(
                enumerate_scenarios(model, config.n_c, config.budget, config.seed, config.power_factor)
            )
        bundle.n_scenarios = len(scenarios)
        logger.info("%d scenarios (n_c=%d, budget=%d, seed=%d)", len(scenarios), config.n_c, config.budget,
                    config.seed)

        jobs = []
        for metric in config.metrics:
            if metric.startswith("h"):
                continue
            if metric == "g6":
                fp = config.frequency
                jobs.append(("g6", "g6", lambda fp=fp: nadir_dataset(fp, config.g6_samples, config.seed),
                             lambda fp=fp: exact_soc_nadir(fp)))
                continue
            try:
                targets = metric_targets(
                    metric, model, gscr_limit=config.gscr_limit, scc_limit=config.scc_limit,
                    dv_limit=config.dv_limit, fault_buses=config.fault_buses,
                )
            except (StabconError, ValueError) as exc:
                bundle.results.append(TargetResult(metric, metric, "fit", "error", message=str(exc)))
                logger.error("%s: %s", metric, exc)
                continue
            for t in targets:
                exact = (lambda u=t.unit: exact_soc_voltage(u)) if metric == "g5" else None
                jobs.append((t.name, metric, lambda t=t: evaluate_metric_dataset(t, scenarios, model), exact))

        def work(job):
            name, metric, make_ds, make_exact = job
            return _run_inequality(name, metric, make_ds, make_exact, config, out, fit)

        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            bundle.results.extend(pool.map(work, jobs))

        cache = {}
        for metric in config.metrics:
            if metric.startswith("h"):
                bundle.results.append(_run_equality(metric, model, scenarios, cache, out, fit))

        bundle.wall_time = time.perf_counter() - t_start
        text, data = export_report(bundle)
        (out / "report.txt").write_text(text)
        write_json(out / "report.json", data)
        logger.info("done in %.2f s, exit status %d", bundle.wall_time, bundle.exit_code)
    return bundle


# --------------------------------------------------------------- report

def _fmt(v, spec=".3g"):
    return "-" if v is None else format(v, spec)


def _fmt_rms(v):
    # anything below this is rounding noise and would make reports platform dependent
    return "<1e-12" if v is not None and v < 1e-12 else _fmt(v)


def export_report(bundle: ArtifactBundle, timing: bool = True) -> tuple[str, dict]:
    """Plain-text table and JSON dict.  ``timing=False`` drops wall-clock fields."""
    data = {
        "network": bundle.network,
        "n_scenarios": bundle.n_scenarios,
        "seed": bundle.seed,
        "exit_code": bundle.exit_code,
        "targets": [r.to_dict(timing) for r in bundle.results],
    }
    if timing:
        data["wall_time_s"] = round(bundle.wall_time, 3)
    header = f"{'target':<16} {'method':<10} {'status':<10} {'n':>5} {'omega1':>7} {'omega2':>7} {'omega3':>7} " \
             f"{'miscl 1/3':>9} {'omega2 rms':>10} {'nu':>10} {'max rel':>9}"
    if timing:
        header += f" {'time s':>7}"
    lines = [
        "stability constraint report",
        f"network: {bundle.network or '-'}  scenarios: {bundle.n_scenarios}  seed: {bundle.seed}",
        "",
        header,
        "-" * len(header),
    ]
    for r in bundle.results:
        n = [r.counts.get(k, {}).get("n") for k in ("omega1", "omega2", "omega3")]
        m1, m3 = r.misclassified()
        row = (
            f"{r.name:<16} {r.method:<10} {r.status:<10} {r.n_samples:>5} {_fmt(n[0], 'd'):>7} "
            f"{_fmt(n[1], 'd'):>7} {_fmt(n[2], 'd'):>7} {(f'{m1}/{m3}' if r.counts else '-'):>9} "
            f"{_fmt_rms(r.omega2_rms):>10} {_fmt(r.nu, '.4g'):>10} {_fmt(r.max_rel_residual):>9}"
        )
        if timing:
            row += f" {r.wall_time:>7.2f}"
        lines.append(row)
    notes = [f"  {r.name}: {r.message}" for r in bundle.results if r.message]
    if notes:
        lines += ["", "notes:", *notes]
    if timing:
        lines += ["", f"wall time: {bundle.wall_time:.2f} s"]
    lines.append(f"exit status: {bundle.exit_code}")
    return "\n".join(lines) + "\n", data
