"""Scenario enumeration, per-metric datasets and the three-band partition."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import MetricNotApplicable, StabconError
from .grid import NetworkModel, system_impedance
from . import metrics as M

logger = logging.getLogger(__name__)

BELOW, BAND, ABOVE = 1, 2, 3
LABEL_NAMES = {BELOW: "omega1", BAND: "omega2", ABOVE: "omega3"}


@dataclass(frozen=True)
class Scenario:
    """One commitment/availability point.

    ``x`` follows ``model.sg_units``, ``alpha`` follows ``model.ibr_units``
    (GFL then GFM), ``P``/``Q`` follow ``model.gfl_units``.
    """

    x: tuple
    alpha: tuple
    P: tuple = ()
    Q: tuple = ()
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(int(v) for v in self.x))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "P", tuple(float(p) for p in self.P))
        object.__setattr__(self, "Q", tuple(float(q) for q in self.Q))
        if any(v not in (0, 1) for v in self.x):
            raise ValueError("commitment x must be binary")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha):
            raise ValueError("alpha must lie in [0, 1]")

    def check(self, model: NetworkModel) -> None:
        if len(self.x) != len(model.sg_units) or len(self.alpha) != len(model.ibr_units):
            raise ValueError("scenario dimensions do not match the model")
        if len(self.P) != len(model.gfl_units) or len(self.Q) != len(model.gfl_units):
            raise ValueError("GFL dispatch does not match the model")
        for u, a, p in zip(model.gfl_units, self.alpha, self.P):
            if p < 0 or p > a * u.rating * (1 + 1e-12):
                raise ValueError(f"{u.id}: P={p} outside [0, alpha * rating]")

    @classmethod
    def build(cls, model: NetworkModel, x, alpha, power_factor: float = 1.0, id: str = "") -> "Scenario":
        """Scenario with GFL dispatch ``P = alpha * rating`` at a fixed power factor."""
        P, Q = dispatch(model, alpha, power_factor)
        return cls(tuple(x), tuple(alpha), P, Q, id)

    @classmethod
    def nominal(cls, model: NetworkModel, power_factor: float = 1.0) -> "Scenario":
        alpha = [u.alpha for u in model.ibr_units]
        return cls.build(model, [1] * len(model.sg_units), alpha, power_factor, "nominal")


def dispatch(model: NetworkModel, alpha: Sequence[float], power_factor: float = 1.0):
    if not 0.0 < power_factor <= 1.0:
        raise ValueError("power factor must lie in (0, 1]")
    tan_phi = math.tan(math.acos(power_factor))
    P = tuple(a * u.rating for u, a in zip(model.gfl_units, alpha))
    return P, tuple(p * tan_phi for p in P)


def region_midpoints(n_c: int) -> tuple:
    return tuple((k - 0.5) / n_c for k in range(1, n_c + 1))


def scenario_space_size(model: NetworkModel, n_c: int) -> int:
    return 2 ** len(model.sg_units) * n_c ** len(model.ibr_units)


def enumerate_scenarios(
    model: NetworkModel, n_c: int, budget: int, seed: int = 0, power_factor: float = 1.0
) -> Iterator[Scenario]:
    """Exhaustive grid over ``{0,1}^G x midpoints^C`` or, past ``budget``, seeded sampling of it."""
    if n_c < 1 or budget < 1:
        raise ValueError("n_c and budget must be >= 1")
    n_g, n_ibr = len(model.sg_units), len(model.ibr_units)
    mids = region_midpoints(n_c)
    if scenario_space_size(model, n_c) <= budget:
        grid = itertools.product(*([(0, 1)] * n_g), *([mids] * n_ibr))
        for k, point in enumerate(grid):
            yield Scenario.build(model, point[:n_g], point[n_g:], power_factor, f"s{k:06d}")
        return
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, 2, size=(budget, n_g))
    ks = rng.integers(0, n_c, size=(budget, n_ibr))
    mids_arr = np.asarray(mids)
    for k in range(budget):
        yield Scenario.build(model, xs[k], mids_arr[ks[k]], power_factor, f"s{k:06d}")


# ------------------------------------------------------------------ datasets

@dataclass(frozen=True, eq=False)
class StabilityDataset:
    metric: str
    variables: tuple
    X: np.ndarray
    g: np.ndarray
    limit: float
    scenario_ids: tuple = ()
    infeasible: np.ndarray | None = None
    nu: float | None = None
    labels: np.ndarray | None = None
    skipped: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(-1, len(self.variables))
        g = np.asarray(self.g, dtype=float).reshape(-1)
        if X.shape[0] != g.shape[0]:
            raise ValueError("X and g lengths differ")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "variables", tuple(self.variables))
        ids = tuple(self.scenario_ids) or tuple(f"s{k:06d}" for k in range(len(g)))
        object.__setattr__(self, "scenario_ids", ids)
        inf = np.zeros(len(g), bool) if self.infeasible is None else np.asarray(self.infeasible, bool)
        object.__setattr__(self, "infeasible", inf | np.isnan(g))
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=int))

    def __len__(self) -> int:
        return len(self.g)

    def mask(self, label: int) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset is not partitioned")
        return self.labels == label

    def counts(self) -> dict:
        return {name: int(np.sum(self.labels == lab)) for lab, name in LABEL_NAMES.items()}

    def finite_values(self) -> np.ndarray:
        return self.g[~self.infeasible]

    # ---- persistence: CSV rows plus a JSON sidecar with the layout
    def save(self, csv_path: str | Path) -> tuple[Path, Path]:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        labels = self.labels if self.labels is not None else np.zeros(len(self), int)
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario_id", *self.variables, "g", "label", "status"])
            for k in range(len(self)):
                status = "infeasible" if self.infeasible[k] else "ok"
                w.writerow(
                    [
                        self.scenario_ids[k],
                        *(repr(float(v)) for v in self.X[k]),
                        repr(float(self.g[k])),
                        LABEL_NAMES.get(int(labels[k]), ""),
                        status,
                    ]
                )
        sidecar = csv_path.with_suffix(".json")
        meta = {
            "metric": self.metric,
            "variables": list(self.variables),
            "g_lim": self.limit,
            "nu": self.nu,
            "n_samples": len(self),
            "skipped": [list(s) for s in self.skipped],
            **self.meta,
        }
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return csv_path, sidecar


def load_dataset(csv_path: str | Path) -> StabilityDataset:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    variables = tuple(meta["variables"])
    ids, X, g, labels, inf = [], [], [], [], []
    names = {v: k for k, v in LABEL_NAMES.items()}
    with csv_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["scenario_id", *variables, "g", "label", "status"]
        if reader.fieldnames != expected:
            raise ValueError(f"{csv_path}: columns {reader.fieldnames} do not match layout {expected}")
        for row in reader:
            ids.append(row["scenario_id"])
            X.append([float(row[v]) for v in variables])
            g.append(float(row["g"]))
            labels.append(names.get(row["label"], 0))
            inf.append(row["status"] == "infeasible")
    extra = {
        k: v for k, v in meta.items() if k not in ("metric", "variables", "g_lim", "nu", "n_samples", "skipped")
    }
    lab = np.asarray(labels, int) if labels and all(labels) else None
    return StabilityDataset(
        meta["metric"],
        variables,
        np.asarray(X, float).reshape(-1, len(variables)),
        np.asarray(g, float),
        meta["g_lim"],
        tuple(ids),
        np.asarray(inf, bool),
        meta.get("nu"),
        lab,
        tuple(tuple(s) for s in meta.get("skipped", [])),
        extra,
    )


def partition(dataset: StabilityDataset, g_lim: float | None = None, nu: float = 0.0) -> StabilityDataset:
    """Label samples: below ``g_lim`` -> 1, in ``[g_lim, g_lim + nu)`` -> 2, above -> 3.

    Structurally infeasible samples always land in band 1.
    """
    if nu < 0:
        raise ValueError("nu must be >= 0")
    lim = dataset.limit if g_lim is None else float(g_lim)
    g = dataset.g
    labels = np.full(len(g), ABOVE, dtype=int)
    with np.errstate(invalid="ignore"):
        labels[g < lim + nu] = BAND
        labels[g < lim] = BELOW
    labels[dataset.infeasible] = BELOW
    return replace(dataset, limit=lim, nu=float(nu), labels=labels)


# ------------------------------------------------------- interaction features

@dataclass(frozen=True, eq=False)
class FeatureVector:
    names: tuple
    values: np.ndarray


def feature_names(model: NetworkModel) -> tuple:
    linear = [f"x_{u.id}" for u in model.sg_units] + [f"alpha_{u.id}" for u in model.gfm_units]
    units = [u.id for u in model.sg_units] + [u.id for u in model.gfm_units]
    pairs = [f"eta_{a}_{b}" for a, b in itertools.combinations(units, 2)]
    return tuple(linear + pairs)


def interaction_features(scenario: Scenario, model: NetworkModel) -> FeatureVector:
    """Commitments, GFM availabilities and all pairwise products over G and C_m."""
    offset = len(model.gfl_units)
    linear = list(map(float, scenario.x)) + [scenario.alpha[offset + k] for k in range(len(model.gfm_units))]
    pairs = [a * b for a, b in itertools.combinations(linear, 2)]
    return FeatureVector(feature_names(model), np.asarray(linear + pairs, dtype=float))


# ---------------------------------------------------------- metric targets

@dataclass(frozen=True)
class MetricTarget:
    """One constraint instance: a metric bound to a unit and/or fault bus."""

    name: str
    metric: str
    limit: float
    variables: tuple
    sample: Callable = field(repr=False, compare=False)
    unit: str | None = None
    fault_bus: object = None


def _x_vars(model):
    return [f"x_{u.id}" for u in model.sg_units]


def _gfm_alpha(model, s: Scenario):
    off = len(model.gfl_units)
    return list(s.alpha[off:])


def metric_targets(
    metric: str,
    model: NetworkModel,
    *,
    gscr_limit: float = M.DEFAULT_GSCR_LIMIT,
    scc_limit: float | None = None,
    dv_limit: float = M.DEFAULT_DV_LIMIT,
    fault_buses: Sequence = (),
) -> list[MetricTarget]:
    """Expand a metric id into its per-unit / per-fault-bus targets."""
    xs = _x_vars(model)
    gfm_a = [f"alpha_{u.id}" for u in model.gfm_units]
    all_a = [f"alpha_{u.id}" for u in model.ibr_units]
    out = []
    if metric == "g1":
        for u in model.gfl_units:
            def sample(s, u=u):
                feats = list(s.x) + _gfm_alpha(model, s)
                pos = model.gfl_position(u.id)
                Z = system_impedance(model, s, include_gfm=True)
                return feats, M.eval_sync_equilibrium(Z, model, u.id, s.P[pos], s.Q[pos]).value
            out.append(MetricTarget(f"g1[{u.id}]", "g1", M.SYNC_LIMIT, tuple(xs + gfm_a), sample, unit=u.id))
    elif metric == "g2":
        def sample(s):
            feats = list(s.x) + _gfm_alpha(model, s) + list(s.P)
            return feats, M.eval_gscr(model, s, gscr_limit).value
        out.append(
            MetricTarget("g2", "g2", gscr_limit, tuple(xs + gfm_a + [f"P_{u.id}" for u in model.gfl_units]), sample)
        )
    elif metric in ("g3", "g4"):
        if scc_limit is None and metric == "g3":
            raise ValueError("g3 needs an SCC limit")
        for bus in fault_buses:
            study = M.FaultStudy.from_model(model, bus, scc_limit or 1.0, dv_limit)
            if metric == "g3":
                def sample(s, study=study):
                    Z = system_impedance(model, s, include_gfm=False)
                    return list(s.x) + list(s.alpha), M.eval_scc(Z, study, s).value
                out.append(MetricTarget(f"g3[bus{bus}]", "g3", study.scc_limit, tuple(xs + all_a), sample, fault_bus=bus))
            else:
                for u in model.ibr_units:
                    def sample(s, study=study, u=u):
                        Z = system_impedance(model, s, include_gfm=False)
                        return list(s.x) + list(s.alpha), M.eval_post_fault_voltage(Z, study, s, u.id).value
                    out.append(
                        MetricTarget(
                            f"g4[bus{bus},{u.id}]", "g4", -dv_limit, tuple(xs + all_a), sample, u.id, bus
                        )
                    )
    elif metric == "g5":
        for u in model.gfl_units:
            def sample(s, u=u):
                Z = system_impedance(model, s, include_gfm=True)
                p_hat, q_hat = M.equivalent_injection(Z, model, s.P, s.Q, u.id)
                gamma = M.short_circuit_capacity_gamma(Z, model, u.id)
                return [p_hat, q_hat, gamma], M.eval_voltage_stability(p_hat, q_hat, gamma).value
            out.append(
                MetricTarget(f"g5[{u.id}]", "g5", 0.0, (f"Phat_{u.id}", f"Qhat_{u.id}", f"Gamma_{u.id}"), sample, u.id)
            )
    else:
        raise ValueError(f"no scenario targets for metric {metric!r}")
    return out


def evaluate_metric_dataset(target: MetricTarget, scenarios: Iterable[Scenario], model: NetworkModel) -> StabilityDataset:
    """One sample per scenario; evaluator failures become infeasible samples."""
    ids, X, g, inf, skipped = [], [], [], [], []
    dim = len(target.variables)
    for s in scenarios:
        try:
            feats, value = target.sample(s)
        except MetricNotApplicable as exc:
            skipped.append((s.id, str(exc)))
            continue
        except (StabconError, ArithmeticError, np.linalg.LinAlgError) as exc:
            feats, value = _features_only(target, model, s)
            if feats is None:
                skipped.append((s.id, f"infeasible without features: {exc}"))
                continue
            logger.debug("%s %s: structurally infeasible (%s)", target.name, s.id, exc)
            value = math.nan
        ids.append(s.id)
        X.append(feats)
        g.append(value)
        inf.append(math.isnan(value))
    return StabilityDataset(
        target.name,
        target.variables,
        np.asarray(X, float).reshape(-1, dim),
        np.asarray(g, float),
        target.limit,
        tuple(ids),
        np.asarray(inf, bool),
        skipped=tuple(skipped),
        meta={"base_metric": target.metric},
    )


def _features_only(target: MetricTarget, model: NetworkModel, s: Scenario):
    if target.metric == "g1":
        return list(s.x) + _gfm_alpha(model, s), math.nan
    if target.metric == "g2":
        return list(s.x) + _gfm_alpha(model, s) + list(s.P), math.nan
    if target.metric in ("g3", "g4"):
        return list(s.x) + list(s.alpha), math.nan
    return None, math.nan


def nadir_dataset(fp: M.FrequencyParams, n: int, seed: int = 0, spread: float = 2.0) -> StabilityDataset:
    """Seeded draws of (H, R, H_s) in ``[0, spread * nominal]`` evaluated with g6."""
    rng = np.random.default_rng(seed)
    nominal = np.array([fp.inertia, fp.reserve, *fp.h_s], dtype=float)
    nominal = np.where(nominal > 0, nominal, 1.0)
    X = rng.uniform(0.0, spread, size=(n, nominal.size)) * nominal
    g = np.array([M.eval_nadir_margin(fp.with_point(r[0], r[1], r[2:])).value for r in X])
    variables = ("H", "R", *(f"Hs_{f}" for f in fp.farm_ids))
    return StabilityDataset("g6", variables, X, g, 0.0, meta={"base_metric": "g6"})


def equality_targets(model: NetworkModel, scenarios: Iterable[Scenario]):
    """Feature matrix and regression targets for the h1-h3 surrogates.

    Targets are ``ratio[a,b] = |Z_ab| / |Z_aa|`` for ordered GFL pairs and
    ``inv_z[a] = 1 / |Z_aa|``.  Scenarios with a singular network are skipped.
    """
    names = feature_names(model)
    rows, targets = [], {}
    for u in model.gfl_units:
        for v in model.gfl_units:
            if v.id != u.id:
                targets[f"ratio[{u.id},{v.id}]"] = []
        targets[f"inv_z[{u.id}]"] = []
    for s in scenarios:
        try:
            Z = system_impedance(model, s, include_gfm=True)
        except StabconError:
            continue
        rows.append(interaction_features(s, model).values)
        for u in model.gfl_units:
            zuu = abs(Z.entry(u.bus, u.bus))
            for v in model.gfl_units:
                if v.id != u.id:
                    targets[f"ratio[{u.id},{v.id}]"].append(abs(Z.entry(u.bus, v.bus)) / zuu)
            targets[f"inv_z[{u.id}]"].append(1.0 / zuu)
    F = np.asarray(rows, float).reshape(-1, len(names))
    return FeatureVector(names, F), {k: np.asarray(v, float) for k, v in targets.items()}
