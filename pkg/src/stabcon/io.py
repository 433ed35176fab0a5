"""Loading and validating network/config files, and writing artifacts.

Both input formats are JSON checked against bundled schemas in strict mode:
unknown fields are errors, and every error message carries the JSON path of
the offending field.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ModelError, SchemaError
from .grid import Branch, GridFollowingUnit, GridFormingUnit, NetworkModel, SyncGenerator
from .metrics import DEFAULT_DV_LIMIT, DEFAULT_GSCR_LIMIT, FrequencyParams

logger = logging.getLogger(__name__)

ALL_METRICS = ("g1", "g2", "g3", "g4", "g5", "g6", "h1", "h2", "h3")


def bundled_path(name: str) -> Path:
    """Path of a file shipped in ``stabcon/data``."""
    return Path(str(resources.files("stabcon") / "data" / name))


def _schema(name: str) -> dict:
    text = (resources.files("stabcon") / "schemas" / f"{name}.schema.json").read_text()
    return json.loads(text)


def _json_path(error: jsonschema.ValidationError) -> str:
    path = "$"
    for part in error.absolute_path:
        path += f"[{part}]" if isinstance(part, int) else f".{part}"
    return path


def validate(data, schema_name: str, source: str = "<data>") -> None:
    """Raise SchemaError listing every violation, sorted by field path."""
    validator = jsonschema.Draft202012Validator(_schema(schema_name))
    errors = sorted(validator.iter_errors(data), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        lines = [f"{source}: at {_json_path(e)}: {e.message}" for e in errors]
        raise SchemaError("\n".join(lines))


def _read_json(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


# ---------------------------------------------------------------- network

def network_from_dict(data: dict, source: str = "<network>") -> NetworkModel:
    """Build a validated model; missing unit ``alpha`` defaults to 1.0 (logged)."""
    validate(data, "network", source)

    def alpha_of(kind, u):
        if "alpha" not in u:
            logger.info("%s unit %s: alpha not given, using 1.0", kind, u["id"])
        return float(u.get("alpha", 1.0))

    branches = []
    for k, br in enumerate(data["branches"]):
        branches.append(
            Branch(
                br["from"], br["to"], float(br["r"]), float(br["x"]), float(br.get("b", 0.0)),
                br.get("id", f"branch{k}"), bool(br.get("in_service", True)),
            )
        )
    try:
        return NetworkModel(
            buses=tuple(b["id"] for b in data["buses"]),
            branches=tuple(branches),
            sg_units=tuple(SyncGenerator(u["id"], u["bus"], float(u["reactance"])) for u in data["sg_units"]),
            gfm_units=tuple(
                GridFormingUnit(u["id"], u["bus"], float(u["reactance"]), float(u["droop"]), float(u["i_max"]),
                                alpha_of("GFM", u))
                for u in data["gfm_units"]
            ),
            gfl_units=tuple(
                GridFollowingUnit(u["id"], u["bus"], float(u["rating"]), float(u["droop"]), float(u["i_max"]),
                                  alpha_of("GFL", u))
                for u in data["gfl_units"]
            ),
            base_mva=float(data["base_mva"]),
            name=data.get("name", ""),
        )
    except ModelError as exc:
        raise ModelError(f"{source}: {exc}") from exc


def load_network(path: str | Path) -> NetworkModel:
    path = Path(path)
    return network_from_dict(_read_json(path), str(path))


def network_to_dict(model: NetworkModel) -> dict:
    return {
        "name": model.name,
        "base_mva": model.base_mva,
        "buses": [{"id": b} for b in model.buses],
        "branches": [
            {"id": br.id, "from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b": br.b,
             "in_service": br.in_service}
            for br in model.branches
        ],
        "sg_units": [{"id": u.id, "bus": u.bus, "reactance": u.reactance} for u in model.sg_units],
        "gfm_units": [
            {"id": u.id, "bus": u.bus, "reactance": u.reactance, "droop": u.droop, "i_max": u.i_max,
             "alpha": u.alpha}
            for u in model.gfm_units
        ],
        "gfl_units": [
            {"id": u.id, "bus": u.bus, "rating": u.rating, "droop": u.droop, "i_max": u.i_max, "alpha": u.alpha}
            for u in model.gfl_units
        ],
    }


def describe(model: NetworkModel) -> str:
    return (
        f"{model.n_bus} buses / {len(model.sg_units)} SG / {len(model.gfl_units)} GFL / "
        f"{len(model.gfm_units)} GFM"
    )


# ----------------------------------------------------------------- config

@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run needs besides the network."""

    metrics: tuple = ALL_METRICS
    gscr_limit: float = DEFAULT_GSCR_LIMIT
    scc_limit: float | None = None
    dv_limit: float = DEFAULT_DV_LIMIT
    n_c: int = 4
    budget: int = 100_000
    seed: int = 0
    nu0: float | None = None
    nu_growth: float = 1.5
    nu_max_attempts: int = 20
    cone_rows: int | None = None
    fault_buses: tuple = ()
    power_factor: float = 1.0
    g6_samples: int = 512
    frequency: FrequencyParams | None = None
    out: str = "out"
    workers: int = 1

    def __post_init__(self):
        metrics = tuple(m for m in ALL_METRICS if m in set(self.metrics))
        unknown = set(self.metrics) - set(ALL_METRICS)
        if unknown:
            raise SchemaError(f"unknown metrics {sorted(unknown)}; expected a subset of {list(ALL_METRICS)}")
        object.__setattr__(self, "metrics", metrics)
        object.__setattr__(self, "fault_buses", tuple(self.fault_buses))
        for name in ("gscr_limit", "dv_limit", "nu_growth", "power_factor"):
            if not getattr(self, name) > 0:
                raise SchemaError(f"{name} must be positive")
        if self.scc_limit is not None and not self.scc_limit > 0:
            raise SchemaError("scc_limit must be positive")
        if "g3" in metrics and self.scc_limit is None:
            raise SchemaError("metric g3 needs limits.scc")
        if {"g3", "g4"} & set(metrics) and not self.fault_buses:
            raise SchemaError("metrics g3/g4 need a non-empty fault_buses list")
        if "g6" in metrics and self.frequency is None:
            raise SchemaError("metric g6 needs a frequency block")
        if self.n_c < 1 or self.budget < 1 or self.workers < 1:
            raise SchemaError("n_c, budget and workers must be at least 1")

    def replace(self, **changes) -> "PipelineConfig":
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data.update({k: v for k, v in changes.items() if v is not None})
        return PipelineConfig(**data)

    def resolved(self) -> dict:
        """Plain dict of every setting, defaults included (for the run log)."""
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data["metrics"] = list(self.metrics)
        data["fault_buses"] = list(self.fault_buses)
        if self.frequency is not None:
            data["frequency"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.frequency).items()}
        return data


def config_from_dict(data: dict, source: str = "<config>") -> PipelineConfig:
    validate(data, "config", source)
    limits = data.get("limits", {})
    nu = data.get("nu", {})
    freq = None
    if "frequency" in data:
        f = data["frequency"]
        if "delta_f" not in limits:
            raise SchemaError(f"{source}: at $.limits: frequency block given but limits.delta_f is missing")
        farms = f.get("wind_farms", [])
        try:
            freq = FrequencyParams(
                delta_p=float(f["delta_p"]),
                t_d=float(f["t_d"]),
                delta_f_lim=float(limits["delta_f"]),
                damping=float(f.get("damping", 0.0)),
                gamma=tuple(float(w["gamma"]) for w in farms),
                h_s=tuple(float(w.get("h_s", 0.0)) for w in farms),
                inertia=float(f.get("inertia", 0.0)),
                reserve=float(f.get("reserve", 0.0)),
                farm_ids=tuple(w["id"] for w in farms),
            )
        except ValueError as exc:
            raise SchemaError(f"{source}: at $.frequency: {exc}") from exc
    kw = dict(
        metrics=tuple(data.get("metrics", ALL_METRICS)),
        gscr_limit=float(limits.get("gscr", DEFAULT_GSCR_LIMIT)),
        scc_limit=float(limits["scc"]) if "scc" in limits else None,
        dv_limit=float(limits.get("delta_v", DEFAULT_DV_LIMIT)),
        n_c=int(data.get("n_c", 4)),
        budget=int(data.get("budget", 100_000)),
        seed=int(data.get("seed", 0)),
        nu0=nu.get("nu0"),
        nu_growth=float(nu.get("growth", 1.5)),
        nu_max_attempts=int(nu.get("max_attempts", 20)),
        cone_rows=data.get("cone_rows"),
        fault_buses=tuple(data.get("fault_buses", ())),
        power_factor=float(data.get("power_factor", 1.0)),
        g6_samples=int(data.get("g6_samples", 512)),
        frequency=freq,
        out=data.get("out", "out"),
    )
    try:
        return PipelineConfig(**kw)
    except SchemaError as exc:
        raise SchemaError(f"{source}: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    return config_from_dict(_read_json(path), str(path))


def load(config_path: str | Path, network_path: str | Path) -> tuple[PipelineConfig, NetworkModel]:
    """Validate both files, cross-check fault buses, echo the resolved setup."""
    model = load_network(network_path)
    config = load_config(config_path)
    check_against_model(config, model)
    logger.info("network %s: %s", model.name or network_path, describe(model))
    logger.info("config: %s", json.dumps(config.resolved(), sort_keys=True, default=str))
    return config, model


def check_against_model(config: PipelineConfig, model: NetworkModel) -> None:
    for bus in config.fault_buses:
        if bus not in model.buses:
            raise SchemaError(f"fault_buses: bus {bus!r} is not in the network")


# ---------------------------------------------------------------- writing

def dumps(data) -> str:
    """Canonical JSON text: sorted keys, fixed indent, trailing newline."""
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(data))
    return path


def load_constraint(path: str | Path) -> dict:
    path = Path(path)
    data = _read_json(path)
    validate(data, "constraint", str(path))
    return data


def ensure_writable(out_dir: str | Path) -> Path:
    """Create ``out_dir`` and prove it is writable; raises OSError otherwise."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_probe"
    with open(probe, "w") as fh:
        fh.write("ok")
    probe.unlink()
    return out


@dataclass
class LogCapture:
    """File handler on the package logger for the duration of a run."""

    path: Path
    level: int = logging.INFO
    handler: logging.Handler | None = field(default=None, init=False)
    _saved_level: int = field(default=logging.NOTSET, init=False)

    def __enter__(self):
        self.handler = logging.FileHandler(self.path, mode="w")
        self.handler.setLevel(self.level)
        self.handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        pkg = logging.getLogger("stabcon")
        pkg.addHandler(self.handler)
        self._saved_level = pkg.level
        if pkg.getEffectiveLevel() > self.level:
            pkg.setLevel(self.level)
        return self

    def __exit__(self, *exc):
        pkg = logging.getLogger("stabcon")
        pkg.removeHandler(self.handler)
        pkg.setLevel(self._saved_level)
        self.handler.close()
        return False
