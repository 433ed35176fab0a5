"""Stability metric evaluators g1..g6 and the equality quantities h1..h3.

All normal-operation voltage magnitudes are 1 p.u.; fault formulas are
evaluated in complex arithmetic and reduced to magnitudes at the end.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    DivergenceError,
    MetricNotApplicable,
    ParameterError,
    SingularFaultError,
    SingularNetworkError,
)
from .grid import (
    ImpedanceMatrix,
    NetworkModel,
    build_extended_admittance,
    invert_to_impedance,
    kron_reduce,
    sources_online,
    system_admittance,
)

DEFAULT_GSCR_LIMIT = 2.0
DEFAULT_DV_LIMIT = 0.85
SYNC_LIMIT = 1.0
ANDERSON_DEPTH = 5


@dataclass(frozen=True)
class MetricValue:
    metric: str
    value: float
    limit: float
    scenario_id: str | None = None
    details: dict = field(default_factory=dict, compare=False)

    @property
    def feasible(self) -> bool:
        return bool(self.value >= self.limit)


# ----------------------------------------------------------------- sync (g1)

def eval_sync_equilibrium(
    Z: ImpedanceMatrix,
    model: NetworkModel,
    unit_id: str,
    P: float,
    Q: float,
    *,
    scenario_id: str | None = None,
) -> MetricValue:
    """PLL equilibrium existence at a GFL bus.

    The compiled form compares ``1/|Z_kk|`` against the constant 1; the exact
    right-hand side ``cos(phi) Q + sin(phi) P`` is kept in ``details``.
    """
    unit = model.unit(unit_id)
    if unit not in model.gfl_units:
        raise KeyError(f"{unit_id!r} is not a grid-following unit")
    z = Z.entry(unit.bus, unit.bus)
    phi = math.atan2(z.imag, z.real)
    value = 1.0 / abs(z)
    rhs = math.cos(phi) * Q + math.sin(phi) * P
    return MetricValue(
        "g1",
        value,
        SYNC_LIMIT,
        scenario_id,
        {"exact_rhs": rhs, "exact_feasible": bool(value >= rhs), "angle": phi},
    )


# ----------------------------------------------------------------- gSCR (g2)

def reduced_gfl_network(model: NetworkModel, scenario):
    """Kron-reduced admittance over GFL buses with online GFM buses deleted.

    Returns ``(Y_red, gfl_buses, P_per_bus)``.  GFL units with ``P <= 0`` are
    left out; their buses are eliminated like passive buses.
    """
    P = np.asarray(scenario.P, dtype=float)
    power: dict = {}
    for u, p in zip(model.gfl_units, P):
        if p > 0:
            power[u.bus] = power.get(u.bus, 0.0) + p
    if not power:
        raise MetricNotApplicable("no grid-following unit with P > 0")
    offset = len(model.gfl_units)
    gfm_buses = {
        u.bus for k, u in enumerate(model.gfm_units) if scenario.alpha[offset + k] > 0 and u.bus not in power
    }
    if not sources_online(model, scenario, include_gfm=True):
        raise SingularNetworkError("no voltage source online")
    Y = system_admittance(model, scenario, include_gfm=True)
    invert_to_impedance(Y)
    retained = set(power) | gfm_buses
    Y_red = kron_reduce(Y, retained)
    gfl_buses = tuple(b for b in Y_red.buses if b in power)
    # grid-forming rows/columns are deleted, i.e. those buses act as stiff sources
    keep = [Y_red.index(b) for b in gfl_buses]
    Y_del = type(Y_red)(Y_red.values[np.ix_(keep, keep)], gfl_buses)
    return Y_del, gfl_buses, np.array([power[b] for b in gfl_buses])


def eval_gscr(
    model: NetworkModel,
    scenario,
    limit: float = DEFAULT_GSCR_LIMIT,
    voltages: Sequence[float] | None = None,
) -> MetricValue:
    Y_red, buses, P = reduced_gfl_network(model, scenario)
    Y_eq = build_extended_admittance(Y_red, P, voltages)
    eig = np.linalg.eigvals(Y_eq)
    value = float(np.min(eig.real))
    return MetricValue(
        "g2",
        value,
        limit,
        getattr(scenario, "id", None),
        {"max_imag": float(np.max(np.abs(eig.imag))), "buses": list(buses)},
    )


# ------------------------------------------------------- fault study (g3, g4)

@dataclass(frozen=True)
class FaultStudy:
    """Bolted three-phase fault at ``fault_bus``.

    Per-IBR data is in ``model.ibr_units`` order.  Scenario availability
    scales both the droop gain and the current cap of each unit.
    """

    fault_bus: object
    ibr_ids: tuple
    ibr_buses: tuple
    droop: tuple
    i_max: tuple
    scc_limit: float
    dv_limit: float = DEFAULT_DV_LIMIT
    v_prefault: float = 1.0
    i_load: tuple = ()

    def __post_init__(self):
        n = len(self.ibr_buses)
        if not (len(self.ibr_ids) == len(self.droop) == len(self.i_max) == n):
            raise ParameterError("per-IBR vectors have inconsistent lengths")
        if not self.i_load:
            object.__setattr__(self, "i_load", (0j,) * n)
        elif len(self.i_load) != n:
            raise ParameterError("i_load length does not match IBR count")
        if not (self.scc_limit > 0 and self.dv_limit > 0):
            raise ParameterError("fault limits must be positive")
        if any(d < 0 for d in self.droop):
            raise ParameterError("droop gains must be >= 0")

    @classmethod
    def from_model(cls, model: NetworkModel, fault_bus, scc_limit: float, dv_limit: float = DEFAULT_DV_LIMIT, **kw):
        model.bus_index(fault_bus)
        units = model.ibr_units
        return cls(
            fault_bus,
            tuple(u.id for u in units),
            tuple(u.bus for u in units),
            tuple(float(u.droop) for u in units),
            tuple(float(u.i_max) for u in units),
            scc_limit,
            dv_limit,
            **kw,
        )

    def effective(self, scenario=None) -> tuple[np.ndarray, np.ndarray]:
        """Scenario-scaled droop gains and current caps."""
        alpha = np.ones(len(self.droop)) if scenario is None else np.asarray(scenario.alpha, dtype=float)
        if alpha.shape != (len(self.droop),):
            raise ParameterError("scenario alpha does not match the IBR set")
        return alpha * np.asarray(self.droop), alpha * np.asarray(self.i_max)

    def impedances(self, Z: ImpedanceMatrix):
        f = Z.index(self.fault_bus)
        idx = [Z.index(b) for b in self.ibr_buses]
        z_ff = complex(Z.values[f, f])
        z_fc = Z.values[f, idx].astype(complex)
        z_cc = Z.values[idx, idx].astype(complex)
        return z_ff, z_fc, z_cc, Z.values[np.ix_(idx, idx)]


def _closed_form(Z: ImpedanceMatrix, study: FaultStudy, k: np.ndarray):
    z_ff, z_fc, z_cc, _ = study.impedances(Z)
    i_load = np.asarray(study.i_load, dtype=complex)
    own = 1.0 + k * z_cc
    scale = max(abs(z_ff), 1e-300)
    if np.any(np.abs(own) < 1e-12):
        raise SingularFaultError("1 + d Z_cc vanishes for an IBR")
    den = z_ff - np.sum(k * z_fc**2 / own)
    if abs(den) < 1e-12 * scale:
        raise SingularFaultError("fault-current denominator vanishes")
    num = -study.v_prefault + np.sum(z_fc * i_load / own)
    i_f = num / den
    dv = (z_fc * i_f - z_cc * i_load) / own
    # |num| / |den| keeps the d = 0 case bit-identical to V / |Z_FF|
    return i_f, dv, abs(num) / abs(den)


def _caps_bind(k, caps, dv) -> bool:
    return bool(np.any(k * np.abs(dv) > caps * (1.0 + 1e-12)))


def eval_scc(Z: ImpedanceMatrix, study: FaultStudy, scenario=None, *, respect_caps: bool = True) -> MetricValue:
    """Short-circuit current magnitude at the fault bus (g3).

    Closed form with uncapped droop; when ``respect_caps`` is set and some
    unit would exceed its cap, the capped fixed-point solution is used.
    """
    k, caps = study.effective(scenario)
    _, dv, scc = _closed_form(Z, study, k)
    method = "closed_form"
    if respect_caps and _caps_bind(k, caps, dv):
        scc, method = eval_scc_fixed_point(Z, study, scenario).scc, "fixed_point"
    return MetricValue("g3", float(scc), study.scc_limit, getattr(scenario, "id", None), {"method": method})


def eval_post_fault_voltage(
    Z: ImpedanceMatrix, study: FaultStudy, scenario, unit_id: str, *, respect_caps: bool = True
) -> MetricValue:
    """Negated voltage-drop magnitude at an IBR bus (g4), limit ``-dv_limit``."""
    try:
        pos = study.ibr_ids.index(unit_id)
    except ValueError:
        raise KeyError(f"unknown IBR {unit_id!r}") from None
    k, caps = study.effective(scenario)
    _, dv, _ = _closed_form(Z, study, k)
    method = "closed_form"
    if respect_caps and _caps_bind(k, caps, dv):
        dv, method = eval_scc_fixed_point(Z, study, scenario).drops, "fixed_point"
    return MetricValue(
        "g4", -float(abs(dv[pos])), -study.dv_limit, getattr(scenario, "id", None), {"method": method, "unit": unit_id}
    )


@dataclass(frozen=True)
class FixedPointResult:
    scc: float
    fault_current: complex
    drops: np.ndarray
    currents: np.ndarray
    iterations: int
    relaxed: bool
    trace: tuple


def eval_scc_fixed_point(
    Z: ImpedanceMatrix,
    study: FaultStudy,
    scenario=None,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
    caps: bool = True,
    coupling: str = "own",
) -> FixedPointResult:
    """Superposition with capped voltage-dependent IBR currents.

    Updates are substitution steps with Anderson mixing over the last few
    residuals (the first step is plain substitution); once the residual
    oscillates the steps are relaxed by 0.5.

    ``coupling="own"`` uses each IBR's own driving-point impedance in its
    voltage-drop equation, which is the model the closed forms are derived
    from.  ``coupling="full"`` adds the mutual impedances between IBR buses.
    """
    if coupling not in ("own", "full"):
        raise ValueError("coupling must be 'own' or 'full'")
    k, cap = study.effective(scenario)
    if not caps:
        cap = np.full_like(cap, np.inf)
    z_ff, z_fc, z_cc, z_mut = study.impedances(Z)
    i_load = np.asarray(study.i_load, dtype=complex)
    if abs(z_ff) < 1e-300:
        raise SingularFaultError("Z_FF vanishes")

    def superpose(current):
        inj = current - i_load
        i_f = (-study.v_prefault - np.dot(z_fc, inj)) / z_ff
        own = z_mut @ inj if coupling == "full" else z_cc * inj
        return i_f, own + z_fc * i_f

    def droop_law(dv):
        target = -k * dv
        mag = np.abs(target)
        over = mag > cap
        if np.any(over):
            target = target.copy()
            target[over] *= cap[over] / mag[over]
        return target

    current = np.zeros(len(k), dtype=complex)
    relax = 1.0
    prev_step = None
    prev_change = np.inf
    trace = []
    # residual history for Anderson mixing
    hist_x, hist_f = [], []
    prev_x = prev_f = None
    for it in range(1, max_iter + 1):
        _, dv = superpose(current)
        f = droop_law(dv) - current
        if prev_f is not None:
            hist_x.append(current - prev_x)
            hist_f.append(f - prev_f)
            del hist_x[:-ANDERSON_DEPTH], hist_f[:-ANDERSON_DEPTH]
        step = relax * f
        if hist_f:
            dX, dF = np.column_stack(hist_x), np.column_stack(hist_f)
            gamma = np.linalg.lstsq(dF, f, rcond=None)[0]
            step = step - (dX + relax * dF) @ gamma
        prev_x, prev_f = current, f
        current = current + step
        change = float(np.max(np.abs(step))) if step.size else 0.0
        trace.append(change)
        if change <= tol:
            break
        if relax == 1.0 and prev_step is not None:
            if change >= prev_change or np.real(np.vdot(prev_step, step)) < 0:
                relax = 0.5
        prev_step, prev_change = step, change
    else:
        raise DivergenceError(f"fixed point did not converge in {max_iter} iterations", trace)
    i_f, dv = superpose(current)
    return FixedPointResult(float(abs(i_f)), complex(i_f), dv, current, it, relax != 1.0, tuple(trace))


# ----------------------------------------------- static voltage (g5, h1..h3)

def impedance_ratios(Z: ImpedanceMatrix, model: NetworkModel, unit_id: str) -> dict:
    """``|Z_kj| / |Z_kk|`` from the GFL unit's bus to every other GFL bus."""
    unit = model.gfl_units[model.gfl_position(unit_id)]
    z_kk = abs(Z.entry(unit.bus, unit.bus))
    return {
        other.id: abs(Z.entry(unit.bus, other.bus)) / z_kk for other in model.gfl_units if other.id != unit_id
    }


def equivalent_injection(
    Z: ImpedanceMatrix, model: NetworkModel, P: Sequence[float], Q: Sequence[float], unit_id: str
) -> tuple[float, float]:
    pos = model.gfl_position(unit_id)
    ratios = impedance_ratios(Z, model, unit_id)
    p_hat, q_hat = float(P[pos]), float(Q[pos])
    for k, other in enumerate(model.gfl_units):
        if k != pos:
            p_hat += ratios[other.id] * P[k]
            q_hat += ratios[other.id] * Q[k]
    return p_hat, q_hat


def short_circuit_capacity_gamma(Z: ImpedanceMatrix, model: NetworkModel, unit_id: str, v_grid: float = 1.0) -> float:
    unit = model.gfl_units[model.gfl_position(unit_id)]
    return v_grid**2 / (2.0 * abs(Z.entry(unit.bus, unit.bus)))


def eval_voltage_stability(p_hat: float, q_hat: float, gamma: float, scenario_id=None) -> MetricValue:
    value = (q_hat + gamma) ** 2 - p_hat**2 - q_hat**2
    return MetricValue("g5", float(value), 0.0, scenario_id)


# ---------------------------------------------------------- frequency (g6)

@dataclass(frozen=True)
class FrequencyParams:
    """Nadir constraint data.  ``inertia`` is total H including wind SI."""

    delta_p: float
    t_d: float
    delta_f_lim: float
    damping: float = 0.0
    gamma: tuple = ()
    h_s: tuple = ()
    inertia: float = 0.0
    reserve: float = 0.0
    farm_ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        object.__setattr__(self, "h_s", tuple(float(h) for h in self.h_s) or (0.0,) * len(self.gamma))
        if not self.farm_ids:
            object.__setattr__(self, "farm_ids", tuple(f"WF{j + 1}" for j in range(len(self.gamma))))
        if not (len(self.gamma) == len(self.h_s) == len(self.farm_ids)):
            raise ParameterError("gamma, h_s and farm_ids must have equal length")
        if not self.t_d > 0:
            raise ParameterError("PFR delivery time must be > 0")
        if not self.delta_f_lim > 0:
            raise ParameterError("frequency deviation limit must be > 0")
        if any(g < 0 for g in self.gamma):
            raise ParameterError("gamma coefficients must be >= 0")
        if self.inertia < 0 or self.reserve < 0:
            raise ParameterError("inertia and reserve must be >= 0")
        if not self.delta_p / self.delta_f_lim > self.damping:
            raise ParameterError("requires delta_p / delta_f_lim > damping")

    def with_point(self, inertia: float, reserve: float, h_s: Sequence[float]) -> "FrequencyParams":
        return replace(self, inertia=float(inertia), reserve=float(reserve), h_s=tuple(h_s))

    @property
    def x1_squared(self) -> float:
        """Constant part of the nadir requirement on H*R."""
        return self.delta_p**2 * self.t_d / (4.0 * self.delta_f_lim) - self.delta_p * self.t_d * self.damping / 4.0


def eval_nadir_margin(fp: FrequencyParams, scenario_id=None) -> MetricValue:
    si = sum(g * h * h for g, h in zip(fp.gamma, fp.h_s))
    value = (
        fp.inertia * fp.reserve
        - fp.delta_p**2 * fp.t_d / (4.0 * fp.delta_f_lim)
        + fp.delta_p * fp.t_d / 4.0 * (fp.damping - si)
    )
    return MetricValue("g6", float(value), 0.0, scenario_id)
