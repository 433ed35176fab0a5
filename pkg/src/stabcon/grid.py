"""Network data model and dense complex linear algebra.

Sign convention: a series branch contributes ``y = 1/(r + jx)`` to both
diagonal entries and ``-y`` to the off-diagonals; half of the total line
charging ``jb/2`` sits at each end.  Synchronous machines and grid-forming
converters are grounded reactances ``1/(jX) = -j/X``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Hashable, Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    DegenerateBranchError,
    DomainError,
    ModelError,
    ReductionError,
    SingularNetworkError,
    StructuralError,
)

if TYPE_CHECKING:  # pragma: no cover
    from .scenarios import Scenario

logger = logging.getLogger(__name__)

BusId = Hashable

#: reciprocal condition numbers below this are treated as singular
RCOND_SINGULAR = 1e-12


@dataclass(frozen=True)
class Branch:
    from_bus: BusId
    to_bus: BusId
    r: float
    x: float
    b: float = 0.0
    id: str = ""
    in_service: bool = True

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class SyncGenerator:
    id: str
    bus: BusId
    reactance: float  # transient reactance X_g


@dataclass(frozen=True)
class GridFormingUnit:
    id: str
    bus: BusId
    reactance: float  # equivalent series reactance X_cm
    droop: float  # reactive current droop gain d_c
    i_max: float  # current cap
    alpha: float = 1.0  # nominal online fraction


@dataclass(frozen=True)
class GridFollowingUnit:
    id: str
    bus: BusId
    rating: float  # rated active power
    droop: float
    i_max: float
    alpha: float = 1.0


@dataclass(frozen=True)
class NetworkModel:
    """Buses, branches and unit placements; all quantities in p.u.

    Bus order is frozen at construction and used by every matrix built from
    the model.  IBRs are ordered grid-following first, then grid-forming;
    scenario ``alpha`` vectors follow that order.
    """

    buses: tuple
    branches: tuple[Branch, ...] = ()
    sg_units: tuple[SyncGenerator, ...] = ()
    gfm_units: tuple[GridFormingUnit, ...] = ()
    gfl_units: tuple[GridFollowingUnit, ...] = ()
    base_mva: float = 100.0
    name: str = ""
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "sg_units", tuple(self.sg_units))
        object.__setattr__(self, "gfm_units", tuple(self.gfm_units))
        object.__setattr__(self, "gfl_units", tuple(self.gfl_units))
        index = {bus: k for k, bus in enumerate(self.buses)}
        if len(index) != len(self.buses):
            raise ModelError("duplicate bus ids")
        object.__setattr__(self, "_index", index)
        self._validate()

    def _validate(self) -> None:
        for k, br in enumerate(self.branches):
            label = br.id or f"branches[{k}]"
            for end in (br.from_bus, br.to_bus):
                if end not in self._index:
                    raise ModelError(f"branch {label!r} references unknown bus {end!r}")
        ids = [u.id for u in self.units]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate unit ids")
        for u in self.units:
            if u.bus not in self._index:
                raise ModelError(f"unit {u.id!r} references unknown bus {u.bus!r}")
        for u in (*self.sg_units, *self.gfm_units):
            if not u.reactance > 0:
                raise ModelError(f"unit {u.id!r}: reactance must be > 0")
        for u in self.ibr_units:
            if u.droop < 0:
                raise ModelError(f"unit {u.id!r}: droop gain must be >= 0")
            if not u.i_max > 0:
                raise ModelError(f"unit {u.id!r}: current cap must be > 0")
            if not 0.0 <= u.alpha <= 1.0:
                raise ModelError(f"unit {u.id!r}: alpha must lie in [0, 1]")
        for u in self.gfl_units:
            if u.rating < 0:
                raise ModelError(f"unit {u.id!r}: rating must be >= 0")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def ibr_units(self) -> tuple:
        return self.gfl_units + self.gfm_units

    @property
    def units(self) -> tuple:
        return self.sg_units + self.gfl_units + self.gfm_units

    def bus_index(self, bus: BusId) -> int:
        try:
            return self._index[bus]
        except KeyError:
            raise KeyError(f"unknown bus {bus!r}") from None

    def unit(self, unit_id: str):
        for u in self.units:
            if u.id == unit_id:
                return u
        raise KeyError(f"unknown unit {unit_id!r}")

    def ibr_position(self, unit_id: str) -> int:
        for k, u in enumerate(self.ibr_units):
            if u.id == unit_id:
                return k
        raise KeyError(f"unknown IBR {unit_id!r}")

    def gfl_position(self, unit_id: str) -> int:
        for k, u in enumerate(self.gfl_units):
            if u.id == unit_id:
                return k
        raise KeyError(f"unknown GFL unit {unit_id!r}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BusMatrix:
    values: np.ndarray
    buses: tuple

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.ndim != 2 or vals.shape[0] != vals.shape[1] or vals.shape[0] != len(self.buses):
            raise ValueError("matrix shape does not match bus ordering")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "buses", tuple(self.buses))

    def index(self, bus: BusId) -> int:
        try:
            return self.buses.index(bus)
        except ValueError:
            raise KeyError(f"bus {bus!r} not in matrix ordering") from None

    def entry(self, a: BusId, b: BusId) -> complex:
        return complex(self.values[self.index(a), self.index(b)])

    def __add__(self, other: "BusMatrix") -> "BusMatrix":
        if self.buses != other.buses:
            raise ValueError("bus orderings differ")
        return type(self)(self.values + other.values, self.buses)


class AdmittanceMatrix(BusMatrix):
    pass


class ImpedanceMatrix(BusMatrix):
    def angle(self, bus: BusId) -> float:
        """Angle of the driving-point impedance at ``bus`` (radians)."""
        return float(np.angle(self.entry(bus, bus)))


def check_connected(model: NetworkModel) -> None:
    if model.n_bus <= 1:
        return
    active = [br for br in model.branches if br.in_service]
    rows = [model.bus_index(br.from_bus) for br in active]
    cols = [model.bus_index(br.to_bus) for br in active]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(model.n_bus, model.n_bus))
    n_comp, labels = connected_components(graph, directed=False)
    if n_comp > 1:
        isolated = [model.buses[k] for k in np.flatnonzero(labels != labels[0])]
        raise StructuralError(f"network is disconnected; buses not reached from {model.buses[0]!r}: {isolated}")


def assemble_base_admittance(model: NetworkModel) -> AdmittanceMatrix:
    """Branch-only admittance matrix Y0 (series admittances plus half-shunts)."""
    check_connected(model)
    n = model.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for k, br in enumerate(model.branches):
        if not br.in_service:
            continue
        if br.r == 0.0 and br.x == 0.0:
            raise DegenerateBranchError(f"branch {br.id or k!r} has zero series impedance")
        i, j = model.bus_index(br.from_bus), model.bus_index(br.to_bus)
        y = br.series_admittance
        shunt = 0.5j * br.b
        Y[i, i] += y + shunt
        Y[j, j] += y + shunt
        Y[i, j] -= y
        Y[j, i] -= y
    return AdmittanceMatrix(Y, model.buses)


def _check_alpha(alpha: Sequence[float]) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0.0) or np.any(alpha > 1.0) or np.any(~np.isfinite(alpha)):
        raise DomainError(f"alpha values must lie in [0, 1], got {alpha.tolist()}")
    return alpha


def generator_susceptance_increment(
    model: NetworkModel, scenario: "Scenario", include_gfm: bool = True
) -> AdmittanceMatrix:
    """Diagonal increment Yg from online SGs (and, optionally, GFM units)."""
    x = np.asarray(scenario.x, dtype=float)
    alpha = _check_alpha(scenario.alpha)
    if x.shape != (len(model.sg_units),) or alpha.shape != (len(model.ibr_units),):
        raise ValueError("scenario dimensions do not match the model")
    diag = np.zeros(model.n_bus, dtype=complex)
    for u, status in zip(model.sg_units, x):
        diag[model.bus_index(u.bus)] += -1j * status / u.reactance
    if include_gfm:
        offset = len(model.gfl_units)
        for k, u in enumerate(model.gfm_units):
            diag[model.bus_index(u.bus)] += -1j * alpha[offset + k] / u.reactance
    return AdmittanceMatrix(np.diag(diag), model.buses)


def invert_to_impedance(Y: AdmittanceMatrix) -> ImpedanceMatrix:
    values = Y.values
    if values.shape[0] == 0:
        return ImpedanceMatrix(values, Y.buses)
    rcond = 1.0 / np.linalg.cond(values)
    if not np.isfinite(rcond) or rcond < RCOND_SINGULAR:
        raise SingularNetworkError(f"admittance matrix is singular (rcond={rcond:.3g}); no voltage source online")
    Z = np.linalg.inv(values)
    # inverse of a complex-symmetric matrix is complex-symmetric; remove LU roundoff
    Z = 0.5 * (Z + Z.T)
    return ImpedanceMatrix(Z, Y.buses)


def system_admittance(model: NetworkModel, scenario: "Scenario", include_gfm: bool = True) -> AdmittanceMatrix:
    return assemble_base_admittance(model) + generator_susceptance_increment(model, scenario, include_gfm)


def sources_online(model: NetworkModel, scenario: "Scenario", include_gfm: bool = True) -> bool:
    if any(v > 0 for v in scenario.x):
        return True
    offset = len(model.gfl_units)
    return include_gfm and any(a > 0 for a in scenario.alpha[offset:])


def system_impedance(model: NetworkModel, scenario: "Scenario", include_gfm: bool = True) -> ImpedanceMatrix:
    """Z = (Y0 + Yg)^-1.  Fault studies use ``include_gfm=False``.

    Line charging alone can keep Y invertible, so the absence of any online
    voltage source is checked explicitly.
    """
    if not sources_online(model, scenario, include_gfm):
        raise SingularNetworkError("no voltage source online")
    return invert_to_impedance(system_admittance(model, scenario, include_gfm))


def kron_reduce(Y: AdmittanceMatrix, retained: Iterable[BusId]) -> AdmittanceMatrix:
    """Schur complement of ``Y`` onto ``retained`` buses (kept in ``Y`` order)."""
    keep_set = set(retained)
    unknown = keep_set.difference(Y.buses)
    if unknown:
        raise KeyError(f"retained buses not in matrix: {sorted(map(str, unknown))}")
    keep = [k for k, bus in enumerate(Y.buses) if bus in keep_set]
    elim = [k for k, bus in enumerate(Y.buses) if bus not in keep_set]
    buses = tuple(Y.buses[k] for k in keep)
    values = Y.values
    if not elim:
        return AdmittanceMatrix(values[np.ix_(keep, keep)], buses)
    Yee = values[np.ix_(elim, elim)]
    rcond = 1.0 / np.linalg.cond(Yee)
    if not np.isfinite(rcond) or rcond < RCOND_SINGULAR:
        raise ReductionError(f"eliminated block is singular (rcond={rcond:.3g})")
    Yrr = values[np.ix_(keep, keep)]
    Yre = values[np.ix_(keep, elim)]
    Yer = values[np.ix_(elim, keep)]
    reduced = Yrr - Yre @ np.linalg.solve(Yee, Yer)
    return AdmittanceMatrix(reduced, buses)


def susceptance_network(Y_red: AdmittanceMatrix) -> np.ndarray:
    """Real susceptance matrix B with Y ~ -jB, i.e. ``B = -Im(Y)``.

    For an inductive network B is a grounded Laplacian: positive diagonal,
    non-positive off-diagonals.
    """
    return -np.imag(Y_red.values)


def build_extended_admittance(
    Y_red: AdmittanceMatrix, gfl_power: Sequence[float], voltages: Sequence[float] | None = None
) -> np.ndarray:
    """``diag(V^2 / P) @ B_red`` over the buses of ``Y_red``.

    Entries with ``P <= 0`` carry no grid-following unit and are dropped
    (rows and columns removed).
    """
    P = np.asarray(gfl_power, dtype=float)
    n = len(Y_red.buses)
    V = np.ones(n) if voltages is None else np.asarray(voltages, dtype=float)
    if P.shape != (n,) or V.shape != (n,):
        raise ValueError("power/voltage vectors must match the reduced matrix size")
    B = susceptance_network(Y_red)
    keep = np.flatnonzero(P > 0)
    B = B[np.ix_(keep, keep)]
    return (V[keep] ** 2 / P[keep])[:, None] * B
