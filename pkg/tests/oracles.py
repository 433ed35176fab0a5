"""Independent reference computations used as test oracles.

Nothing here calls the package's linear-algebra helpers: admittances are
built from the incidence matrix, fault currents from a direct linear solve,
and gSCR from a symmetric eigenproblem.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from stabcon.grid import Branch, GridFollowingUnit, GridFormingUnit, NetworkModel, SyncGenerator
from stabcon.scenarios import Scenario, StabilityDataset, partition
from stabcon.surrogate import SocSurrogate


def random_network(rng, n_bus=None, n_sg=None, n_gfl=None, n_gfm=None, charging=True, r_ratio=0.1):
    """Connected random network: spanning tree plus a few chords."""
    n_bus = int(rng.integers(3, 11)) if n_bus is None else n_bus
    buses = tuple(range(1, n_bus + 1))
    edges = [(int(rng.integers(1, k)), k) for k in range(2, n_bus + 1)]
    for _ in range(int(rng.integers(0, n_bus))):
        a, b = rng.choice(buses, 2, replace=False)
        if (a, b) not in edges and (b, a) not in edges:
            edges.append((int(a), int(b)))
    branches = []
    for k, (a, b) in enumerate(edges):
        x = float(rng.uniform(0.05, 0.5))
        r = float(rng.uniform(0.0, r_ratio)) * x
        bsh = float(rng.uniform(0.0, 0.05)) if charging else 0.0
        branches.append(Branch(a, b, r, x, bsh, f"L{k}"))
    n_sg = int(rng.integers(1, 4)) if n_sg is None else n_sg
    n_ibr = int(rng.integers(1, 4)) if n_gfl is None and n_gfm is None else None
    if n_ibr is not None:
        n_gfl = int(rng.integers(1, n_ibr + 1))
        n_gfm = n_ibr - n_gfl
    pick = lambda: int(rng.choice(buses))
    sg = tuple(SyncGenerator(f"G{k}", pick(), float(rng.uniform(0.05, 0.3))) for k in range(n_sg))
    gfl = tuple(
        GridFollowingUnit(f"W{k}", pick(), float(rng.uniform(0.2, 2.0)), float(rng.uniform(0.0, 3.0)),
                          float(rng.uniform(0.5, 2.0)))
        for k in range(n_gfl)
    )
    gfm = tuple(
        GridFormingUnit(f"M{k}", pick(), float(rng.uniform(0.05, 0.3)), float(rng.uniform(0.0, 3.0)),
                        float(rng.uniform(0.5, 2.0)))
        for k in range(n_gfm)
    )
    return NetworkModel(buses, tuple(branches), sg, gfm, gfl, 100.0, "random")


def random_scenario(rng, model, all_sg_on=False):
    x = np.ones(len(model.sg_units), int) if all_sg_on else rng.integers(0, 2, len(model.sg_units))
    if not all_sg_on and not x.any():
        x[0] = 1
    alpha = rng.uniform(0.0, 1.0, len(model.ibr_units))
    return Scenario.build(model, x, alpha, id="rand")


def admittance(model, x=None, alpha=None, include_gfm=True):
    """Y = A^T diag(y) A + diag(shunts), built from the bus-branch incidence matrix."""
    n = len(model.buses)
    idx = {b: k for k, b in enumerate(model.buses)}
    live = [br for br in model.branches if br.in_service]
    A = np.zeros((len(live), n))
    y = np.zeros(len(live), complex)
    shunt = np.zeros(n, complex)
    for e, br in enumerate(live):
        A[e, idx[br.from_bus]], A[e, idx[br.to_bus]] = 1.0, -1.0
        y[e] = 1.0 / complex(br.r, br.x)
        shunt[idx[br.from_bus]] += 0.5j * br.b
        shunt[idx[br.to_bus]] += 0.5j * br.b
    if x is not None:
        for u, s in zip(model.sg_units, x):
            shunt[idx[u.bus]] += s / (1j * u.reactance)
    if include_gfm and alpha is not None:
        off = len(model.gfl_units)
        for k, u in enumerate(model.gfm_units):
            shunt[idx[u.bus]] += alpha[off + k] / (1j * u.reactance)
    return A.T @ np.diag(y) @ A + np.diag(shunt)


def impedance(model, scenario, include_gfm=True):
    Y = admittance(model, scenario.x, scenario.alpha, include_gfm)
    lu = sla.lu_factor(Y)
    return sla.lu_solve(lu, np.eye(len(Y), dtype=complex))


def fault_linear_solve(Z, f, ibr_idx, k, v0=1.0):
    """Uncapped droop fault study as one linear system.

    Unknowns (I_F, I_1..I_n); rows: V_F = 0 and I_c = -k_c dV_c with
    dV_c = Z_cF I_F + Z_cc I_c (own driving-point coupling).
    """
    n = len(ibr_idx)
    M = np.zeros((n + 1, n + 1), complex)
    rhs = np.zeros(n + 1, complex)
    M[0, 0] = Z[f, f]
    M[0, 1:] = Z[f, ibr_idx]
    rhs[0] = -v0
    for c, i in enumerate(ibr_idx):
        M[1 + c, 0] = k[c] * Z[i, f]
        M[1 + c, 1 + c] = 1.0 + k[c] * Z[i, i]
    sol = np.linalg.solve(M, rhs)
    i_f, cur = sol[0], sol[1:]
    dv = np.array([Z[i, f] * i_f + Z[i, i] * cur[c] for c, i in enumerate(ibr_idx)])
    return i_f, dv


def gscr(model, scenario):
    """lambda_min via grounding GFM buses, inverting the impedance block, and a symmetric eigensolve."""
    power = {}
    for u, p in zip(model.gfl_units, scenario.P):
        if p > 0:
            power[u.bus] = power.get(u.bus, 0.0) + p
    off = len(model.gfl_units)
    gfm = {u.bus for k, u in enumerate(model.gfm_units) if scenario.alpha[off + k] > 0 and u.bus not in power}
    Y = admittance(model, scenario.x, scenario.alpha, True)
    idx = [k for k, b in enumerate(model.buses) if b not in gfm]
    Yg = Y[np.ix_(idx, idx)]
    kept = [model.buses[k] for k in idx]
    Zg = np.linalg.inv(Yg)
    gfl = [kept.index(b) for b in model.buses if b in power]
    Yred = np.linalg.inv(Zg[np.ix_(gfl, gfl)])
    B = -np.imag(Yred)
    B = 0.5 * (B + B.T)
    P = np.array([power[b] for b in model.buses if b in power])
    s = np.sqrt(1.0 / P)
    return float(np.min(np.linalg.eigvalsh(s[:, None] * B * s[None, :])))


def synthetic_cone_dataset(seed, n=3, j=3, samples=400):
    """Samples of a known cone; the limit is the median and the band reaches the 80th percentile."""
    rng = np.random.default_rng(seed)
    truth = SocSurrogate(
        "syn", 0.6 * rng.standard_normal((j, n)), 0.3 * rng.standard_normal(j), rng.standard_normal(n),
        float(rng.standard_normal()), tuple(f"v{k}" for k in range(n)), 0.0,
    )
    X = rng.uniform(-1, 1, (samples, n))
    g = truth.value(X)
    lim = float(np.median(g))
    nu = float(np.percentile(g, 80) - lim)
    return truth, partition(StabilityDataset("syn", truth.variables, X, g, lim), lim, nu)
