import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import admittance, impedance, random_network, random_scenario
from stabcon.errors import DegenerateBranchError, DomainError, ModelError, ReductionError, SingularNetworkError
from stabcon.errors import StructuralError
from stabcon.grid import (
    AdmittanceMatrix,
    Branch,
    GridFollowingUnit,
    GridFormingUnit,
    NetworkModel,
    SyncGenerator,
    assemble_base_admittance,
    build_extended_admittance,
    generator_susceptance_increment,
    invert_to_impedance,
    kron_reduce,
    susceptance_network,
    system_admittance,
    system_impedance,
)
from stabcon.scenarios import Scenario

seeds = st.integers(0, 2**32 - 1)


def chain(*branches, **units):
    buses = sorted({b for br in branches for b in (br.from_bus, br.to_bus)}) or [1]
    return NetworkModel(tuple(buses), tuple(branches), **units)


# ------------------------------------------------------------ base admittance

def test_single_branch_admittance():
    Y = assemble_base_admittance(chain(Branch(1, 2, 0.0, 0.5)))
    # y = 1 / (j 0.5) = -2j on the diagonal, +2j off it
    np.testing.assert_allclose(Y.values, [[-2j, 2j], [2j, -2j]], atol=0)


def test_empty_network_is_zero_scalar():
    Y = assemble_base_admittance(NetworkModel((1,)))
    assert Y.values.shape == (1, 1)
    assert Y.values[0, 0] == 0


def test_triangle_is_scaled_laplacian():
    model = chain(Branch(1, 2, 0, 0.1), Branch(2, 3, 0, 0.1), Branch(1, 3, 0, 0.1))
    L = 10.0 * np.array([[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])
    np.testing.assert_allclose(assemble_base_admittance(model).values, -1j * L, atol=1e-12)


def test_half_shunts_and_row_sums():
    model = chain(Branch(1, 2, 0.01, 0.1, b=0.2), Branch(2, 3, 0.02, 0.2, b=0.1))
    Y = assemble_base_admittance(model).values
    # row sums of Y0 equal the shunt injection at each bus
    np.testing.assert_allclose(Y.sum(axis=1), [0.1j, 0.15j, 0.05j], atol=1e-12)


def test_disconnected_network_rejected():
    model = NetworkModel((1, 2, 3), (Branch(1, 2, 0, 0.1),))
    with pytest.raises(StructuralError, match="3"):
        assemble_base_admittance(model)


def test_out_of_service_branch_can_disconnect():
    model = chain(Branch(1, 2, 0, 0.1), Branch(2, 3, 0, 0.1, in_service=False))
    with pytest.raises(StructuralError):
        assemble_base_admittance(model)


def test_zero_impedance_branch_rejected():
    with pytest.raises(DegenerateBranchError, match="bad"):
        assemble_base_admittance(chain(Branch(1, 2, 0.0, 0.0, id="bad")))


@pytest.mark.parametrize(
    "kwargs, message",
    [
        (dict(branches=(Branch(1, 9, 0, 0.1, id="L1"),)), "L1"),
        (dict(sg_units=(SyncGenerator("G", 1, 0.0),)), "reactance"),
        (dict(gfm_units=(GridFormingUnit("M", 1, 0.1, -1.0, 1.0),)), "droop"),
        (dict(gfl_units=(GridFollowingUnit("W", 1, 1.0, 1.0, 0.0),)), "current cap"),
        (dict(sg_units=(SyncGenerator("G", 7, 0.1),)), "unknown bus"),
    ],
)
def test_model_invariants(kwargs, message):
    with pytest.raises(ModelError, match=message):
        NetworkModel((1, 2), **kwargs)


# ------------------------------------------------------- generator increments

def one_bus(sg=(), gfm=(), gfl=()):
    return NetworkModel((1,), (), tuple(sg), tuple(gfm), tuple(gfl))


def test_sg_increment_magnitude():
    model = one_bus(sg=[SyncGenerator("G", 1, 0.2)])
    Yg = generator_susceptance_increment(model, Scenario((1,), ()))
    assert abs(Yg.values[0, 0]) == pytest.approx(5.0)
    assert Yg.values[0, 0] == pytest.approx(-5j)


def test_all_offline_increment_is_zero():
    model = random_network(np.random.default_rng(0), n_bus=5, n_sg=3, n_gfl=1, n_gfm=0)
    s = Scenario((0, 0, 0), (0.5,))
    assert not generator_susceptance_increment(model, s).values.any()


def test_gfm_increment_scaled_by_alpha():
    model = one_bus(gfm=[GridFormingUnit("M", 1, 0.25, 1.0, 1.0)])
    s = Scenario((), (0.5,))
    assert abs(generator_susceptance_increment(model, s, include_gfm=True).values[0, 0]) == pytest.approx(2.0)
    assert generator_susceptance_increment(model, s, include_gfm=False).values[0, 0] == 0


def test_alpha_outside_unit_interval_is_domain_error():
    model = one_bus(gfm=[GridFormingUnit("M", 1, 0.25, 1.0, 1.0)])
    bad = Scenario.__new__(Scenario)
    object.__setattr__(bad, "x", ())
    object.__setattr__(bad, "alpha", (1.5,))
    with pytest.raises(DomainError):
        generator_susceptance_increment(model, bad)


# ------------------------------------------------------------------ inversion

def test_scalar_inverse():
    Z = invert_to_impedance(AdmittanceMatrix(np.array([[-5j]]), (1,)))
    assert Z.values[0, 0] == pytest.approx(0.2j)


def test_all_sg_offline_is_singular():
    model = NetworkModel((1, 2), (Branch(1, 2, 0, 0.1),), (SyncGenerator("G", 1, 0.2),))
    with pytest.raises(SingularNetworkError, match="no voltage source"):
        system_impedance(model, Scenario((0,), ()))
    with pytest.raises(SingularNetworkError):
        invert_to_impedance(assemble_base_admittance(model))


def test_three_bus_inverse_matches_lu_oracle():
    model = NetworkModel(
        (1, 2, 3),
        (Branch(1, 2, 0.01, 0.1, 0.02), Branch(2, 3, 0.02, 0.15, 0.01), Branch(1, 3, 0.015, 0.12)),
        (SyncGenerator("G1", 1, 0.2), SyncGenerator("G2", 3, 0.25)),
    )
    s = Scenario((1, 1), ())
    Z = system_impedance(model, s)
    np.testing.assert_allclose(Z.values, impedance(model, s), atol=1e-10, rtol=0)


# ---------------------------------------------------------------------- Kron

def test_kron_identity_when_all_retained():
    model = random_network(np.random.default_rng(3), n_bus=5, n_sg=2, n_gfl=1, n_gfm=0)
    Y = system_admittance(model, Scenario((1, 1), (1.0,)))
    np.testing.assert_array_equal(kron_reduce(Y, model.buses).values, Y.values)


def test_kron_series_combination():
    y12, ysh = 1 / (0.02 + 0.2j), -4j
    Y = AdmittanceMatrix(np.array([[y12, -y12], [-y12, y12 + ysh]]), (1, 2))
    red = kron_reduce(Y, [1])
    assert red.values[0, 0] == pytest.approx(y12 * ysh / (y12 + ysh), rel=1e-14)


def test_kron_port_equivalence_four_bus():
    rng = np.random.default_rng(4)
    model = random_network(rng, n_bus=4, n_sg=1, n_gfl=2, n_gfm=0)
    retained = (1, 3)
    Y = system_admittance(model, Scenario((1,), (1.0, 1.0)))
    red = kron_reduce(Y, retained)
    idx = [Y.index(b) for b in retained]
    for k in range(2):
        inj = np.zeros(4, complex)
        inj[idx[k]] = 1.0
        v_full = np.linalg.solve(Y.values, inj)[idx]
        v_red = np.linalg.solve(red.values, inj[idx])
        np.testing.assert_allclose(v_red, v_full, atol=1e-10, rtol=0)


def test_kron_singular_eliminated_block():
    # bus 2 floats once bus 1 is retained: its eliminated block is exactly zero
    Y = AdmittanceMatrix(np.zeros((2, 2), complex), (1, 2))
    with pytest.raises(ReductionError):
        kron_reduce(Y, [1])


def test_kron_unknown_retained_bus():
    Y = AdmittanceMatrix(np.eye(2, dtype=complex), (1, 2))
    with pytest.raises(KeyError):
        kron_reduce(Y, [5])


# --------------------------------------------------------- extended admittance

def test_extended_admittance_scalar():
    Y = AdmittanceMatrix(np.array([[-4j]]), (1,))
    np.testing.assert_allclose(build_extended_admittance(Y, [0.8], [1.0]), [[5.0]])


def test_extended_admittance_unit_scaling():
    B = np.array([[5.0, -1.0], [-1.0, 4.0]])
    Y = AdmittanceMatrix(-1j * B, (1, 2))
    np.testing.assert_allclose(build_extended_admittance(Y, [1.0, 1.0]), B)


def test_extended_admittance_two_gfl_eigenvalues():
    B = np.array([[6.0, -2.0], [-2.0, 3.0]])
    P = np.array([0.5, 1.5])
    Yeq = build_extended_admittance(AdmittanceMatrix(-1j * B, (1, 2)), P)
    # characteristic polynomial lambda^2 - tr lambda + det
    tr = Yeq[0, 0] + Yeq[1, 1]
    det = Yeq[0, 0] * Yeq[1, 1] - Yeq[0, 1] * Yeq[1, 0]
    disc = np.sqrt(tr**2 - 4 * det)
    expected = np.sort([(tr - disc) / 2, (tr + disc) / 2])
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(Yeq).real), expected, atol=1e-10)


def test_extended_admittance_drops_idle_units():
    B = np.array([[6.0, -2.0], [-2.0, 3.0]])
    Yeq = build_extended_admittance(AdmittanceMatrix(-1j * B, (1, 2)), [0.0, 1.5])
    np.testing.assert_allclose(Yeq, [[2.0]])


def test_susceptance_network_sign():
    assert susceptance_network(AdmittanceMatrix(np.array([[-3j]]), (1,)))[0, 0] == 3.0


# ---------------------------------------------------------------- properties

@given(seeds)
def test_base_admittance_symmetric_and_matches_incidence_oracle(seed):
    model = random_network(np.random.default_rng(seed))
    Y0 = assemble_base_admittance(model).values
    assert np.array_equal(Y0, Y0.T)
    np.testing.assert_allclose(Y0, admittance(model), atol=1e-12, rtol=0)


@given(seeds)
def test_inverse_consistency(seed):
    rng = np.random.default_rng(seed)
    model = random_network(rng)
    s = random_scenario(rng, model)
    Y = system_admittance(model, s)
    Z = invert_to_impedance(Y)
    assert np.max(np.abs(Z.values @ Y.values - np.eye(model.n_bus))) <= 1e-10
    assert np.array_equal(Z.values, Z.values.T)


@given(seeds)
def test_kron_port_equivalence_random(seed):
    rng = np.random.default_rng(seed)
    model = random_network(rng)
    Y = system_admittance(model, random_scenario(rng, model))
    k = int(rng.integers(1, model.n_bus + 1))
    retained = set(rng.choice(model.buses, k, replace=False).tolist())
    red = kron_reduce(Y, retained)
    idx = [Y.index(b) for b in red.buses]
    inj = np.zeros(model.n_bus, complex)
    inj[idx] = rng.standard_normal(len(idx)) + 1j * rng.standard_normal(len(idx))
    v_full = np.linalg.solve(Y.values, inj)[idx]
    v_red = np.linalg.solve(red.values, inj[idx])
    np.testing.assert_allclose(v_red, v_full, atol=1e-10, rtol=0)


@given(seeds)
def test_adding_a_generator_strengthens_every_bus(seed):
    rng = np.random.default_rng(seed)
    model = random_network(rng, n_sg=3, charging=False)
    s = random_scenario(rng, model)
    off = [k for k, v in enumerate(s.x) if v == 0]
    if not off:
        return
    x_more = list(s.x)
    x_more[off[0]] = 1
    s_more = Scenario.build(model, x_more, s.alpha)
    Y1, Y2 = system_admittance(model, s), system_admittance(model, s_more)
    assert np.all(np.abs(np.diag(Y2.values)) >= np.abs(np.diag(Y1.values)) - 1e-12)
    Z1, Z2 = system_impedance(model, s), system_impedance(model, s_more)
    assert np.all(np.abs(np.diag(Z2.values)) <= np.abs(np.diag(Z1.values)) + 1e-12)


@given(seeds)
def test_extended_admittance_real_spectrum(seed):
    rng = np.random.default_rng(seed)
    model = random_network(rng, n_gfl=int(rng.integers(1, 4)), n_gfm=0)
    s = random_scenario(rng, model)
    gfl_buses = sorted({u.bus for u in model.gfl_units})
    red = kron_reduce(system_admittance(model, s), gfl_buses)
    P = rng.uniform(0.1, 2.0, len(red.buses))
    eig = np.linalg.eigvals(build_extended_admittance(red, P))
    assert np.max(np.abs(eig.imag)) <= 1e-9
