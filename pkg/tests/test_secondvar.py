import numpy as np
import pytest
from conftest import adapted_route, scenario
from hypothesis import given, settings
from hypothesis import strategies as st

from srjet.endpoint import assemble_differential
from srjet.secondvar import (
    MAX_IMPULSES,
    GramTable,
    NoAbnormalCovector,
    as_index,
    build_gram,
    direct_cost,
    gram_table,
    index_divisions,
    node_of,
)

DZ = np.array([0.0, 0.0, 1.0])


@pytest.fixture(scope="module")
def table(martinet_basis):
    return gram_table(martinet_basis, DZ)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 64))
def test_gram_matches_adapted_bilinear_route(martinet_basis, table, seed, node):
    # Second route: RK4 of q2' = 2 du.Y2(q1) in adapted coordinates, paired with psi0.
    d = np.random.default_rng(seed).normal(size=(64, 2))
    _, q2 = adapted_route(martinet_basis.frame, d)
    expected = q2[node] @ DZ
    assert table.cost(node, d.ravel()) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_polarization_matches_single_integration(martinet_basis, table):
    d = np.random.default_rng(11).normal(size=128)
    direct = direct_cost(martinet_basis, DZ, d)
    for j in (1, 17, 40, 64):
        assert table.cost(j, d) == pytest.approx(direct[j], rel=1e-10, abs=1e-13)


def test_gram_blocks_are_symmetric_and_nested(table):
    assert np.array_equal(table.G, table.G.swapaxes(1, 2))
    # The cost of controls supported before t_j does not change afterwards
    # when paired with psi0 in adapted coordinates.
    assert np.allclose(table.at(20), table.at(64)[:40, :40], atol=1e-12)


def test_martinet_index_zero(martinet, martinet_basis):
    gram = build_gram(martinet, martinet_basis, DZ, 1.0)
    rep = as_index(gram)
    assert rep.index == 0
    assert rep.min_eigenvalue >= -1e-10 * rep.spectral_radius
    assert rep.kernel_dim == 128 - 3
    assert gram.symmetry_defect() == 0.0


def test_martinet_quadratic_form_is_the_square_of_x():
    # On Martinet with psi0 = dz the cost is the integral of x1^2 where x1 = int du_1,
    # up to the discretization of the z-equation.
    s = scenario("martinet", 64)
    basis = assemble_differential(s)
    d = np.zeros((64, 2))
    d[:32, 0] = 1.0
    d[32:, 0] = -1.0
    cost = direct_cost(basis, DZ, d.ravel())[-1]
    t = s.times()
    x1 = np.minimum(t, 1 - t)
    assert cost == pytest.approx(np.trapezoid(x1 ** 2, t), rel=1e-3)


def test_indefinite_fixture_has_index_and_diagnostic():
    s = scenario("indefinite")
    basis = assemble_differential(s)
    rep = as_index(build_gram(s, basis, DZ, 1.0))
    assert rep.index >= 1
    prof = index_divisions(s, basis)
    assert prof.monotone
    assert prof.inconsistent and "exceed corank 1" in prof.diagnostic
    assert np.all(prof.piece_indices == 0)


def test_martinet_profile_is_flat(martinet, martinet_basis):
    prof = index_divisions(martinet, martinet_basis)
    assert not np.any(prof.profile)
    assert prof.divisions.size == 0 and prof.diagnostic == ""


def test_heisenberg_has_no_abnormal_covector(heisenberg, heisenberg_basis):
    with pytest.raises(NoAbnormalCovector):
        index_divisions(heisenberg, heisenberg_basis)


def test_off_grid_time_rejected(martinet):
    with pytest.raises(ValueError, match="grid point"):
        node_of(martinet.times(), 0.3)
    assert node_of(martinet.times(), 0.5) == 32


def test_gram_cap(martinet):
    basis = assemble_differential(martinet.with_grid(MAX_IMPULSES // 2 + 1))
    with pytest.raises(ValueError, match="cap"):
        GramTable(basis, DZ)


def test_psi0_dimension_checked(martinet_basis):
    with pytest.raises(ValueError, match="components"):
        GramTable(martinet_basis, [0, 1])


def test_empty_kernel_has_index_zero():
    from srjet.system import scenario_from_dict
    s = scenario_from_dict({"system": {"fields": [["1"]], "coordinates": ["x"]},
                            "q0": [0], "t": [0, 1], "N": 1, "u": [1]})
    rep = as_index(build_gram(s, assemble_differential(s), [1.0], 1.0))
    assert rep.index == 0 and rep.kernel_dim == 0
