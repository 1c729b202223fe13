import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srjet.system import (
    ConfigError,
    ControlGrid,
    UnknownSystemError,
    builtin,
    load_scenario,
    scenario_from_dict,
)

BASE = {"system": "martinet", "q0": [0, 0, 0], "t": [0, 1], "N": 8, "u": [0, 1]}


def doc(**changes):
    d = dict(BASE)
    d.update(changes)
    return d


def test_builtin_catalog():
    m = builtin("martinet")
    assert (m.n, m.k) == (3, 2)
    with pytest.raises(UnknownSystemError) as info:
        builtin("engel")
    assert "heisenberg" in str(info.value)


def test_constant_control_is_tiled():
    s = scenario_from_dict(BASE)
    assert s.u.values.shape == (8, 2)
    assert np.all(s.u.values == [0, 1])
    assert s.h == pytest.approx(1 / 8)


@pytest.mark.parametrize(
    "changes, message",
    [
        ({"N": 0}, "N must be"),
        ({"t": [1, 0]}, "t0 < t1"),
        ({"q0": [0, 0]}, "dimension mismatch"),
        ({"u": [[0, 1]] * 3}, "expected N=8"),
        ({"u": {"profile": "chirp"}}, "available"),
        ({"q0": [0, float("nan"), 0]}, "finite"),
    ],
)
def test_invalid_documents(changes, message):
    with pytest.raises(ConfigError, match=message):
        scenario_from_dict(doc(**changes))


def test_missing_field_named():
    d = dict(BASE)
    del d["q0"]
    with pytest.raises(ConfigError, match="q0"):
        scenario_from_dict(d)


def test_dependent_fields_rejected():
    custom = {"fields": [["1", "0"], ["2", "0"]], "coordinates": ["x", "y"]}
    with pytest.raises(ConfigError, match="independent"):
        scenario_from_dict(doc(system=custom, q0=[0, 0]))


def test_bad_jet_expression():
    jet = {"Phi2": [["0"] * 3] * 3, "xi": ["0", "-2/t", "0"], "a2": "1/s"}
    with pytest.raises(ConfigError, match="jet"):
        scenario_from_dict(doc(jet=jet))


def test_unreadable_yaml():
    with pytest.raises(ConfigError):
        load_scenario("system: [unclosed")


def test_piecewise_profile():
    s = scenario_from_dict(doc(u={"profile": "piecewise", "breaks": [0.5],
                                  "values": [[1, 0], [0, 1]]}))
    assert np.all(s.u.values[:4] == [1, 0])
    assert np.all(s.u.values[4:] == [0, 1])


def test_with_grid_resamples_constant_control():
    s = scenario_from_dict(BASE).with_grid(32)
    assert s.N == 32 and s.u.values.shape == (32, 2)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 12),
    st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3),
    st.floats(0.1, 5),
    st.integers(0, 2 ** 31),
)
def test_serialization_round_trip(N, q0, span, seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(N, 2)).tolist()
    s = scenario_from_dict({"system": "heisenberg", "q0": q0, "t": [0.0, span], "N": N, "u": u,
                            "psi0": [0, 0, 1], "note": "kept"})
    again = load_scenario(s.serialize())
    assert again == s
    assert again.extras == {"note": "kept"}
    assert np.array_equal(again.u.values, s.u.values)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 3), st.integers(0, 2 ** 31))
def test_control_grid_flat_round_trip(N, k, seed):
    values = np.random.default_rng(seed).normal(size=(N, k))
    g = ControlGrid(values, 0.0, 2.0)
    back = ControlGrid.from_flat(g.flat(), N, k, 0.0, 2.0)
    assert back == g
    assert g.flat()[-k:].tolist() == values[-1].tolist()  # step-major
