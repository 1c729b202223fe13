import numpy as np
import pytest
from conftest import adapted_route, scenario
from hypothesis import given, settings
from hypothesis import strategies as st

from srjet.flow import (
    IntegrationError,
    build_adapted_frame,
    finite_difference_oracle,
    integrate_trajectory,
    integrate_variations,
    pair_two_jet,
    to_adapted,
    transport_covector,
    write_csv,
)
from srjet.system import ControlGrid, scenario_from_dict


def test_martinet_reference_line(martinet):
    traj = integrate_trajectory(martinet)
    t = martinet.times()
    assert np.allclose(traj.q, np.stack([0 * t, t, 0 * t], axis=1), atol=1e-15)
    assert np.allclose(traj.energy, t / 2)


def test_heisenberg_lifts_a_circle():
    # u = (cos t, sin t) traces a unit-speed circle; z picks up the enclosed area.
    N = 256
    mids = (np.arange(N) + 0.5) * 2 * np.pi / N
    s = scenario_from_dict({"system": "heisenberg", "q0": [0, 0, 0], "t": [0, 2 * np.pi],
                            "N": N, "u": np.stack([np.cos(mids), np.sin(mids)], 1).tolist()})
    q = integrate_trajectory(s).q[-1]
    assert np.allclose(q[:2], 0, atol=1e-3)
    assert q[2] == pytest.approx(np.pi, rel=1e-3)


def test_heisenberg_flow_is_exact_for_step_controls():
    errors = []
    for N in (32, 64):
        mids = (np.arange(N) + 0.5) * 2 * np.pi / N
        s = scenario_from_dict({"system": "heisenberg", "q0": [0, 0, 0], "t": [0, 2 * np.pi],
                                "N": N, "u": np.stack([np.cos(mids), np.sin(mids)], 1).tolist()})
        # With a constant control on a step, z' is constant there, so the polygon
        # flow below is exact and RK4 must reproduce it to roundoff.
        q = np.zeros(3)
        h = 2 * np.pi / N
        for c, sn in zip(np.cos(mids), np.sin(mids)):
            q = q + h * np.array([c, sn, 0.5 * (q[0] * sn - q[1] * c)])
        errors.append(np.abs(integrate_trajectory(s).q[-1] - q).max())
    assert errors[0] < 1e-12 and errors[1] < 1e-12


def test_rk4_order_on_nonlinear_field():
    # x' = x^2 from x(0) = 1 has x(t) = 1 / (1 - t).
    errors = []
    for N in (20, 40):
        s = scenario_from_dict({"system": {"fields": [["x^2"]], "coordinates": ["x"]},
                                "q0": [1], "t": [0, 0.5], "N": N, "u": [1]})
        errors.append(abs(integrate_trajectory(s).q[-1, 0] - 2.0))
    assert errors[0] / errors[1] >= 8


def test_blow_up_is_reported_with_step():
    s = scenario_from_dict({"system": {"fields": [["x^2"]], "coordinates": ["x"]},
                            "q0": [1], "t": [0, 2], "N": 20, "u": [1]})
    with pytest.raises(IntegrationError) as info:
        integrate_trajectory(s)
    assert info.value.step is not None


def test_singular_field_reported():
    # x runs 1 -> 0 exactly along the first field; the second is undefined there.
    s = scenario_from_dict({"system": {"fields": [["1", "0"], ["0", "1/x"]], "coordinates": ["x", "y"]},
                            "q0": [1, 0], "t": [0, 1], "N": 4, "u": [-1, 0]})
    with pytest.raises(IntegrationError):
        integrate_trajectory(s)


@settings(max_examples=8, deadline=None)
@given(st.sampled_from(["martinet", "heisenberg"]), st.integers(0, 2 ** 31))
def test_variations_match_finite_differences(name, seed):
    s = scenario(name, 32)
    traj = integrate_trajectory(s)
    du = ControlGrid(np.random.default_rng(seed).normal(size=(32, 2)), s.t0, s.t1)
    bundle = integrate_variations(s, traj, du)
    oracle = finite_difference_oracle(s, du)
    scale1 = max(1.0, np.abs(oracle.b1).max())
    scale2 = max(1.0, np.abs(oracle.b2).max())
    assert np.abs(bundle.b1[-1] - oracle.b1).max() <= 1e-5 * scale1
    assert np.abs(bundle.b2[-1] - oracle.b2).max() <= 1e-4 * scale2
    assert bundle.c1[-1] == pytest.approx(oracle.c1, rel=1e-5, abs=1e-8)
    assert bundle.c2[-1] == pytest.approx(oracle.c2, rel=1e-4, abs=1e-8)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-3, 3))
def test_variations_are_homogeneous(seed, scale):
    s = scenario("martinet", 16)
    traj = integrate_trajectory(s)
    d = np.random.default_rng(seed).normal(size=(16, 2))
    one = integrate_variations(s, traj, ControlGrid(d, s.t0, s.t1))
    many = integrate_variations(s, traj, ControlGrid(scale * d, s.t0, s.t1))
    assert np.allclose(many.b1, scale * one.b1, atol=1e-12)
    assert np.allclose(many.b2, scale ** 2 * one.b2, atol=1e-11)


def test_grid_mismatch_rejected(martinet):
    traj = integrate_trajectory(martinet)
    with pytest.raises(ValueError, match="grid"):
        integrate_variations(martinet, traj, ControlGrid(np.zeros((8, 2)), 0.0, 1.0))


@pytest.mark.parametrize("name", ["martinet", "heisenberg", "indefinite"])
def test_adapted_frame_agrees_with_direct_adapted_integration(name):
    s = scenario(name, 48)
    traj = integrate_trajectory(s)
    frame = build_adapted_frame(s, traj)
    du = np.random.default_rng(3).normal(size=(48, 2))
    q1, q2 = to_adapted(frame, integrate_variations(s, traj, ControlGrid(du, s.t0, s.t1)))
    r1, r2 = adapted_route(frame, du)
    assert np.abs(q1 - r1).max() <= 1e-10 * max(1.0, np.abs(q1).max())
    assert np.abs(q2 - r2).max() <= 1e-10 * max(1.0, np.abs(q2).max())
    assert np.abs(frame.det()).min() >= 1e-6


def test_frame_starts_at_identity(martinet):
    frame = build_adapted_frame(martinet, integrate_trajectory(martinet))
    assert np.array_equal(frame.lam1[0], np.eye(3))
    assert not np.any(frame.lam2[0])
    assert np.array_equal(frame.lam2, frame.lam2.swapaxes(2, 3))


def test_covector_transport_pairs_constantly_with_first_variation(heisenberg):
    traj = integrate_trajectory(heisenberg)
    cov = transport_covector(heisenberg, traj, [0.3, -1.0, 2.0])
    du = ControlGrid(np.random.default_rng(0).normal(size=(64, 2)), 0.0, 1.0)
    b1 = integrate_variations(heisenberg, traj, du).b1
    # d/dt <phi, b1> = <phi, sum du X>, so the pairing equals its quadrature.
    pair = np.einsum("ja,ja->j", cov.phi, b1)
    forced = np.array([du.values[j] @ traj.F[j, 1] @ cov.phi[j] for j in range(64)])
    assert abs(pair[-1] - pair[0] - forced.sum() * du.h) < 5e-3


def test_dx_is_transported_unchanged_along_heisenberg_line(heisenberg):
    cov = transport_covector(heisenberg, integrate_trajectory(heisenberg), [1, 0, 0], -1.0)
    assert np.allclose(cov.phi, [1, 0, 0], atol=1e-15)


def test_pair_two_jet_checks_shapes():
    assert pair_two_jet([1, 0], np.eye(2), [1, 2], [3, 4]) == 3 + 5
    with pytest.raises(ValueError):
        pair_two_jet([1, 0, 0], np.eye(2), [1, 2], [3, 4])


def test_csv_is_round_trip_exact(tmp_path):
    x = np.array([0.1, 1 / 3, np.nan])
    path = tmp_path / "a.csv"
    write_csv(path, ["t", "x"], [np.arange(3.0), x])
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x"
    assert float(lines[2].split(",")[1]) == 1 / 3
