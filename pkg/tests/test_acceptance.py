"""Numeric acceptance criteria at their stated tolerances.

Each test records one status line, printed in the terminal summary.
"""
import numpy as np
import pytest
from conftest import CRITERIA, adapted_route, scenario

from srjet.endpoint import assemble_differential, classify_first_order
from srjet.flow import (
    build_adapted_frame,
    finite_difference_oracle,
    integrate_trajectory,
    integrate_variations,
    to_adapted,
    transport_covector,
)
from srjet.minjet import (
    bellman_monotonicity,
    classify_second_order,
    fit_value_function_grid,
    gram_at_node,
    nested_refinement,
    solve_char_ocp,
    to_manifold_frame,
)
from srjet.secondvar import as_index, build_gram
from srjet.system import ControlGrid
from srjet.verify import (
    analytic_jet,
    check_first_order,
    check_goh,
    check_goh_adapted,
    check_second_order,
)

DZ = np.array([0.0, 0.0, 1.0])


def record(num: int, ok: bool, text: str) -> None:
    CRITERIA[num] = ("PASS" if ok else "FAIL", text)
    assert ok, text


def rel(a, b) -> float:
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture(scope="module")
def martinet128():
    s = scenario("martinet", 128)
    basis = assemble_differential(s)
    return s, basis, fit_value_function_grid(s, basis, DZ)


def test_criterion_01_variational_oracle():
    worst1 = worst2 = 0.0
    rng = np.random.default_rng(20240101)
    for name in ("martinet", "heisenberg"):
        s = scenario(name, 64)
        traj = integrate_trajectory(s)
        for _ in range(20):
            du = ControlGrid(rng.normal(size=(64, 2)), s.t0, s.t1)
            ode = integrate_variations(s, traj, du)
            fd = finite_difference_oracle(s, du)
            worst1 = max(worst1, rel(ode.b1[-1], fd.b1), rel(ode.c1[-1], fd.c1))
            worst2 = max(worst2, rel(ode.b2[-1], fd.b2), rel(ode.c2[-1], fd.c2))
    record(1, worst1 <= 1e-5 and worst2 <= 1e-4,
           f"first-order rel {worst1:.2e} (<= 1e-5), second-order rel {worst2:.2e} (<= 1e-4)")


def test_criterion_02_martinet_classification(martinet_basis):
    rows = []
    ok = True
    for eps in (1e-10, 1e-9, 1e-8, 1e-7):
        rep = classify_first_order(martinet_basis, eps)
        cos = float(abs(rep.psi0 @ DZ)) if rep.psi0 is not None else 0.0
        ok &= rep.classification == "StrictlyAbnormal" and rep.corank == 1 and cos >= 1 - 1e-8
        rows.append(f"{eps:.0e}:{rep.classification}/{rep.corank}")
    record(2, ok, f"StrictlyAbnormal, corank 1, cos(psi0, dz) >= 1-1e-8 for eps_rank in {rows}")


def test_criterion_03_martinet_minimal_jet(martinet128):
    s, basis, fitted = martinet128
    man = to_manifold_frame(fitted, basis.frame)
    a2, xi, Phi2 = fitted.a2[-1], man.zeta[-1], man.Psi2[-1]
    off = np.abs(Phi2 - np.diag([0, Phi2[1, 1], 0])).max()
    ok = (1 <= a2 <= 1.05 and -2.1 <= xi[1] <= -1.9 and max(abs(xi[0]), abs(xi[2])) <= 0.05
          and 0.95 <= Phi2[1, 1] <= 1.05 and off <= 0.05)
    ref = nested_refinement(s, DZ, 1.0, [32, 64, 128])
    seq = [r["a2"] for r in ref]
    ok_ref = all(x >= y for x, y in zip(seq, seq[1:])) and min(seq) >= 1 - 1e-9
    record(3, ok and ok_ref,
           f"a2(1) = {a2:.5f}, xi = ({xi[0]:.4f}, {xi[1]:.4f}, {xi[2]:.4f}), "
           f"Phi2_yy = {Phi2[1, 1]:.5f}, other |Phi2| <= {off:.4f}; "
           f"refinement a2 = {', '.join(f'{x:.5f}' for x in seq)}")


def test_criterion_04_zero_target(martinet_basis):
    nodes = (8, 16, 32, 48, 64)
    vals = [solve_char_ocp(gram_at_node(martinet_basis, DZ, j), np.zeros(4)).value for j in nodes]
    worst = max(abs(v) for v in vals)
    record(4, worst <= 1e-9, f"max |Q_min(t, 0)| over t in {{1/8, 1/4, 1/2, 3/4, 1}} = {worst:.2e}")


def test_criterion_05_bellman(martinet_basis):
    s = martinet_basis.scenario
    fitted = fit_value_function_grid(s, martinet_basis, DZ)
    rng = np.random.default_rng(7)
    margins = [bellman_monotonicity(s, martinet_basis, DZ, rng.normal(size=128), fitted).margin
               for _ in range(50)]
    worst = min(margins)
    record(5, worst >= -1e-7, f"min per-step decrement of cost - Q_min over 50 controls = {worst:.2e}")


def test_criterion_06_index(martinet, martinet_basis):
    rep = as_index(build_gram(martinet, martinet_basis, DZ, 1.0))
    ok0 = rep.index == 0 and rep.min_eigenvalue >= -1e-10 * rep.spectral_radius
    s = scenario("indefinite")
    bad = as_index(build_gram(s, assemble_differential(s), DZ, 1.0))
    record(6, ok0 and bad.index >= 1,
           f"Martinet index {rep.index} (min eig {rep.min_eigenvalue:.1e}, radius "
           f"{rep.spectral_radius:.1e}); indefinite fixture index {bad.index}")


def test_criterion_07_goh(martinet, martinet_basis):
    phi = martinet_basis.frame.covector(DZ)
    goh = check_goh(martinet, martinet_basis.traj, phi)
    adapted = check_goh_adapted(martinet, martinet_basis.frame, DZ)
    record(7, goh.residual <= 1e-10 and adapted.residual <= 1e-8,
           f"Goh residual {goh.residual:.1e} (<= 1e-10), adapted identity {adapted.residual:.1e} (<= 1e-8)")


def test_criterion_08_first_order_residuals(martinet, martinet_basis, heisenberg, heisenberg_basis):
    cm = transport_covector(martinet, martinet_basis.traj, DZ, 0.0)
    rm = max(r.residual for r in check_first_order(martinet, martinet_basis.traj, cm))
    ch = transport_covector(heisenberg, heisenberg_basis.traj, [1, 0, 0], -1.0)
    rh = max(r.residual for r in check_first_order(heisenberg, heisenberg_basis.traj, ch))
    rep = classify_first_order(heisenberg_basis)
    ok = rm <= 1e-9 and rh <= 1e-9
    # The third clause is held back as a known failure (see the xfail below).
    CRITERIA[8] = ("XFAIL" if ok else "FAIL",
                   f"Martinet certificate {rm:.1e}, Heisenberg normal certificate {rh:.1e} (<= 1e-9); "
                   f"Heisenberg u=(1,0) is {rep.classification} with rank {rep.rank}, not NotExtremal rank 4")
    assert ok


@pytest.mark.xfail(strict=True, reason=(
    "the straight line u=(1,0) in the Heisenberg group is a normal geodesic with covector dx, "
    "so the extended differential has rank 3; rank 4 would contradict the normal certificate "
    "checked in the same criterion"))
def test_criterion_08_heisenberg_not_extremal(heisenberg_basis):
    rep = classify_first_order(heisenberg_basis)
    assert rep.classification == "NotExtremal" and rep.rank == 4


def test_criterion_09_adapted_frame():
    worst = 0.0
    det_min = np.inf
    rng = np.random.default_rng(9)
    for name in ("martinet", "heisenberg"):
        s = scenario(name, 64)
        traj = integrate_trajectory(s)
        frame = build_adapted_frame(s, traj)
        det_min = min(det_min, float(np.abs(frame.det()).min()))
        for _ in range(5):
            du = rng.normal(size=(64, 2))
            q1, _ = to_adapted(frame, integrate_variations(s, traj, ControlGrid(du, s.t0, s.t1)))
            r1, _ = adapted_route(frame, du)
            worst = max(worst, float(np.abs(q1 - r1).max()))
    record(9, worst <= 1e-6 and det_min >= 1e-6,
           f"max |L1 b1 - q1| = {worst:.1e} (<= 1e-6), min |det L1| = {det_min:.3f} (>= 1e-6)")


def test_criterion_10_analytic_jet(martinet, martinet_basis):
    recs = {r.name: r for r in check_second_order(
        martinet, martinet_basis.traj, martinet_basis.frame.covector(DZ),
        analytic_jet(martinet), martinet_basis)}
    a, b, form = recs["xi_u_1"], recs["Phi_b_1"], recs["2_form_positive"]
    record(10, a.residual <= 1e-6 and b.residual <= 1e-6 and form.value >= -1e-8,
           f"xi_u_1 {a.residual:.1e}, Phi_b_1 {b.residual:.1e} (<= 1e-6); "
           f"form min eigenvalue {form.value:.1e} (>= -1e-8)")


def test_criterion_11_two_normal(martinet128):
    _, _, fitted = martinet128
    rep = classify_second_order(fitted)
    record(11, rep.classification == "TwoNormal",
           f"{rep.classification}: min a2 over t > 0 is {np.nanmin(rep.a2):.4f}")
