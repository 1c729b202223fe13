"""Residuals of the first- and second-order necessary conditions along a trajectory.

Every check returns :class:`ResidualRecord` entries with a nonnegative
residual and a tolerance; a record passes when ``residual <= tolerance``.
Form nonnegativity is recorded as ``max(0, -min eigenvalue)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .endpoint import EPS_RANK, ImpulseBasis, numerical_rank
from .flow import AdaptedFrame, Covector, Trajectory, transport_covector
from .minjet import QuadraticJetForm
from .vfexpr import DomainError, parse

__all__ = [
    "TOLERANCES",
    "ResidualRecord",
    "ResidualReport",
    "check_first_order",
    "check_goh",
    "check_goh_adapted",
    "check_second_order",
    "analytic_jet",
    "jet_derivatives",
]

# Tolerances per profile; second-order entries are (analytic input, fitted input).
TOLERANCES = {
    "default": {
        "u_from_phi": 1e-9,
        "ev_phi": 1e-8,
        "goh": 1e-10,
        "goh_adapted": 1e-8,
        "xi_u_1": (1e-6, 5e-2),
        "Phi_b_1": (1e-6, 5e-2),
        "2_form_positive": (1e-8, 1e-4),
        "ev_xi_1": (1e-6, 5e-2),
        "ev_Phi_2": (1e-6, 5e-2),
    },
    "strict": {
        "u_from_phi": 1e-10,
        "ev_phi": 1e-9,
        "goh": 1e-11,
        "goh_adapted": 1e-9,
        "xi_u_1": (1e-8, 1e-2),
        "Phi_b_1": (1e-8, 1e-2),
        "2_form_positive": (1e-10, 1e-5),
        "ev_xi_1": (1e-8, 1e-2),
        "ev_Phi_2": (1e-8, 1e-2),
    },
}


def _tol(profile: str, name: str, analytic: bool = True) -> float:
    entry = TOLERANCES[profile][name]
    if isinstance(entry, tuple):
        return entry[0] if analytic else entry[1]
    return entry


@dataclass(frozen=True)
class ResidualRecord:
    name: str
    residual: float
    tolerance: float
    subspace_dim: int = 0
    advisory: bool = False
    value: float | None = None  # raw quantity when it differs from the residual (eigenvalues)

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.tolerance)

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "residual": float(self.residual),
            "tolerance": float(self.tolerance),
            "pass": self.passed,
            "subspace_dim": int(self.subspace_dim),
        }
        if self.advisory:
            out["advisory"] = True
        if self.value is not None:
            out["value"] = float(self.value)
        return out


@dataclass
class ResidualReport:
    records: list[ResidualRecord] = field(default_factory=list)

    def extend(self, records) -> "ResidualReport":
        self.records.extend(records)
        return self

    def get(self, name: str) -> ResidualRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.records if not r.advisory)

    def to_dict(self) -> dict:
        return {"all_pass": self.all_pass, "records": [r.to_dict() for r in self.records]}

    def summary(self) -> str:
        lines = []
        for r in self.records:
            mark = "pass" if r.passed else ("advisory" if r.advisory else "FAIL")
            lines.append(f"{r.name:16s} {r.residual:.3e} (tol {r.tolerance:.1e}) {mark}")
        return "\n".join(lines)


def _node_controls(traj: Trajectory, j: int) -> np.ndarray:
    """Control rows active next to node j (left and right steps), shape (m, k)."""
    rows = []
    if j > 0:
        rows.append(traj.u[j - 1])
    if j < traj.N:
        rows.append(traj.u[j])
    return np.array(rows)


def _node_slot(traj: Trajectory, j: int) -> tuple[int, int]:
    return (j, 0) if j < traj.N else (j - 1, 2)


# --------------------------------------------------------------------------
# First order and Goh
# --------------------------------------------------------------------------

def check_first_order(s, traj: Trajectory, cov: Covector, profile: str = "default") -> list[ResidualRecord]:
    """Pairing ``<X_i, phi> + a1 u_i`` along the grid, and the transport defect of phi."""
    worst = 0.0
    for j in range(traj.N + 1):
        F = traj.fields_at_node(j)
        pairing = F @ cov.phi[j]
        for row in _node_controls(traj, j):
            worst = max(worst, float(np.abs(pairing + cov.a1 * row).max()))
    again = transport_covector(s, traj, cov.phi[-1], cov.a1)
    defect = float(np.abs(again.phi - cov.phi).max())
    return [
        ResidualRecord("u_from_phi", worst, _tol(profile, "u_from_phi")),
        ResidualRecord("ev_phi", defect, _tol(profile, "ev_phi")),
    ]


def check_goh(s, traj: Trajectory, phi: np.ndarray, profile: str = "default") -> ResidualRecord:
    """max over nodes and pairs i < j of |<[X_i, X_j](q(t)), phi(t)>|."""
    fields = s.system.fields
    worst = 0.0
    for a in range(fields.k):
        for b in range(a + 1, fields.k):
            for j in range(traj.N + 1):
                val = fields.eval_bracket(a, b, traj.q[j]) @ phi[j]
                worst = max(worst, abs(float(val)))
    return ResidualRecord("goh", worst, _tol(profile, "goh"))


def check_goh_adapted(s, frame: AdaptedFrame, psi0, profile: str = "default") -> ResidualRecord:
    """Antisymmetrized ``<Y2_i(Y1_j), psi0>`` against ``-<L1 [X_i, X_j], psi0>``."""
    psi0 = np.asarray(psi0, dtype=float)
    fields = s.system.fields
    k = fields.k
    worst = 0.0
    for j in range(frame.N + 1):
        Y1, Y2 = frame.Y1(j), frame.Y2(j)
        M = np.einsum("a,iab,jb->ij", psi0, Y2, Y1)
        for a in range(k):
            for b in range(a + 1, k):
                br = frame.lam1[j] @ fields.eval_bracket(a, b, frame.traj.q[j])
                worst = max(worst, abs(float(M[a, b] - M[b, a] + br @ psi0)))
    return ResidualRecord("goh_adapted", worst, _tol(profile, "goh_adapted"))


# --------------------------------------------------------------------------
# Second-order jets
# --------------------------------------------------------------------------

def analytic_jet(s, nodes=None) -> QuadraticJetForm:
    """Manifold-frame jet from the scenario's closed-form expressions in ``t``.

    Time derivatives are exact symbolic derivatives and travel in ``extras``.
    Times where an expression is undefined carry NaN.
    """
    if s.jet is None:
        raise ValueError("scenario has no closed-form jet")
    n = s.n
    P_ex = [[parse(c, ("t",)) for c in row] for row in s.jet["Phi2"]]
    x_ex = [parse(c, ("t",)) for c in s.jet["xi"]]
    a_ex = parse(s.jet["a2"], ("t",))
    nodes = np.arange(s.N + 1) if nodes is None else np.asarray(nodes, dtype=int)
    times = s.times()[nodes]
    m = nodes.size
    out = {key: np.full(shape, np.nan) for key, shape in (
        ("Phi2", (m, n, n)), ("xi", (m, n)), ("a2", (m,)),
        ("dPhi2", (m, n, n)), ("dxi", (m, n)), ("da2", (m,)))}
    for r, t in enumerate(times):
        try:
            out["Phi2"][r] = [[e.evaluate([t]) for e in row] for row in P_ex]
            out["dPhi2"][r] = [[e.diff(0).evaluate([t]) for e in row] for row in P_ex]
            out["xi"][r] = [e.evaluate([t]) for e in x_ex]
            out["dxi"][r] = [e.diff(0).evaluate([t]) for e in x_ex]
            out["a2"][r] = a_ex.evaluate([t])
            out["da2"][r] = a_ex.diff(0).evaluate([t])
        except (DomainError, ZeroDivisionError, OverflowError):
            for key in out:
                out[key][r] = np.nan
    Phi2 = 0.5 * (out["Phi2"] + out["Phi2"].swapaxes(1, 2))
    dPhi2 = 0.5 * (out["dPhi2"] + out["dPhi2"].swapaxes(1, 2))
    return QuadraticJetForm(times, nodes, Phi2, out["xi"], out["a2"], "manifold",
                            extras={"analytic": True, "dPhi2": dPhi2, "dxi": out["dxi"],
                                    "da2": out["da2"]})


def jet_derivatives(jet: QuadraticJetForm):
    """Time derivatives of (Phi2, xi, a2): exact when carried, else central differences."""
    if "dPhi2" in jet.extras:
        return jet.extras["dPhi2"], jet.extras["dxi"], jet.extras["da2"]
    if jet.times.size < 2:
        raise ValueError("need at least two times to differentiate a fitted jet")
    t = jet.times
    return (np.gradient(jet.Psi2, t, axis=0), np.gradient(jet.zeta, t, axis=0),
            np.gradient(jet.a2, t))


def _orthonormal_rows(rows: np.ndarray, eps_rank: float) -> np.ndarray:
    """Orthonormal basis (columns) of the span of ``rows``."""
    if rows.size == 0:
        return np.zeros((rows.shape[1], 0))
    r, _, _, Vt = numerical_rank(rows, eps_rank)
    return Vt[:r].T


def check_second_order(s, traj: Trajectory, phi: np.ndarray, jet: QuadraticJetForm,
                       basis: ImpulseBasis, profile: str = "default",
                       eps_rank: float = EPS_RANK) -> list[ResidualRecord]:
    """Residuals of the second-order conditions for a manifold-frame jet.

    The image of the end-point differential at node j is spanned by the first
    variations of the impulses supported before j.  Residuals at each time are
    divided by ``max(1, |Phi2| + |xi| + |a2|)`` there, since the jet itself may
    grow without bound near t0.  Form nonnegativity is a hard check for
    closed-form jets and advisory for fitted ones.
    """
    if jet.frame != "manifold":
        raise ValueError("second-order checks take a manifold-frame jet")
    if not np.any(np.isfinite(jet.a2)):
        raise ValueError("jet undefined: a2 is absent on every sampled time")
    analytic = bool(jet.extras.get("analytic", False))
    dPhi2, dxi, da2 = jet_derivatives(jet)
    k, n = s.k, s.n
    res_a = res_b = res_c = res_ev_xi = res_ev_phi = 0.0
    min_eig = np.inf
    dim_b = dim_c = 0
    flat_times = 0
    for r, j in enumerate(jet.nodes):
        j = int(j)
        vals = (jet.Psi2[r], jet.zeta[r], jet.a2[r], dPhi2[r], dxi[r], da2[r])
        if j == 0 or not all(np.all(np.isfinite(v)) for v in vals):
            continue
        Phi2, xi, a2, dP, dx, da = vals
        scale = max(1.0, float(np.abs(Phi2).max() + np.abs(xi).max() + abs(a2)))
        step, slot = _node_slot(traj, j)
        F = traj.F[step, slot]
        J = traj.J[step, slot]
        H = traj.H[step, slot]
        f = phi[j]
        im = _orthonormal_rows(basis.b1[j][: k * j], eps_rank)
        ext_rows = np.concatenate([basis.b1[j][: k * j], basis.images[j][n][: k * j, None]], axis=1)
        ext = _orthonormal_rows(ext_rows, eps_rank)
        dim_b, dim_c = max(dim_b, im.shape[1]), max(dim_c, ext.shape[1])
        for u in _node_controls(traj, j):
            res_a = max(res_a, float(np.abs(F @ xi + 2.0 * a2 * u).max()) / scale)
            # 2<DX_i b, phi> - 2 Phi2[X_i, b] - <b, xi> u_i on the image basis
            lin = (2.0 * np.einsum("a,iab->ib", f, J) - 2.0 * F @ Phi2 - np.outer(u, xi)) @ im
            res_b = max(res_b, float(np.abs(lin).max(initial=0.0)) / scale)
            A = np.einsum("i,iab->ab", u, J)
            Hf = np.einsum("i,a,iabc->bc", u, f, H)
            Fbb = Hf - dP - (Phi2 @ A + A.T @ Phi2)
            Fbc = -0.5 * (dx + A.T @ xi)
            form = np.zeros((n + 1, n + 1))
            form[:n, :n] = 0.5 * (Fbb + Fbb.T)
            form[:n, n] = form[n, :n] = Fbc
            form[n, n] = -da
            if ext.shape[1]:
                min_eig = min(min_eig, float(np.linalg.eigvalsh(ext.T @ form @ ext)[0]) / scale)
            if abs(da) <= 1e-8 * max(1.0, abs(a2)):
                flat_times += 1
                res_ev_xi = max(res_ev_xi, float(np.abs(im.T @ (dx + A.T @ xi)).max(initial=0.0)) / scale)
                sub = im.T @ form[:n, :n] @ im
                res_ev_phi = max(res_ev_phi, float(np.abs(sub).max(initial=0.0)) / scale)
    if min_eig == np.inf:
        min_eig = 0.0
    return [
        ResidualRecord("xi_u_1", res_a, _tol(profile, "xi_u_1", analytic)),
        ResidualRecord("Phi_b_1", res_b, _tol(profile, "Phi_b_1", analytic), dim_b),
        ResidualRecord("2_form_positive", max(0.0, -min_eig),
                       _tol(profile, "2_form_positive", analytic), dim_c,
                       advisory=not analytic, value=min_eig),
        ResidualRecord("ev_xi_1", res_ev_xi, _tol(profile, "ev_xi_1", analytic), dim_b,
                       value=float(flat_times)),
        ResidualRecord("ev_Phi_2", res_ev_phi, _tol(profile, "ev_Phi_2", analytic), dim_b,
                       value=float(flat_times)),
    ]
