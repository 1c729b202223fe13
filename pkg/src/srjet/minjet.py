"""Characteristic optimal control problem and the minimal 2-jet value function.

The discretized problem minimizes ``du^T G du`` over impulse controls with a
prescribed endpoint ``M du = v`` of the characteristic system.  It is solved by
the null-space method: a minimum-norm particular solution plus the best kernel
correction.  Value functions are tabulated per node as a symmetric matrix ``P``
on R^{n+1} (zero off the reachable space) and split into
``Q(q1, c1) = Psi2[q1, q1] + <q1, zeta> c1 + a2 c1^2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .endpoint import EPS_RANK, ImpulseBasis, assemble_differential, numerical_rank
from .flow import AdaptedFrame
from .system import ControlGrid
from .secondvar import EPS_IDX, GramForm, _kernel, direct_cost, gram_table, node_of

__all__ = [
    "UnreachableTarget",
    "UnboundedValueFunction",
    "NotPositiveSemidefinite",
    "OCPSolution",
    "CharOCP",
    "QuadraticJetForm",
    "SecondOrderReport",
    "BellmanReport",
    "SolutionSpaceReport",
    "PMPResidual",
    "solve_char_ocp",
    "gram_at_node",
    "fit_value_function",
    "fit_value_function_grid",
    "to_manifold_frame",
    "bellman_monotonicity",
    "classify_second_order",
    "solution_space_analysis",
    "pmp_residuals",
    "nested_refinement",
]

REACH_TOL = 1e-8


class UnreachableTarget(ValueError):
    pass


class UnboundedValueFunction(ArithmeticError):
    """The characteristic problem has value -inf for some target."""


class NotPositiveSemidefinite(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OCPSolution:
    tau: float
    node: int
    target: np.ndarray
    control: np.ndarray | None  # step-major, length k*node
    value: float  # -inf when unbounded
    bounded: bool
    multipliers: np.ndarray | None  # (n+1,) KKT multipliers of the endpoint constraint
    constraint_residual: float

    @property
    def costate(self) -> np.ndarray | None:
        """Terminal PMP covector psi(tau) (first n multipliers)."""
        return None if self.multipliers is None else self.multipliers[:-1]

    @property
    def energy_multiplier(self) -> float | None:
        return None if self.multipliers is None else float(self.multipliers[-1])


class CharOCP:
    """Solver for one Gram form, reusable across targets."""

    def __init__(self, gram: GramForm, eps_idx: float = EPS_IDX):
        self.gram = gram
        self.eps_idx = eps_idx
        M = gram.constraint
        self.M = M
        self.pinv = np.linalg.pinv(M, rcond=EPS_RANK) if M.size else np.zeros((M.shape[1], M.shape[0]))
        R = gram.restricted
        if R.size:
            ev, W = np.linalg.eigh(R)
        else:
            ev, W = np.zeros(0), np.zeros((0, 0))
        self.ev, self.W = ev, W
        self.gnorm = float(np.abs(gram.G).max(initial=0.0))
        # Roundoff in the restriction scales with G itself, so a numerically
        # zero restriction must not set its own threshold.
        cut = eps_idx * max(float(np.abs(ev).max(initial=0.0)), self.gnorm)
        self.negative = bool(ev.size and ev[0] < -cut)
        self.null_mask = np.abs(ev) <= cut

    @property
    def psd(self) -> bool:
        return not self.negative

    def solve(self, v) -> OCPSolution:
        g = self.gram
        v = np.asarray(v, dtype=float)
        dup = self.pinv @ v
        resid = float(np.linalg.norm(self.M @ dup - v)) if self.M.size else float(np.linalg.norm(v))
        if resid > REACH_TOL * max(1.0, float(np.linalg.norm(v))):
            raise UnreachableTarget(f"target is {resid:.3g} away from the reachable space at t={g.tau}")
        unbounded = OCPSolution(g.tau, g.node, v, None, -np.inf, False, None, resid)
        if self.negative:
            return unbounded
        Z = g.kernel
        if Z.shape[1]:
            grad = self.W.T @ (Z.T @ (g.G @ dup))
            coupling = np.abs(grad[self.null_mask]).max(initial=0.0)
            scale = self.gnorm * float(np.linalg.norm(dup)) + 1e-300
            if coupling > 1e-8 * scale:
                return unbounded
            coef = np.zeros_like(grad)
            live = ~self.null_mask
            coef[live] = -grad[live] / self.ev[live]
            du = dup + Z @ (self.W @ coef)
        else:
            du = dup
        value = float(du @ g.G @ du)
        mu = np.linalg.lstsq(self.M.T, g.G @ du, rcond=None)[0] if self.M.size else np.zeros(v.size)
        resid = float(np.linalg.norm(self.M @ du - v)) if self.M.size else 0.0
        return OCPSolution(g.tau, g.node, v, du, value, True, mu, resid)


def solve_char_ocp(gram: GramForm, v, eps_idx: float = EPS_IDX) -> OCPSolution:
    """Minimize the characteristic cost among controls reaching ``v`` at the Gram's time."""
    return CharOCP(gram, eps_idx).solve(v)


def gram_at_node(basis: ImpulseBasis, psi0, j: int, eps_rank: float = EPS_RANK) -> GramForm:
    table = gram_table(basis, psi0)
    M = basis.matrix(j)
    return GramForm(float(basis.scenario.times()[j]), j, table.psi0, table.at(j).copy(), M,
                    _kernel(M, eps_rank))


# --------------------------------------------------------------------------
# Value-function fit
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuadraticJetForm:
    times: np.ndarray  # (m,)
    nodes: np.ndarray  # (m,)
    Psi2: np.ndarray  # (m, n, n); Phi2 in the manifold frame
    zeta: np.ndarray  # (m, n); xi in the manifold frame
    a2: np.ndarray  # (m,), NaN where the pure cost direction is not reachable
    frame: str  # "adapted" | "manifold"
    psi0: np.ndarray | None = None
    bounded: np.ndarray | None = None  # (m,) attainment flags
    P: np.ndarray | None = None  # (m, n+1, n+1) full form, adapted frame only
    extras: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.Psi2.shape[1]

    def value(self, row: int, q1, c1: float) -> float:
        q1 = np.asarray(q1, dtype=float)
        a2 = 0.0 if np.isnan(self.a2[row]) else self.a2[row]
        return float(q1 @ self.Psi2[row] @ q1 + (q1 @ self.zeta[row]) * c1 + a2 * c1 * c1)

    def row_at(self, t: float) -> int:
        return node_of(self.times, t) if self.times.size > 1 else 0

    def select(self, rows) -> "QuadraticJetForm":
        rows = np.asarray(rows, dtype=int)
        pick = lambda a: None if a is None else a[rows]  # noqa: E731
        return QuadraticJetForm(self.times[rows], self.nodes[rows], self.Psi2[rows],
                                self.zeta[rows], self.a2[rows], self.frame, self.psi0,
                                pick(self.bounded), pick(self.P), dict(self.extras))

    def table(self, coords) -> tuple[list[str], list[np.ndarray]]:
        """CSV header and columns: t, a2, zeta/xi components, upper triangle of Psi2/Phi2, flag."""
        lin = "zeta" if self.frame == "adapted" else "xi"
        quad = "Psi2" if self.frame == "adapted" else "Phi2"
        n = self.n
        header = ["t", "a2"] + [f"{lin}_{c}" for c in coords]
        cols = [self.times, self.a2, *self.zeta.T]
        for a in range(n):
            for b in range(a, n):
                header.append(f"{quad}_{coords[a]}{coords[b]}")
                cols.append(self.Psi2[:, a, b])
        flags = self.bounded if self.bounded is not None else np.ones(self.times.size, dtype=bool)
        header.append("bounded")
        cols.append(flags.astype(float))
        return header, cols


def _fit_node(ocp: CharOCP, eps_rank: float) -> tuple[np.ndarray, bool]:
    """Polarized value-function matrix on R^{n+1} at one node."""
    M = ocp.M
    dim = M.shape[0]
    r, U, _, _ = numerical_rank(M, eps_rank)
    V = U[:, :r]
    if r == 0:
        return np.zeros((dim, dim)), True
    single = []
    for a in range(r):
        sol = ocp.solve(V[:, a])
        if not sol.bounded:
            return np.full((dim, dim), np.nan), False
        single.append(sol.value)
    Qm = np.diag(single)
    for a in range(r):
        for b in range(a + 1, r):
            sol = ocp.solve(V[:, a] + V[:, b])
            if not sol.bounded:
                return np.full((dim, dim), np.nan), False
            Qm[a, b] = Qm[b, a] = 0.5 * (sol.value - single[a] - single[b])
    P = V @ Qm @ V.T
    return 0.5 * (P + P.T), True


def _split(P: np.ndarray, cost_reachable: bool, n: int):
    Psi2 = P[:n, :n].copy()
    zeta = 2.0 * P[:n, n]
    a2 = float(P[n, n]) if cost_reachable else np.nan
    return Psi2, zeta, a2


def _cost_reachable(M: np.ndarray, eps_rank: float) -> bool:
    r, U, _, _ = numerical_rank(M, eps_rank)
    e = np.zeros(M.shape[0])
    e[-1] = 1.0
    V = U[:, :r]
    return bool(r and np.linalg.norm(e - V @ (V.T @ e)) <= REACH_TOL)


def fit_value_function(s, basis: ImpulseBasis, psi0, tau: float,
                       eps_rank: float = EPS_RANK, eps_idx: float = EPS_IDX) -> QuadraticJetForm:
    """Adapted-frame coefficients (Psi2, zeta, a2) at one grid time."""
    j = node_of(s.times(), tau)
    ocp = CharOCP(gram_at_node(basis, psi0, j, eps_rank), eps_idx)
    P, ok = _fit_node(ocp, eps_rank)
    if not ok:
        raise UnboundedValueFunction(
            f"characteristic problem unbounded below at t={s.times()[j]!r}; "
            "the minimal 2-jet is -inf there")
    Psi2, zeta, a2 = _split(P, _cost_reachable(ocp.M, eps_rank), s.n)
    return QuadraticJetForm(np.array([s.times()[j]]), np.array([j]), Psi2[None], zeta[None],
                            np.array([a2]), "adapted", np.asarray(psi0, dtype=float),
                            np.array([True]), P[None])


def fit_value_function_grid(s, basis: ImpulseBasis, psi0, nodes=None,
                            eps_rank: float = EPS_RANK, eps_idx: float = EPS_IDX) -> QuadraticJetForm:
    """Per-node fits; unbounded nodes are flagged and carry NaN coefficients."""
    n, N = s.n, s.N
    nodes = np.arange(N + 1) if nodes is None else np.asarray(nodes, dtype=int)
    m = nodes.size
    Psi2 = np.zeros((m, n, n))
    zeta = np.zeros((m, n))
    a2 = np.full(m, np.nan)
    P = np.zeros((m, n + 1, n + 1))
    bounded = np.ones(m, dtype=bool)
    for r, j in enumerate(nodes):
        if j == 0:
            continue  # R(t0, t0) = {0}
        ocp = CharOCP(gram_at_node(basis, psi0, int(j), eps_rank), eps_idx)
        P[r], bounded[r] = _fit_node(ocp, eps_rank)
        Psi2[r], zeta[r], a2[r] = _split(P[r], _cost_reachable(ocp.M, eps_rank), n)
        if not bounded[r]:
            a2[r] = np.nan
    return QuadraticJetForm(s.times()[nodes], nodes, Psi2, zeta, a2, "adapted",
                            np.asarray(psi0, dtype=float), bounded, P)


def to_manifold_frame(jet: QuadraticJetForm, frame: AdaptedFrame) -> QuadraticJetForm:
    """Pull (Psi2, zeta) back through the adapted frame; a2 is frame independent.

    ``Phi2 = L1^T Psi2 L1 - <L2, psi0>`` and ``xi = L1^T zeta``, which makes
    ``<q2, psi0> - Psi2[q1, q1]`` equal ``<b2, phi> - Phi2[b1, b1]`` for every jet.
    """
    if jet.frame != "adapted":
        raise ValueError("jet is already in the manifold frame")
    if jet.psi0 is None:
        raise ValueError("jet carries no covector psi0")
    L1 = frame.lam1[jet.nodes]
    if np.any(np.abs(np.linalg.det(L1)) < 1e-12):
        raise ValueError("adapted frame is singular at a requested time")
    lam = frame.lam2_pairing(jet.psi0)[jet.nodes]
    Phi2 = np.einsum("rab,rac,rcd->rbd", L1, jet.Psi2, L1) - lam
    xi = np.einsum("rab,ra->rb", L1, jet.zeta)
    return QuadraticJetForm(jet.times, jet.nodes, 0.5 * (Phi2 + Phi2.swapaxes(1, 2)), xi,
                            jet.a2.copy(), "manifold", jet.psi0, jet.bounded, None,
                            dict(jet.extras))


# --------------------------------------------------------------------------
# Bellman monotonicity and classification
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BellmanReport:
    times: np.ndarray
    f: np.ndarray  # cost - Q_min along the control
    margin: float  # min_j f(t_{j+1}) - f(t_j)
    violations: np.ndarray  # times t_{j+1} where the decrement is below -eps

    @property
    def ok(self) -> bool:
        return self.violations.size == 0


def bellman_monotonicity(s, basis: ImpulseBasis, psi0, du, jet: QuadraticJetForm,
                         eps_mono: float = 1e-7) -> BellmanReport:
    """Sample cost(t, du) - Q_min(t, q~1(t, du)) on the grid.

    ``jet`` must be an adapted grid fit over all nodes (it carries the full
    polarized matrices).
    """
    if jet.P is None or jet.nodes.size != s.N + 1:
        raise ValueError("Bellman check needs an adapted value-function fit on every node")
    flat = du.flat() if isinstance(du, ControlGrid) else np.asarray(du, dtype=float).ravel()
    cost = direct_cost(basis, psi0, flat)
    v = np.einsum("jap,p->ja", basis.images, flat)
    q = np.einsum("ja,jab,jb->j", v, np.nan_to_num(jet.P), v)
    f = cost - q
    steps = np.diff(f)
    margin = float(steps.min(initial=0.0))
    bad = np.nonzero(steps < -eps_mono)[0] + 1
    return BellmanReport(s.times(), f, margin, s.times()[bad])


@dataclass(frozen=True, eq=False)
class SecondOrderReport:
    classification: str  # TwoNormal | TwoAbnormal
    times: np.ndarray
    a2: np.ndarray
    threshold: float
    zero_times: np.ndarray  # interior times with a2 <= threshold
    undefined_times: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> str:
        if self.classification == "TwoNormal":
            return f"2-normal: a2 > {self.threshold:.3g} on all {self.a2.size} sampled times"
        return f"2-abnormal: a2 <= {self.threshold:.3g} at {self.zero_times.size} sampled times"


def classify_second_order(jet: QuadraticJetForm, eps_rel: float = 1e-6) -> SecondOrderReport:
    """TwoNormal when a2 stays above ``eps_rel * max|a2|`` away from t0."""
    interior = jet.times > jet.times.min() if jet.times.size > 1 else np.ones(1, dtype=bool)
    t = jet.times[interior]
    a2 = jet.a2[interior]
    defined = np.isfinite(a2)
    if not np.any(defined):
        raise ValueError("a2 is undefined: the pure cost direction is never reachable on this piece")
    vals = a2[defined]
    threshold = eps_rel * float(np.abs(vals).max())
    low = vals <= threshold
    label = "TwoAbnormal" if np.any(low) else "TwoNormal"
    return SecondOrderReport(label, t[defined], vals, threshold, t[defined][low], t[~defined])


# --------------------------------------------------------------------------
# Solution spaces and the maximum principle
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PMPResidual:
    target: np.ndarray
    max_principle: np.ndarray  # (k,) max over steps of the residual per field
    costate_equation: float
    costate: np.ndarray  # (node+1, n) reconstructed psi(t)
    energy_multiplier: float


@dataclass(frozen=True, eq=False)
class SolutionSpaceReport:
    tau: float
    kernel_dim: int
    sol0_dim: int
    codim_in_kernel: int
    codim_in_controls: int
    sol0_basis: np.ndarray  # (k*node, sol0_dim) controls
    bilinear_defect: float  # max |B[du, dv]| over du in U0, dv in Sol(0)
    pmp: list = field(default_factory=list)


def pmp_residuals(basis: ImpulseBasis, sol: OCPSolution, psi0) -> PMPResidual:
    """Reconstruct psi(t) from the KKT multipliers and evaluate the PMP residuals.

    Backward transport ``psi' = sum_i du_i Y2_i^T psi0`` from ``psi(tau) = mu``
    (Simpson per step); the maximum-principle residual
    ``<Y1_i, psi> + a u_i - <Y2_i(q1), psi0>`` is evaluated at step midpoints.
    """
    if not sol.bounded:
        raise ValueError("no minimizer: the problem is unbounded")
    frame = basis.frame
    psi0 = np.asarray(psi0, dtype=float)
    j, k, n, h = sol.node, basis.k, basis.n, basis.scenario.h
    du = np.zeros(basis.size)
    du[: sol.control.size] = sol.control
    steps = du.reshape(basis.N, k)
    q1 = np.einsum("jap,p->ja", basis.images[: j + 1, :n], du)
    u = basis.traj.u
    a = sol.energy_multiplier

    def rhs(m: int, node: int | None):
        Y2 = frame.Y2(m, mid=True) if node is None else frame.Y2(node)
        return np.einsum("i,iab,a->b", steps[m], Y2, psi0)

    psi = np.empty((j + 1, n))
    psi[j] = sol.costate
    r0 = np.empty((j, n))
    r1 = np.empty((j, n))
    rm = np.empty((j, n))
    for m in range(j - 1, -1, -1):
        r0[m], rm[m], r1[m] = rhs(m, m), rhs(m, None), rhs(m, m + 1)
        psi[m] = psi[m + 1] - (h / 6.0) * (r0[m] + 4 * rm[m] + r1[m])
    ev_resid = float(np.abs((psi[1:] - psi[:-1]) / h - 0.5 * (r0 + r1)).max(initial=0.0))

    mp = np.zeros(k)
    for m in range(j):
        Y1a, Y1b = frame.Y1(m), frame.Y1(m + 1)
        d0, d1 = steps[m] @ Y1a, steps[m] @ Y1b
        q_mid = 0.5 * (q1[m] + q1[m + 1]) + (h / 8.0) * (d0 - d1)
        psi_mid = 0.5 * (psi[m] + psi[m + 1]) + (h / 8.0) * (r0[m] - r1[m])
        Y1 = frame.Y1(m, mid=True)
        Y2 = frame.Y2(m, mid=True)
        res = Y1 @ psi_mid + a * u[m] - np.einsum("iab,b,a->i", Y2, q_mid, psi0)
        mp = np.maximum(mp, np.abs(res))
    return PMPResidual(sol.target, mp, ev_resid, psi, a)


def solution_space_analysis(gram: GramForm, basis: ImpulseBasis | None = None, targets=None,
                            seed: int = 0, samples: int = 20,
                            eps_idx: float = EPS_IDX) -> SolutionSpaceReport:
    """Zero-target solution space, its codimensions and PMP residuals of solved problems."""
    ocp = CharOCP(gram, eps_idx)
    if not ocp.psd:
        raise NotPositiveSemidefinite(
            f"restricted form has eigenvalue {ocp.ev[0]:.3g} < 0: no solutions exist")
    Z = gram.kernel
    sol0 = Z @ ocp.W[:, ocp.null_mask] if Z.shape[1] else np.zeros((gram.G.shape[0], 0))
    rng = np.random.default_rng(seed)
    defect = 0.0
    if Z.shape[1] and sol0.shape[1]:
        for _ in range(samples):
            du = Z @ rng.standard_normal(Z.shape[1])
            dv = sol0 @ rng.standard_normal(sol0.shape[1])
            du /= np.linalg.norm(du)
            dv /= np.linalg.norm(dv)
            defect = max(defect, abs(gram.bilinear(du, dv)))
    kdim, sdim = Z.shape[1], sol0.shape[1]
    report = SolutionSpaceReport(gram.tau, kdim, sdim, kdim - sdim, gram.G.shape[0] - sdim,
                                 sol0, defect)
    if basis is not None:
        if targets is None:
            r, U, _, _ = numerical_rank(gram.constraint)
            targets = [U[:, a] for a in range(r)]
        for v in targets:
            sol = ocp.solve(v)
            if sol.bounded:
                report.pmp.append(pmp_residuals(basis, sol, gram.psi0))
    return report


def nested_refinement(s, psi0, tau: float, grids) -> list[dict]:
    """Fit at ``tau`` on each grid size; rows carry N, coefficients and the change in a2."""
    rows = []
    prev = None
    for N in grids:
        sN = s.with_grid(int(N))
        basis = assemble_differential(sN)
        jet = fit_value_function(sN, basis, psi0, tau)
        a2 = float(jet.a2[0])
        rows.append({
            "N": int(N),
            "a2": a2,
            "Psi2": jet.Psi2[0],
            "zeta": jet.zeta[0],
            "delta_a2": None if prev is None else a2 - prev,
            "basis": basis,
            "jet": jet,
        })
        prev = a2
    return rows
