"""Trajectory, variations, covector transport and the adapted frame.

Everything lives on the scenario's uniform grid and is integrated with
fixed-step RK4, the control being constant on each step.  Coefficients of
the variational equations are evaluated at the grid nodes and at mid-step
states taken from the cubic Hermite interpolant of the trajectory, so the
trajectory is integrated once and shared by every variation.

Second-order jets use the full second derivative of the end-point map:
``End[u + s du] = End[u] + s b1 + (s^2 / 2) b2 + o(s^2)``, so along the
reference trajectory

    b1' = A b1 + sum_i du_i X_i
    b2' = A b2 + sum_i u_i D^2X_i[b1, b1] + 2 sum_i du_i DX_i[b1]
    c1' = <u, du>,   c2' = |du|^2

with ``A = sum_i u_i DX_i``.  In adapted coordinates
``q1 = L1 b1``, ``q2 = L1 b2 + L2[b1, b1]`` and ``q2' = 2 sum_i du_i Y2_i(t, q1)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .system import ControlGrid, Scenario
from .vfexpr import DomainError

__all__ = [
    "IntegrationError",
    "SingularFrameError",
    "Trajectory",
    "VariationBundle",
    "OracleResult",
    "Covector",
    "AdaptedFrame",
    "integrate_trajectory",
    "integrate_variations",
    "finite_difference_oracle",
    "transport_covector",
    "build_adapted_frame",
    "to_adapted",
    "pair_two_jet",
    "write_csv",
]


class IntegrationError(RuntimeError):
    """The integration produced a non-finite state or left the fields' domain."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SingularFrameError(IntegrationError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray  # (N+1,)
    q: np.ndarray  # (N+1, n)
    energy: np.ndarray  # (N+1,)
    u: np.ndarray  # (N, k)
    q_mid: np.ndarray  # (N, n) Hermite mid-step states
    F: np.ndarray  # (N, 3, k, n) fields at start/mid/end of each step
    J: np.ndarray  # (N, 3, k, n, n)
    H: np.ndarray  # (N, 3, k, n, n, n)

    @property
    def N(self) -> int:
        return self.u.shape[0]

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def A(self) -> np.ndarray:
        """sum_i u_i DX_i on each step slot, shape (N, 3, n, n)."""
        a = self.__dict__.get("_A")
        if a is None:
            a = np.einsum("ji,jsiab->jsab", self.u, self.J)
            object.__setattr__(self, "_A", a)
        return a

    @property
    def Hu(self) -> np.ndarray:
        """sum_i u_i D^2X_i on each step slot, shape (N, 3, n, n, n)."""
        a = self.__dict__.get("_Hu")
        if a is None:
            a = np.einsum("ji,jsiabc->jsabc", self.u, self.H)
            object.__setattr__(self, "_Hu", a)
        return a

    def fields_at_node(self, j: int) -> np.ndarray:
        return self.F[j, 0] if j < self.N else self.F[j - 1, 2]

    def jacobians_at_node(self, j: int) -> np.ndarray:
        return self.J[j, 0] if j < self.N else self.J[j - 1, 2]


@dataclass(frozen=True, eq=False)
class VariationBundle:
    times: np.ndarray
    b1: np.ndarray  # (N+1, n)
    b2: np.ndarray  # (N+1, n)
    c1: np.ndarray  # (N+1,)
    c2: np.ndarray  # (N+1,)


@dataclass(frozen=True)
class OracleResult:
    b1: np.ndarray
    b2: np.ndarray
    c1: float
    c2: float


@dataclass(frozen=True, eq=False)
class Covector:
    times: np.ndarray
    phi: np.ndarray  # (N+1, n)
    a1: float


def _velocity(system, u_row: np.ndarray, q: np.ndarray) -> np.ndarray:
    return u_row @ system.fields.fields_at(q)


def integrate_trajectory(s: Scenario) -> Trajectory:
    """RK4 trajectory with exact per-step energy accumulation."""
    fields = s.system.fields
    N, n, h = s.N, s.n, s.h
    u = s.u.values
    q = np.empty((N + 1, n))
    E = np.zeros(N + 1)
    q[0] = s.q0
    q_mid = np.empty((N, n))
    try:
        for j in range(N):
            uj = u[j]
            x = q[j]
            k1 = _velocity(s.system, uj, x)
            k2 = _velocity(s.system, uj, x + 0.5 * h * k1)
            k3 = _velocity(s.system, uj, x + 0.5 * h * k2)
            k4 = _velocity(s.system, uj, x + h * k3)
            q[j + 1] = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(q[j + 1])):
                raise IntegrationError(f"non-finite state after step {j}", step=j)
            E[j + 1] = E[j] + 0.5 * h * float(uj @ uj)
            f_end = _velocity(s.system, uj, q[j + 1])
            q_mid[j] = 0.5 * (x + q[j + 1]) + (h / 8.0) * (k1 - f_end)
    except DomainError as exc:
        raise IntegrationError(f"vector field undefined during step {j}: {exc}", step=j) from exc

    try:
        nodes = [
            (fields.fields_at(x), fields.jacobians_at(x), fields.hessians_at(x)) for x in q
        ]
        mids = [
            (fields.fields_at(x), fields.jacobians_at(x), fields.hessians_at(x)) for x in q_mid
        ]
    except DomainError as exc:
        raise IntegrationError(f"vector field undefined along the trajectory: {exc}") from exc
    F = np.stack([np.stack([nodes[j][0], mids[j][0], nodes[j + 1][0]]) for j in range(N)])
    J = np.stack([np.stack([nodes[j][1], mids[j][1], nodes[j + 1][1]]) for j in range(N)])
    H = np.stack([np.stack([nodes[j][2], mids[j][2], nodes[j + 1][2]]) for j in range(N)])
    return Trajectory(s.times(), q, E, u.copy(), q_mid, F, J, H)


# --------------------------------------------------------------------------
# Variations
# --------------------------------------------------------------------------

Observer = Callable[[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray], None]


def propagate_variations(
    traj: Trajectory,
    dU: np.ndarray,
    observer: Observer | None = None,
    second: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Integrate a batch of variations; ``dU`` has shape (B, N, k).

    ``observer(j, b1, b2, c1, c2)`` is called at every node j = 0..N with the
    batch state.  Returns the terminal (b1, b2, c1, c2).
    """
    N, k = traj.u.shape
    n = traj.q.shape[1]
    h = traj.h
    dU = np.asarray(dU, dtype=float)
    if dU.ndim != 3 or dU.shape[1:] != (N, k):
        raise ValueError(f"variation grid mismatch: expected (B, {N}, {k}), got {dU.shape}")
    B = dU.shape[0]
    b1 = np.zeros((B, n))
    b2 = np.zeros((B, n))
    c1 = np.zeros(B)
    c2 = np.zeros(B)
    if observer is not None:
        observer(0, b1, b2, c1, c2)
    A, Hu, F, J = traj.A, traj.Hu, traj.F, traj.J
    for j in range(N):
        du = dU[:, j, :]
        active = np.any(du != 0.0)
        forced = np.einsum("bi,sin->sbn", du, F[j]) if active else None
        Js = [J[j, s].reshape(k * n, n) for s in range(3)]
        Hs = [Hu[j, s].reshape(n, n * n) for s in range(3)]

        def rhs(slot: int, x1: np.ndarray, x2: np.ndarray):
            d1 = x1 @ A[j, slot].T
            if active:
                d1 = d1 + forced[slot]
            if not second:
                return d1, None
            d2 = x2 @ A[j, slot].T
            outer = (x1[:, :, None] * x1[:, None, :]).reshape(B, n * n)
            d2 = d2 + outer @ Hs[slot].T
            if active:
                Jb = (x1 @ Js[slot].T).reshape(B, k, n)
                d2 = d2 + 2.0 * np.einsum("bi,bin->bn", du, Jb)
            return d1, d2

        k1 = rhs(0, b1, b2)
        k2 = rhs(1, b1 + 0.5 * h * k1[0], None if not second else b2 + 0.5 * h * k1[1])
        k3 = rhs(1, b1 + 0.5 * h * k2[0], None if not second else b2 + 0.5 * h * k2[1])
        k4 = rhs(2, b1 + h * k3[0], None if not second else b2 + h * k3[1])
        b1 = b1 + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        if second:
            b2 = b2 + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        c1 = c1 + h * (du @ traj.u[j])
        c2 = c2 + h * np.sum(du * du, axis=1)
        if observer is not None:
            observer(j + 1, b1, b2, c1, c2)
    return b1, b2, c1, c2


def integrate_variations(s: Scenario, traj: Trajectory, du: ControlGrid) -> VariationBundle:
    """First and second variations of the extended end-point map along ``traj``."""
    if du.N != s.N or du.k != s.k or du.t0 != s.t0 or du.t1 != s.t1:
        raise ValueError("variation grid mismatch: du must share the scenario grid")
    N, n = s.N, s.n
    b1 = np.empty((N + 1, n))
    b2 = np.empty((N + 1, n))
    c1 = np.empty(N + 1)
    c2 = np.empty(N + 1)

    def record(j, x1, x2, y1, y2):
        b1[j], b2[j], c1[j], c2[j] = x1[0], x2[0], y1[0], y2[0]

    propagate_variations(traj, du.values[None, :, :], record)
    return VariationBundle(traj.times, b1, b2, c1, c2)


def _endpoint(s: Scenario, values: np.ndarray) -> np.ndarray:
    traj = integrate_trajectory(s.with_control(s.u.like(values)))
    return np.append(traj.q[-1], traj.energy[-1])


def finite_difference_oracle(s: Scenario, du: ControlGrid, step: float = 1e-3) -> OracleResult:
    """Central differences of the nonlinear extended end-point map.

    First derivative ``(F(s) - F(-s)) / 2s`` and second derivative
    ``(F(s) - 2F(0) + F(-s)) / s^2``, each Richardson-extrapolated over
    the step pair {s, s/2}.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = s.u.values
    d = du.values
    F0 = _endpoint(s, base)

    def diffs(h):
        Fp = _endpoint(s, base + h * d)
        Fm = _endpoint(s, base - h * d)
        return (Fp - Fm) / (2 * h), (Fp - 2 * F0 + Fm) / (h * h)

    d1a, d2a = diffs(step)
    d1b, d2b = diffs(step / 2)
    first = (4 * d1b - d1a) / 3
    second = (4 * d2b - d2a) / 3
    n = s.n
    return OracleResult(first[:n], second[:n], float(first[n]), float(second[n]))


# --------------------------------------------------------------------------
# Covector transport
# --------------------------------------------------------------------------

def transport_covector(s: Scenario, traj: Trajectory, phi_terminal, a1: float = 0.0) -> Covector:
    """Backward RK4 for phi' = -A^T phi from phi(t1)."""
    N, n, h = s.N, s.n, s.h
    phi = np.empty((N + 1, n))
    phi[N] = np.asarray(phi_terminal, dtype=float)
    A = traj.A
    for j in range(N - 1, -1, -1):
        x = phi[j + 1]
        k1 = -A[j, 2].T @ x
        k2 = -A[j, 1].T @ (x - 0.5 * h * k1)
        k3 = -A[j, 1].T @ (x - 0.5 * h * k2)
        k4 = -A[j, 0].T @ (x - h * k3)
        phi[j] = x - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return Covector(traj.times, phi, float(a1))


# --------------------------------------------------------------------------
# Adapted frame
# --------------------------------------------------------------------------

def _frame_rhs(L1: np.ndarray, L2: np.ndarray, A: np.ndarray, Hu: np.ndarray):
    d1 = -L1 @ A
    d2 = (
        -np.einsum("am,mbc->abc", L1, Hu)
        - np.einsum("amc,mb->abc", L2, A)
        - np.einsum("abm,mc->abc", L2, A)
    )
    return d1, d2


@dataclass(frozen=True, eq=False)
class AdaptedFrame:
    traj: Trajectory
    lam1: np.ndarray  # (N+1, n, n)
    lam2: np.ndarray  # (N+1, n, n, n), symmetric in the last two slots
    lam1_mid: np.ndarray  # (N, n, n)
    lam2_mid: np.ndarray  # (N, n, n, n)

    @property
    def times(self) -> np.ndarray:
        return self.traj.times

    @property
    def N(self) -> int:
        return self.traj.N

    def inverse(self, j: int) -> np.ndarray:
        return np.linalg.inv(self.lam1[j])

    def det(self) -> np.ndarray:
        return np.linalg.det(self.lam1)

    def _node_or_mid(self, j: int, mid: bool):
        if mid:
            return self.lam1_mid[j], self.lam2_mid[j], self.traj.F[j, 1], self.traj.J[j, 1]
        return self.lam1[j], self.lam2[j], self.traj.fields_at_node(j), self.traj.jacobians_at_node(j)

    def Y1(self, j: int, mid: bool = False) -> np.ndarray:
        """Characteristic fields Y1_i = L1 X_i, shape (k, n)."""
        L1, _, F, _ = self._node_or_mid(j, mid)
        return F @ L1.T

    def Y2(self, j: int, mid: bool = False) -> np.ndarray:
        """Matrices of the linear maps q1 -> Y2_i(t, q1), shape (k, n, n)."""
        L1, L2, F, J = self._node_or_mid(j, mid)
        Ainv = np.linalg.inv(L1)
        out = np.einsum("ab,ibc->iac", L1, J) + np.einsum("abc,ib->iac", L2, F)
        return out @ Ainv

    def covector(self, psi0) -> np.ndarray:
        """phi(t) = L1(t)^T psi0 at every node, shape (N+1, n)."""
        return np.einsum("jab,a->jb", self.lam1, np.asarray(psi0, dtype=float))

    def lam2_pairing(self, psi0) -> np.ndarray:
        """<L2(t)[., .], psi0> at every node, shape (N+1, n, n)."""
        return np.einsum("jabc,a->jbc", self.lam2, np.asarray(psi0, dtype=float))


def build_adapted_frame(s: Scenario, traj: Trajectory, det_tol: float = 1e-10) -> AdaptedFrame:
    """Integrate L1' = -L1 A and the symmetric tensor equation for L2."""
    N, n, h = s.N, s.n, s.h
    L1 = np.empty((N + 1, n, n))
    L2 = np.empty((N + 1, n, n, n))
    L1[0] = np.eye(n)
    L2[0] = 0.0
    A, Hu = traj.A, traj.Hu
    for j in range(N):
        x1, x2 = L1[j], L2[j]
        k1 = _frame_rhs(x1, x2, A[j, 0], Hu[j, 0])
        k2 = _frame_rhs(x1 + 0.5 * h * k1[0], x2 + 0.5 * h * k1[1], A[j, 1], Hu[j, 1])
        k3 = _frame_rhs(x1 + 0.5 * h * k2[0], x2 + 0.5 * h * k2[1], A[j, 1], Hu[j, 1])
        k4 = _frame_rhs(x1 + h * k3[0], x2 + h * k3[1], A[j, 2], Hu[j, 2])
        L1[j + 1] = x1 + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        L2[j + 1] = x2 + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if not (np.all(np.isfinite(L1[j + 1])) and np.all(np.isfinite(L2[j + 1]))):
            raise IntegrationError(f"non-finite adapted frame after step {j}", step=j)
        d = abs(np.linalg.det(L1[j + 1]))
        if d < det_tol:
            raise SingularFrameError(f"adapted frame singular after step {j} (|det|={d:.3g})", step=j)
    L2 = 0.5 * (L2 + L2.swapaxes(2, 3))

    L1m = np.empty((N, n, n))
    L2m = np.empty((N, n, n, n))
    for j in range(N):
        d0 = _frame_rhs(L1[j], L2[j], A[j, 0], Hu[j, 0])
        d1 = _frame_rhs(L1[j + 1], L2[j + 1], A[j, 2], Hu[j, 2])
        L1m[j] = 0.5 * (L1[j] + L1[j + 1]) + (h / 8.0) * (d0[0] - d1[0])
        L2m[j] = 0.5 * (L2[j] + L2[j + 1]) + (h / 8.0) * (d0[1] - d1[1])
    L2m = 0.5 * (L2m + L2m.swapaxes(2, 3))
    return AdaptedFrame(traj, L1, L2, L1m, L2m)


def to_adapted(frame: AdaptedFrame, bundle: VariationBundle) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise map (b1, b2) -> (q1, q2) = (L1 b1, L1 b2 + L2[b1, b1])."""
    if frame.lam1.shape[0] != bundle.b1.shape[0]:
        raise ValueError("frame and bundle must share a grid")
    q1 = np.einsum("jab,jb->ja", frame.lam1, bundle.b1)
    q2 = np.einsum("jab,jb->ja", frame.lam1, bundle.b2) + np.einsum(
        "jabc,jb,jc->ja", frame.lam2, bundle.b1, bundle.b1
    )
    return q1, q2


def pair_two_jet(phi1, Phi2, b1, b2) -> float:
    """<phi1, b2> + Phi2[b1, b1]."""
    phi1, Phi2 = np.asarray(phi1, dtype=float), np.asarray(Phi2, dtype=float)
    b1, b2 = np.asarray(b1, dtype=float), np.asarray(b2, dtype=float)
    if phi1.shape != b2.shape or Phi2.shape != (b1.size, b1.size):
        raise ValueError("dimension mismatch in two-jet pairing")
    return float(phi1 @ b2 + b1 @ Phi2 @ b1)


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------

def write_csv(path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    """Write columns with round-trip float formatting."""
    cols = [np.asarray(c, dtype=float) for c in columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(x)) for x in row])


def bundle_columns(bundle: VariationBundle, coords: Sequence[str]):
    """Header and columns for the variation curve dump (t, b1, b2, c1, c2)."""
    header = ["t"] + [f"b1_{c}" for c in coords] + [f"b2_{c}" for c in coords] + ["c1", "c2"]
    cols = [bundle.times, *bundle.b1.T, *bundle.b2.T, bundle.c1, bundle.c2]
    return header, cols
