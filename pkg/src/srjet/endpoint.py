"""Differential of the extended end-point map, reachable spaces, first-order class.

Controls are expanded in the impulse basis: direction ``p = j*k + i`` is
field i switched on (value 1) during step j only.  Ordering is step-major, so
the directions supported on the first j steps are the first ``k*j`` columns.
Images are stored in adapted coordinates ``(q1, c1)``, where the contribution
of a step does not change after the step ends.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow import AdaptedFrame, Trajectory, build_adapted_frame, integrate_trajectory, propagate_variations
from .system import Scenario

__all__ = [
    "EPS_RANK",
    "ImpulseBasis",
    "ReachableBasis",
    "FirstOrderReport",
    "DivisionReport",
    "assemble_differential",
    "reachable_spaces",
    "classify_first_order",
    "controllability_divisions",
    "numerical_rank",
]

EPS_RANK = 1e-9


def numerical_rank(M: np.ndarray, eps: float = EPS_RANK) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    """Rank with singular values below ``eps * sigma_max`` dropped; also returns the SVD."""
    if M.size == 0:
        m = M.shape[0]
        return 0, np.eye(m), np.zeros(0), np.zeros((0, M.shape[1]))
    U, sv, Vt = np.linalg.svd(M, full_matrices=True)
    if sv.size == 0 or sv[0] == 0.0:
        return 0, U, sv, Vt
    return int(np.sum(sv > eps * sv[0])), U, sv, Vt


@dataclass(eq=False)
class ImpulseBasis:
    scenario: Scenario
    traj: Trajectory
    frame: AdaptedFrame
    images: np.ndarray  # (N+1, n+1, kN): column p of images[j] is (q1, c1)(t_j, e_p)
    b1: np.ndarray  # (N+1, kN, n) manifold-frame first variations
    cache: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.scenario.N

    @property
    def k(self) -> int:
        return self.scenario.k

    @property
    def n(self) -> int:
        return self.scenario.n

    @property
    def size(self) -> int:
        return self.images.shape[2]

    def matrix(self, j: int, start: int = 0) -> np.ndarray:
        """Map from impulses on steps [start, j) to (q1, c1)(t_j)."""
        return self.images[j][:, self.k * start: self.k * j]

    def terminal(self) -> np.ndarray:
        return self.images[self.N]

    def apply(self, j: int, du_flat) -> np.ndarray:
        """(q1, c1)(t_j) of a control given in step-major coordinates."""
        du_flat = np.asarray(du_flat, dtype=float)
        return self.images[j] @ du_flat


def assemble_differential(s: Scenario, traj: Trajectory | None = None,
                          frame: AdaptedFrame | None = None) -> ImpulseBasis:
    """Integrate the first variation once per impulse direction."""
    traj = traj if traj is not None else integrate_trajectory(s)
    frame = frame if frame is not None else build_adapted_frame(s, traj)
    N, k, n = s.N, s.k, s.n
    P = N * k
    dU = np.zeros((P, N, k))
    for j in range(N):
        for i in range(k):
            dU[j * k + i, j, i] = 1.0
    b1 = np.empty((N + 1, P, n))
    c1 = np.empty((N + 1, P))

    def record(j, x1, _x2, y1, _y2):
        b1[j] = x1
        c1[j] = y1

    propagate_variations(traj, dU, record, second=False)
    q1 = np.einsum("jab,jpb->jap", frame.lam1, b1)
    images = np.concatenate([q1, c1[:, None, :]], axis=1)
    return ImpulseBasis(s, traj, frame, images, b1)


@dataclass(frozen=True, eq=False)
class ReachableBasis:
    times: np.ndarray
    bases: tuple[np.ndarray, ...]  # per node, (n+1, d_j) orthonormal columns
    dims: np.ndarray
    monotone: bool

    def contains(self, j: int, v, tol: float = 1e-8) -> bool:
        V = self.bases[j]
        v = np.asarray(v, dtype=float)
        resid = v - V @ (V.T @ v)
        return bool(np.linalg.norm(resid) <= tol * max(1.0, np.linalg.norm(v)))


def reachable_spaces(basis: ImpulseBasis, eps_rank: float = EPS_RANK) -> ReachableBasis:
    """Orthonormal bases of R(t0, t_j) for every node."""
    bases = []
    dims = np.zeros(basis.N + 1, dtype=int)
    for j in range(basis.N + 1):
        M = basis.matrix(j)
        r, U, _, _ = numerical_rank(M, eps_rank)
        bases.append(U[:, :r].copy())
        dims[j] = r
    monotone = bool(np.all(np.diff(dims) >= 0))
    return ReachableBasis(basis.scenario.times(), tuple(bases), dims, monotone)


@dataclass(frozen=True, eq=False)
class FirstOrderReport:
    rank: int
    corank: int
    classification: str  # NotExtremal | NormalExtremal | AbnormalExtremal | StrictlyAbnormal
    abnormal: np.ndarray  # (r_abn, n) orthonormal abnormal covectors psi0 (adapted frame)
    normal: np.ndarray | None  # (n,) covector paired with a1 = -1, if one exists
    cost_direction_reachable: bool
    singular_values: np.ndarray

    @property
    def is_extremal(self) -> bool:
        return self.classification != "NotExtremal"

    @property
    def strictly_abnormal(self) -> bool:
        return self.classification == "StrictlyAbnormal"

    @property
    def psi0(self) -> np.ndarray | None:
        return self.abnormal[0] if self.abnormal.shape[0] else None

    def manifold_covector(self, frame: AdaptedFrame, psi0=None) -> np.ndarray:
        """phi(t) = L1(t)^T psi0 along the grid."""
        psi0 = self.psi0 if psi0 is None else psi0
        if psi0 is None:
            raise ValueError("no abnormal covector available")
        return frame.covector(psi0)

    def summary(self) -> str:
        if self.classification == "NotExtremal":
            return f"not an extremal (full rank {self.rank})"
        words = {
            "NormalExtremal": "normal extremal",
            "AbnormalExtremal": "abnormal (and normal) extremal",
            "StrictlyAbnormal": "strictly abnormal extremal",
        }[self.classification]
        text = f"{words}, rank {self.rank}, corank {self.corank}"
        if self.psi0 is not None:
            text += ", psi0 = (" + ", ".join(f"{x:.6g}" for x in self.psi0) + ")"
        return text


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return (-v if v[i] < 0 else v) + 0.0  # + 0.0 drops negative zeros


def classify_first_order(basis: ImpulseBasis, eps_rank: float = EPS_RANK) -> FirstOrderReport:
    """Rank, corank and normal/abnormal split of the terminal differential."""
    n = basis.n
    M = basis.terminal()
    rank, U, sv, _ = numerical_rank(M, eps_rank)
    corank = n + 1 - rank
    null = U[:, rank:]  # (n+1, corank) left null space
    if corank == 0:
        return FirstOrderReport(rank, 0, "NotExtremal", np.zeros((0, n)), None, True, sv)

    w = null[n, :]  # dr-components of the null basis
    if np.linalg.norm(w) > eps_rank:
        # Null combinations with zero dr-component, and one normal covector.
        _, _, wt = np.linalg.svd(w[None, :])
        abn = null @ wt[1:].T
        normal_vec = null @ (w / (w @ w))  # dr-component exactly 1
        normal = -normal_vec[:n]  # rescale so that a1 = -1
    else:
        abn = null
        normal = None
    abn = abn[:n, :]
    if abn.shape[1]:
        Q, _ = np.linalg.qr(abn)
        abnormal = np.array([_canonical_sign(Q[:, c]) for c in range(abn.shape[1])])
    else:
        abnormal = np.zeros((0, n))
    reachable_cost = normal is None
    if abnormal.shape[0] == 0:
        label = "NormalExtremal"
    elif reachable_cost:
        label = "StrictlyAbnormal"
    else:
        label = "AbnormalExtremal"
    return FirstOrderReport(rank, corank, label, abnormal, normal, reachable_cost, sv)


@dataclass(frozen=True, eq=False)
class DivisionReport:
    times: np.ndarray  # division points
    indices: np.ndarray  # grid indices of the division points
    backward_dims: np.ndarray  # rank of the impulses on [t_j, t1], j = 0..N
    forward_dims: np.ndarray


def controllability_divisions(basis: ImpulseBasis, eps_rank: float = EPS_RANK) -> DivisionReport:
    """Grid times where the backward reachable dimension drops.

    A drop to ``k * (N - j)`` is the column-count ceiling of the discretization
    (every remaining impulse independent) and is not reported.
    """
    N, k = basis.N, basis.k
    M = basis.terminal()
    back = np.zeros(N + 1, dtype=int)
    for j in range(N + 1):
        back[j] = numerical_rank(M[:, k * j:], eps_rank)[0]
    fwd = np.array([numerical_rank(basis.matrix(j), eps_rank)[0] for j in range(N + 1)])
    idx = [
        j for j in range(1, N)
        if back[j] < back[j - 1] and back[j] < k * (N - j)
    ]
    times = basis.scenario.times()
    return DivisionReport(times[idx], np.array(idx, dtype=int), back, fwd)
