"""Second-variation Gram matrices, negative index and index-growth points.

For a covector psi0 the cost of a control at node j is
``<q2(t_j), psi0> = <b2(t_j), phi_j> + L2_psi(t_j)[b1, b1]`` with
``phi_j = L1(t_j)^T psi0``.  The cost is exactly quadratic in the control, so
the Gram matrix over impulses follows by polarization from integrations of
single impulses and of pairwise sums.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .endpoint import EPS_RANK, ImpulseBasis, classify_first_order, numerical_rank
from .flow import propagate_variations

__all__ = [
    "EPS_IDX",
    "MAX_IMPULSES",
    "NoAbnormalCovector",
    "GramTable",
    "GramForm",
    "IndexReport",
    "IndexProfile",
    "gram_table",
    "build_gram",
    "as_index",
    "index_divisions",
    "node_of",
]

EPS_IDX = 1e-8
MAX_IMPULSES = 512
_CHUNK = 4096


class NoAbnormalCovector(ValueError):
    """First-order analysis found no abnormal covector to build the form with."""


def node_of(times: np.ndarray, tau: float, tol: float = 1e-9) -> int:
    """Grid index of ``tau``; raises ValueError when tau is off the grid."""
    j = int(np.argmin(np.abs(times - tau)))
    span = times[-1] - times[0]
    if abs(times[j] - tau) > tol * max(1.0, abs(span)):
        raise ValueError(f"time {tau!r} is not a grid point")
    return j


class GramTable:
    """Impulse Gram matrices at a set of nodes for one covector psi0."""

    def __init__(self, basis: ImpulseBasis, psi0, nodes=None):
        N, k = basis.N, basis.k
        P = basis.size
        if P > MAX_IMPULSES:
            raise ValueError(f"k*N = {P} exceeds the Gram cap of {MAX_IMPULSES} impulses")
        self.basis = basis
        self.psi0 = np.asarray(psi0, dtype=float)
        if self.psi0.shape != (basis.n,):
            raise ValueError(f"psi0 must have {basis.n} components")
        self.nodes = np.arange(N + 1) if nodes is None else np.unique(np.asarray(nodes, dtype=int))
        phi = basis.frame.covector(self.psi0)
        lam = basis.frame.lam2_pairing(self.psi0)
        pos = {int(j): m for m, j in enumerate(self.nodes)}

        singles = np.zeros((len(self.nodes), P))
        iu, ju = np.triu_indices(P, 1)
        pairs = np.zeros((len(self.nodes), iu.size))

        def run(combos: np.ndarray, out: np.ndarray, offset: int):
            dU = combos.reshape(-1, N, k)

            def record(j, b1, b2, _c1, _c2):
                m = pos.get(j)
                if m is not None:
                    out[m, offset: offset + b1.shape[0]] = (
                        b2 @ phi[j] + np.einsum("ba,ac,bc->b", b1, lam[j], b1)
                    )

            propagate_variations(basis.traj, dU, record, second=True)

        for start in range(0, P, _CHUNK):
            stop = min(P, start + _CHUNK)
            run(np.eye(P)[start:stop], singles, start)
        for start in range(0, iu.size, _CHUNK):
            stop = min(iu.size, start + _CHUNK)
            combos = np.zeros((stop - start, P))
            rows = np.arange(stop - start)
            combos[rows, iu[start:stop]] = 1.0
            combos[rows, ju[start:stop]] = 1.0
            run(combos, pairs, start)

        self.G = np.empty((len(self.nodes), P, P))
        for m in range(len(self.nodes)):
            g = np.diag(singles[m])
            off = 0.5 * (pairs[m] - singles[m][iu] - singles[m][ju])
            g[iu, ju] = off
            g[ju, iu] = off
            self.G[m] = g
        self._pos = pos

    def at(self, j: int) -> np.ndarray:
        """Gram over the impulses supported before node j, shape (k*j, k*j)."""
        m = self._pos.get(int(j))
        if m is None:
            raise ValueError(f"node {j} not tabulated")
        kj = self.basis.k * int(j)
        return self.G[m, :kj, :kj]

    def cost(self, j: int, du_flat) -> float:
        """Quadratic cost of a step-major control at node j from the table."""
        du = np.asarray(du_flat, dtype=float)[: self.basis.k * int(j)]
        return float(du @ self.at(j) @ du)


def gram_table(basis: ImpulseBasis, psi0, nodes=None) -> GramTable:
    """Cached table keyed by psi0 (and the requested nodes)."""
    key = ("gram", tuple(np.round(np.asarray(psi0, dtype=float), 15)),
           None if nodes is None else tuple(np.unique(np.asarray(nodes, dtype=int))))
    table = basis.cache.get(key)
    if table is None:
        full = basis.cache.get(key[:2] + (None,))
        if full is not None:
            return full
        table = GramTable(basis, psi0, nodes)
        basis.cache[key] = table
    return table


def direct_cost(basis: ImpulseBasis, psi0, du_flat) -> np.ndarray:
    """Cost of one control at every node by a single integration, shape (N+1,)."""
    psi0 = np.asarray(psi0, dtype=float)
    phi = basis.frame.covector(psi0)
    lam = basis.frame.lam2_pairing(psi0)
    out = np.empty(basis.N + 1)

    def record(j, b1, b2, _c1, _c2):
        out[j] = b2[0] @ phi[j] + b1[0] @ lam[j] @ b1[0]

    dU = np.asarray(du_flat, dtype=float).reshape(1, basis.N, basis.k)
    propagate_variations(basis.traj, dU, record, second=True)
    return out


@dataclass(frozen=True, eq=False)
class GramForm:
    tau: float
    node: int
    psi0: np.ndarray
    G: np.ndarray  # (kj, kj)
    constraint: np.ndarray  # (n+1, kj) terminal q~1 map
    kernel: np.ndarray  # (kj, m) orthonormal basis of U0

    @property
    def restricted(self) -> np.ndarray:
        Z = self.kernel
        R = Z.T @ self.G @ Z
        return 0.5 * (R + R.T)

    def value(self, du) -> float:
        du = np.asarray(du, dtype=float)
        return float(du @ self.G @ du)

    def bilinear(self, du, dv) -> float:
        return float(np.asarray(du, dtype=float) @ self.G @ np.asarray(dv, dtype=float))

    def symmetry_defect(self) -> float:
        scale = max(np.abs(self.G).max(initial=0.0), 1e-300)
        return float(np.abs(self.G - self.G.T).max(initial=0.0) / scale)


def _kernel(M: np.ndarray, eps_rank: float) -> np.ndarray:
    r, _, _, Vt = numerical_rank(M, eps_rank)
    return Vt[r:].T.copy()


def build_gram(s, basis: ImpulseBasis, psi0, tau: float, eps_rank: float = EPS_RANK) -> GramForm:
    """Gram form and kernel U0 at grid time ``tau``."""
    j = node_of(s.times(), tau)
    table = gram_table(basis, psi0)
    M = basis.matrix(j)
    return GramForm(float(s.times()[j]), j, table.psi0, table.at(j).copy(), M, _kernel(M, eps_rank))


@dataclass(frozen=True, eq=False)
class IndexReport:
    index: int
    eigenvalues: np.ndarray
    min_eigenvalue: float
    spectral_radius: float
    kernel_dim: int

    @property
    def relative_min(self) -> float:
        if self.spectral_radius == 0.0:
            return 0.0
        return self.min_eigenvalue / self.spectral_radius


def as_index(gram: GramForm, eps_idx: float = EPS_IDX) -> IndexReport:
    """Negative index of the Gram form on U0."""
    R = gram.restricted
    if R.size == 0:
        return IndexReport(0, np.zeros(0), 0.0, 0.0, 0)
    ev = np.linalg.eigvalsh(R)
    radius = float(np.abs(ev).max())
    scale = max(radius, float(np.abs(gram.G).max(initial=0.0)))
    index = int(np.sum(ev < -eps_idx * scale))
    return IndexReport(index, ev, float(ev[0]), radius, R.shape[0])


@dataclass(frozen=True, eq=False)
class IndexProfile:
    times: np.ndarray
    profile: np.ndarray  # I(t0, t_j)
    divisions: np.ndarray  # times where the profile grows
    division_nodes: np.ndarray
    piece_indices: np.ndarray  # index on each piece between divisions
    corank: int
    inconsistent: bool  # more growth points than the corank allows
    monotone: bool

    @property
    def diagnostic(self) -> str:
        if not self.inconsistent:
            return ""
        return (f"{len(self.division_nodes)} index growth points exceed corank {self.corank}; "
                "the trajectory cannot be a minimizer with this covector")


def index_divisions(s, basis: ImpulseBasis, psi0=None, corank: int | None = None,
                    eps_rank: float = EPS_RANK, eps_idx: float = EPS_IDX) -> IndexProfile:
    """Index profile over the grid and the points where it grows."""
    if psi0 is None or corank is None:
        report = classify_first_order(basis, eps_rank)
        if psi0 is None:
            if report.psi0 is None:
                raise NoAbnormalCovector(f"no abnormal covector: {report.summary()}")
            psi0 = report.psi0
        if corank is None:
            corank = report.corank
    table = gram_table(basis, psi0)
    N, k = basis.N, basis.k
    times = s.times()

    def index_on(a: int, b: int) -> int:
        """Index of the form on controls supported on steps [a, b), evaluated at node b."""
        if b <= a:
            return 0
        G = table.at(b)[k * a:, k * a:]
        Z = _kernel(basis.matrix(b, start=a), eps_rank)
        form = GramForm(float(times[b]), b, table.psi0, G, basis.matrix(b, start=a), Z)
        return as_index(form, eps_idx).index

    profile = np.array([index_on(0, j) for j in range(N + 1)])
    nodes = np.array([j for j in range(1, N + 1) if profile[j] > profile[j - 1]], dtype=int)
    bounds = [0] + [int(j) - 1 for j in nodes] + [N]
    pieces = np.array([index_on(a, b) for a, b in zip(bounds[:-1], bounds[1:])], dtype=int)
    return IndexProfile(times, profile, times[nodes], nodes, pieces, int(corank),
                        bool(len(nodes) > corank), bool(np.all(np.diff(profile) >= 0)))
