"""Sub-Riemannian systems, the built-in catalog and scenario configuration.

A scenario is a YAML document::

    system: martinet            # catalog name, or an inline table (below)
    q0: [0, 0, 0]
    t: [0, 1]                   # or separate t0 / t1 keys
    N: 64
    u: [0, 1]                   # constant, N rows of samples, or a profile table

Inline systems give ``fields`` as k lists of n expression strings, with
optional ``coordinates`` (default ``x, y, z`` for n = 3, else ``q1 .. qn``).
Profiles are ``{profile: zero}`` or ``{profile: piecewise, breaks: [...],
values: [[...], ...]}``; a piecewise profile is sampled at step midpoints.

Optional keys used downstream: ``psi0`` (abnormal covector in adapted
coordinates), ``certificate`` (``phi`` at t1 and ``a1``) and ``jet``
(expressions in ``t`` for ``Phi2``, ``xi`` and ``a2``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import yaml

from .vfexpr import ExprSyntaxError, UnknownIdentifierError, VectorFieldSet, parse

__all__ = [
    "ConfigError",
    "UnknownSystemError",
    "SRSystem",
    "ControlGrid",
    "Scenario",
    "CATALOG",
    "builtin",
    "load_scenario",
    "load_scenario_file",
    "scenario_from_dict",
]


class ConfigError(ValueError):
    """Invalid or incomplete scenario configuration."""


class UnknownSystemError(ConfigError):
    pass


CATALOG: dict[str, list[list[str]]] = {
    "martinet": [["1", "0", "0"], ["0", "1-x", "x^2/2"]],
    "heisenberg": [["1", "0", "-y/2"], ["0", "1", "x/2"]],
}


@dataclass(frozen=True)
class SRSystem:
    name: str
    fields: VectorFieldSet
    coordinates: tuple[str, ...]
    builtin: bool = False

    @property
    def n(self) -> int:
        return self.fields.n

    @property
    def k(self) -> int:
        return self.fields.k

    def frame_rank(self, q, tol: float = 1e-10) -> int:
        s = np.linalg.svd(self.fields.fields_at(q), compute_uv=False)
        return int(np.sum(s > tol * max(1.0, s[0])))

    def to_config(self) -> Any:
        if self.builtin:
            return self.name
        return {
            "name": self.name,
            "coordinates": list(self.coordinates),
            "fields": [list(r) for r in self.fields.sources],
        }


def _default_coordinates(n: int) -> tuple[str, ...]:
    return ("x", "y", "z") if n == 3 else tuple(f"q{a + 1}" for a in range(n))


def make_system(name: str, fields: list[list[str]], coordinates=None, builtin: bool = False) -> SRSystem:
    if not fields or not all(isinstance(r, (list, tuple)) for r in fields):
        raise ConfigError("system fields must be a list of k lists of n expressions")
    n = len(fields[0])
    coords = tuple(coordinates) if coordinates is not None else _default_coordinates(n)
    if len(coords) != n:
        raise ConfigError(f"dimension mismatch: {len(coords)} coordinates for fields of length {n}")
    if len(fields) > n:
        raise ConfigError(f"rank {len(fields)} exceeds dimension {n}")
    try:
        vfs = VectorFieldSet([[str(c) for c in r] for r in fields], coords)
    except (ExprSyntaxError, UnknownIdentifierError) as exc:
        raise ConfigError(f"bad field expression: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"dimension mismatch: {exc}") from exc
    return SRSystem(name, vfs, coords, builtin)


def builtin(name: str) -> SRSystem:
    """Catalog system by name; unknown names list what is available."""
    if name not in CATALOG:
        raise UnknownSystemError(
            f"unknown system {name!r}; available: {', '.join(sorted(CATALOG))}"
        )
    return make_system(name, CATALOG[name], builtin=True)


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Piecewise-constant controls: ``values[j, i]`` is control i on step j."""

    values: np.ndarray
    t0: float
    t1: float

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("control samples must form an (N, k) array")
        if not np.all(np.isfinite(v)):
            raise ValueError("control values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def h(self) -> float:
        return (self.t1 - self.t0) / self.N

    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.N + 1)

    def flat(self) -> np.ndarray:
        """Step-major coordinates in the impulse basis (index j*k + i)."""
        return self.values.reshape(-1).copy()

    @classmethod
    def from_flat(cls, vec, N: int, k: int, t0: float, t1: float) -> "ControlGrid":
        return cls(np.asarray(vec, dtype=float).reshape(N, k), t0, t1)

    def like(self, values) -> "ControlGrid":
        return ControlGrid(np.asarray(values, dtype=float).reshape(self.N, self.k), self.t0, self.t1)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ControlGrid)
            and self.t0 == other.t0
            and self.t1 == other.t1
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class Scenario:
    system: SRSystem
    q0: np.ndarray
    t0: float
    t1: float
    N: int
    u: ControlGrid
    psi0: tuple[float, ...] | None = None
    certificate: Mapping[str, Any] | None = None
    jet: Mapping[str, Any] | None = None
    extras: Mapping[str, Any] = field(default_factory=dict)

    @property
    def h(self) -> float:
        return (self.t1 - self.t0) / self.N

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def k(self) -> int:
        return self.system.k

    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.N + 1)

    def with_grid(self, N: int) -> "Scenario":
        """Same scenario on N steps; controls are resampled at step midpoints."""
        mids = self.t0 + (np.arange(N) + 0.5) * (self.t1 - self.t0) / N
        idx = np.minimum(((mids - self.t0) / self.h).astype(int), self.N - 1)
        u = ControlGrid(self.u.values[idx], self.t0, self.t1)
        return Scenario(self.system, self.q0, self.t0, self.t1, N, u, self.psi0,
                        self.certificate, self.jet, self.extras)

    def with_control(self, u: ControlGrid) -> "Scenario":
        return Scenario(self.system, self.q0, self.t0, self.t1, self.N, u, self.psi0,
                        self.certificate, self.jet, self.extras)

    def to_dict(self) -> dict[str, Any]:
        rows = self.u.values
        if np.all(rows == rows[0]):
            u_cfg: Any = [float(x) for x in rows[0]]
        else:
            u_cfg = [[float(x) for x in r] for r in rows]
        doc: dict[str, Any] = {
            "system": self.system.to_config(),
            "q0": [float(x) for x in self.q0],
            "t0": float(self.t0),
            "t1": float(self.t1),
            "N": int(self.N),
            "u": u_cfg,
        }
        if self.psi0 is not None:
            doc["psi0"] = [float(x) for x in self.psi0]
        if self.certificate is not None:
            doc["certificate"] = _plain(self.certificate)
        if self.jet is not None:
            doc["jet"] = _plain(self.jet)
        doc.update(_plain(dict(self.extras)))
        return doc

    def serialize(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def __eq__(self, other) -> bool:
        return isinstance(other, Scenario) and self.to_dict() == other.to_dict()


def _plain(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _finite_vector(value: Any, what: str, length: int | None = None) -> np.ndarray:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{what} must be a list of numbers")
    try:
        vec = np.array([float(x) for x in value], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must contain numbers: {exc}") from exc
    if length is not None and vec.size != length:
        raise ConfigError(f"dimension mismatch: {what} has {vec.size} entries, expected {length}")
    if not np.all(np.isfinite(vec)):
        raise ConfigError(f"non-finite value in {what}")
    return vec


def _finite_scalar(value: Any, what: str) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must be a number") from exc
    if not math.isfinite(x):
        raise ConfigError(f"non-finite value in {what}")
    return x


def _control_samples(given: Any, N: int, k: int, t0: float, t1: float) -> np.ndarray:
    if isinstance(given, Mapping):
        kind = given.get("profile")
        if kind == "zero":
            return np.zeros((N, k))
        if kind == "constant":
            return np.tile(_finite_vector(given.get("value"), "u.value", k), (N, 1))
        if kind == "piecewise":
            breaks = _finite_vector(given.get("breaks", []), "u.breaks")
            values = given.get("values")
            if not isinstance(values, list) or len(values) != breaks.size + 1:
                raise ConfigError("dimension mismatch: piecewise profile needs len(breaks)+1 value rows")
            rows = np.array([_finite_vector(v, "u.values", k) for v in values])
            mids = t0 + (np.arange(N) + 0.5) * (t1 - t0) / N
            return rows[np.searchsorted(breaks, mids, side="right")]
        raise ConfigError(f"unknown control profile {kind!r}; available: constant, piecewise, zero")
    if isinstance(given, str):
        if given == "zero":
            return np.zeros((N, k))
        raise ConfigError(f"unknown control profile {given!r}; available: constant, piecewise, zero")
    if not isinstance(given, (list, tuple)) or not given:
        raise ConfigError("u must be a constant vector, N sample rows or a profile table")
    if all(isinstance(r, (list, tuple)) for r in given):
        if len(given) != N:
            raise ConfigError(f"dimension mismatch: {len(given)} control samples, expected N={N}")
        return np.array([_finite_vector(r, f"u[{j}]", k) for j, r in enumerate(given)])
    return np.tile(_finite_vector(given, "u", k), (N, 1))


_KNOWN = {"system", "q0", "t", "t0", "t1", "N", "u", "psi0", "certificate", "jet"}


def scenario_from_dict(doc: Mapping[str, Any]) -> Scenario:
    """Validate a parsed configuration mapping and build the scenario."""
    if not isinstance(doc, Mapping):
        raise ConfigError("scenario document must be a mapping")
    for key in ("system", "q0", "N", "u"):
        if key not in doc:
            raise ConfigError(f"missing field {key!r}")
    if "t" in doc:
        t = _finite_vector(doc["t"], "t", 2)
        t0, t1 = float(t[0]), float(t[1])
    else:
        for key in ("t0", "t1"):
            if key not in doc:
                raise ConfigError(f"missing field {key!r} (or 't')")
        t0, t1 = _finite_scalar(doc["t0"], "t0"), _finite_scalar(doc["t1"], "t1")
    if not t1 > t0:
        raise ConfigError("interval must satisfy t0 < t1")

    sys_cfg = doc["system"]
    if isinstance(sys_cfg, str):
        system = builtin(sys_cfg)
    elif isinstance(sys_cfg, Mapping):
        if "fields" not in sys_cfg:
            raise ConfigError("missing field 'system.fields'")
        system = make_system(str(sys_cfg.get("name", "custom")), sys_cfg["fields"],
                             sys_cfg.get("coordinates"))
    else:
        raise ConfigError("system must be a catalog name or a table with 'fields'")

    N = doc["N"]
    if isinstance(N, bool) or not isinstance(N, int) or N <= 0:
        raise ConfigError("N must be a positive integer")
    q0 = _finite_vector(doc["q0"], "q0", system.n)
    u = ControlGrid(_control_samples(doc["u"], N, system.k, t0, t1), t0, t1)
    if system.frame_rank(q0) < system.k:
        raise ConfigError("fields are not linearly independent at q0")

    psi0 = None
    if doc.get("psi0") is not None:
        psi0 = tuple(float(x) for x in _finite_vector(doc["psi0"], "psi0", system.n))
    cert = doc.get("certificate")
    if cert is not None:
        if not isinstance(cert, Mapping) or "phi" not in cert:
            raise ConfigError("certificate must be a table with 'phi' (and optional 'a1')")
        cert = {
            "phi": [float(x) for x in _finite_vector(cert["phi"], "certificate.phi", system.n)],
            "a1": _finite_scalar(cert.get("a1", 0.0), "certificate.a1"),
        }
    jet = doc.get("jet")
    if jet is not None:
        jet = _validate_jet(jet, system.n)
    extras = {k: v for k, v in doc.items() if k not in _KNOWN}
    return Scenario(system, q0, t0, t1, N, u, psi0, cert, jet, extras)


def _validate_jet(jet: Any, n: int) -> dict[str, Any]:
    if not isinstance(jet, Mapping):
        raise ConfigError("jet must be a table with Phi2, xi and a2")
    for key in ("Phi2", "xi", "a2"):
        if key not in jet:
            raise ConfigError(f"missing field 'jet.{key}'")
    Phi2, xi, a2 = jet["Phi2"], jet["xi"], jet["a2"]
    if not isinstance(Phi2, list) or len(Phi2) != n or any(
        not isinstance(r, list) or len(r) != n for r in Phi2
    ):
        raise ConfigError(f"dimension mismatch: jet.Phi2 must be {n}x{n}")
    if not isinstance(xi, list) or len(xi) != n:
        raise ConfigError(f"dimension mismatch: jet.xi must have {n} entries")
    out = {"Phi2": [[str(c) for c in r] for r in Phi2], "xi": [str(c) for c in xi], "a2": str(a2)}
    try:
        for text in [c for r in out["Phi2"] for c in r] + out["xi"] + [out["a2"]]:
            parse(text, ("t",))
    except (ExprSyntaxError, UnknownIdentifierError) as exc:
        raise ConfigError(f"bad jet expression: {exc}") from exc
    return out


def load_scenario(text: str) -> Scenario:
    """Parse and validate a YAML scenario document."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"unreadable scenario document: {exc}") from exc
    return scenario_from_dict(doc)


def load_scenario_file(path) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    return load_scenario(text)
