"""Command-line front end: ``srjet <subcommand> --scenario FILE [--out-dir DIR]``.

Exit codes: 0 success, 2 configuration error, 3 integration failure,
4 no abnormal covector, 5 residual breach.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .endpoint import (
    assemble_differential,
    classify_first_order,
    controllability_divisions,
    reachable_spaces,
)
from .flow import Covector, IntegrationError, transport_covector, write_csv
from .minjet import (
    NotPositiveSemidefinite,
    UnboundedValueFunction,
    classify_second_order,
    fit_value_function_grid,
    gram_at_node,
    nested_refinement,
    solution_space_analysis,
    to_manifold_frame,
)
from .secondvar import MAX_IMPULSES, NoAbnormalCovector, as_index, build_gram, index_divisions, node_of
from .system import ConfigError, load_scenario_file
from .verify import (
    ResidualReport,
    analytic_jet,
    check_first_order,
    check_goh,
    check_goh_adapted,
    check_second_order,
)

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRATION, EXIT_NO_COVECTOR, EXIT_RESIDUAL = 0, 2, 3, 4, 5


class ResidualBreach(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------

def _plain(obj):
    """JSON-ready copy: arrays to lists, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Run:
    """Scenario, output directory and manifest bookkeeping for one invocation."""

    def __init__(self, args):
        self.args = args
        self.path = Path(args.scenario)
        self.scenario = load_scenario_file(self.path)
        self.digest = hashlib.sha256(self.path.read_bytes()).hexdigest()
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: dict[str, list[str]] = {}
        self.timings: dict[str, float] = {}
        self.profile = args.tolerance_profile
        self._basis = None

    @property
    def basis(self):
        if self._basis is None:
            self._basis = assemble_differential(self.scenario)
        return self._basis

    def emit(self, command: str, name: str) -> Path:
        path = self.out / name
        self.outputs.setdefault(command, []).append(str(path))
        return path

    def write_manifest(self) -> None:
        manifest_path = self.out / "manifest.json"
        doc = {}
        if manifest_path.exists():
            try:
                doc = json.loads(manifest_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                doc = {}
        if doc.get("scenario_digest") != self.digest:
            doc = {}
        doc["scenario_digest"] = self.digest
        doc["tool_version"] = __version__
        doc.setdefault("outputs", {}).update(self.outputs)
        doc.setdefault("timings", {}).update(self.timings)
        _write_json(manifest_path, doc)


def _vector_arg(text: str, n: int, what: str) -> np.ndarray:
    try:
        vals = np.array([float(x) for x in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"{what} must be comma-separated numbers") from exc
    if vals.size != n or not np.all(np.isfinite(vals)):
        raise ConfigError(f"dimension mismatch: {what} needs {n} finite components")
    return vals


def _resolve_psi0(run: Run, choice: str | None) -> np.ndarray:
    s = run.scenario
    if choice is None or choice == "auto":
        if choice is None and s.psi0 is not None:
            return np.array(s.psi0)
        report = classify_first_order(run.basis)
        if report.psi0 is None:
            raise NoAbnormalCovector(f"no abnormal covector: {report.summary()}")
        return report.psi0
    return _vector_arg(choice, s.n, "--psi0")


def _check_gram_cap(s, N: int | None = None) -> None:
    size = s.k * (N if N is not None else s.N)
    if size > MAX_IMPULSES:
        raise ConfigError(f"k*N = {size} exceeds the Gram cap of {MAX_IMPULSES}")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_simulate(run: Run) -> dict:
    traj = run.basis.traj
    s = run.scenario
    header = ["t"] + list(s.system.coordinates) + ["energy"]
    write_csv(run.emit("simulate", "trajectory.csv"), header,
              [traj.times, *traj.q.T, traj.energy])
    doc = {"q_final": traj.q[-1], "energy_final": traj.energy[-1], "N": s.N}
    print(f"q(t1) = ({', '.join(repr(float(x)) for x in traj.q[-1])}), "
          f"E = {float(traj.energy[-1])!r}")
    return doc


def _first_order_doc(run: Run) -> dict:
    report = classify_first_order(run.basis)
    doc = {
        "classification": report.classification,
        "rank": report.rank,
        "corank": report.corank,
        "cost_direction_reachable": report.cost_direction_reachable,
        "abnormal_covectors": report.abnormal,
        "normal_covector": report.normal,
        "singular_values": report.singular_values,
        "summary": report.summary(),
    }
    if report.psi0 is not None:
        doc["phi_terminal"] = run.basis.frame.covector(report.psi0)[-1]
        doc["a1"] = 0.0
    return doc


def cmd_classify(run: Run) -> dict:
    doc = _first_order_doc(run)
    _write_json(run.emit("classify", "classification.json"), doc)
    print(doc["summary"])
    return doc


def cmd_reachable(run: Run) -> dict:
    reach = reachable_spaces(run.basis)
    div = controllability_divisions(run.basis)
    write_csv(run.emit("reachable", "reachable.csv"), ["t", "dim_forward", "dim_backward"],
              [reach.times, reach.dims, div.backward_dims])
    doc = {"dims": reach.dims, "monotone": reach.monotone, "divisions": div.times}
    _write_json(run.emit("reachable", "reachable.json"), doc)
    print(f"reachable dimension at t1: {int(reach.dims[-1])}; "
          f"division points: {[float(t) for t in div.times]}")
    return doc


def cmd_index(run: Run) -> dict:
    s = run.scenario
    _check_gram_cap(s)
    psi0 = _resolve_psi0(run, run.args.psi0)
    gram = build_gram(s, run.basis, psi0, s.t1)
    rep = as_index(gram)
    prof = index_divisions(s, run.basis, psi0, corank=classify_first_order(run.basis).corank)
    write_csv(run.emit("index", "spectrum.csv"), ["eigenvalue"], [rep.eigenvalues])
    doc = {
        "psi0": psi0,
        "index": rep.index,
        "min_eigenvalue": rep.min_eigenvalue,
        "spectral_radius": rep.spectral_radius,
        "kernel_dim": rep.kernel_dim,
        "profile": prof.profile,
        "divisions": prof.divisions,
        "piece_indices": prof.piece_indices,
        "diagnostic": prof.diagnostic,
    }
    _write_json(run.emit("index", "index.json"), doc)
    print(f"negative index at t1: {rep.index} (kernel dimension {rep.kernel_dim})")
    if prof.diagnostic:
        print(prof.diagnostic)
    return doc


def _selected_rows(s, times_arg: str | None) -> np.ndarray:
    if times_arg is None or times_arg == "all":
        return np.arange(s.N + 1)
    try:
        ts = [float(x) for x in times_arg.split(",")]
    except ValueError as exc:
        raise ConfigError("--times must be 'all' or comma-separated grid times") from exc
    try:
        return np.array([node_of(s.times(), t) for t in ts], dtype=int)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _fitted_manifold_jet(run: Run, psi0):
    adapted = fit_value_function_grid(run.scenario, run.basis, psi0)
    return adapted, to_manifold_frame(adapted, run.basis.frame)


def cmd_minjet(run: Run) -> dict:
    s = run.scenario
    args = run.args
    _check_gram_cap(s)
    psi0 = _resolve_psi0(run, args.psi0)
    rows = _selected_rows(s, args.times)
    adapted, manifold = _fitted_manifold_jet(run, psi0)
    coords = list(s.system.coordinates)
    h, c = adapted.select(rows).table(coords)
    write_csv(run.emit("minjet", "value_function.csv"), h, c)
    h, c = manifold.select(rows).table(coords)
    write_csv(run.emit("minjet", "value_function_manifold.csv"), h, c)

    doc: dict = {"psi0": psi0, "N": s.N}
    try:
        second = classify_second_order(adapted)
        doc["second_order"] = {
            "classification": second.classification,
            "threshold": second.threshold,
            "zero_times": second.zero_times,
            "undefined_times": second.undefined_times,
            "summary": second.summary(),
        }
        print(second.summary())
    except ValueError as exc:
        doc["second_order"] = {"classification": None, "error": str(exc)}
        print(f"second-order classification unavailable: {exc}")

    try:
        space = solution_space_analysis(gram_at_node(run.basis, psi0, s.N), run.basis)
        doc["solution_space"] = {
            "kernel_dim": space.kernel_dim,
            "sol0_dim": space.sol0_dim,
            "codim_in_kernel": space.codim_in_kernel,
            "codim_in_controls": space.codim_in_controls,
            "bilinear_defect": space.bilinear_defect,
            "max_principle": [p.max_principle for p in space.pmp],
            "costate_equation": [p.costate_equation for p in space.pmp],
        }
    except NotPositiveSemidefinite as exc:
        doc["solution_space"] = {"error": str(exc)}

    if np.any(np.isfinite(manifold.a2)):
        cov = transport_covector(s, run.basis.traj, run.basis.frame.covector(psi0)[-1], 0.0)
        recs = check_second_order(s, run.basis.traj, cov.phi, manifold, run.basis, run.profile)
        doc["residuals"] = ResidualReport(recs).to_dict()

    if args.refine:
        grids = [s.N * 2 ** r for r in range(args.refine + 1)]
        _check_gram_cap(s, grids[-1])
        ref = nested_refinement(s, psi0, s.t1, grids)
        write_csv(run.emit("minjet", "refinement.csv"), ["N", "a2", "delta_a2"],
                  [[r["N"] for r in ref], [r["a2"] for r in ref],
                   [np.nan if r["delta_a2"] is None else r["delta_a2"] for r in ref]])
        doc["refinement"] = [{k: r[k] for k in ("N", "a2", "delta_a2", "zeta", "Psi2")} for r in ref]
    _write_json(run.emit("minjet", "minjet.json"), doc)
    return doc


def _verification_covector(run: Run) -> tuple[Covector, np.ndarray | None]:
    """Covector for the residual suite and the matching abnormal psi0, if any."""
    s, args, basis = run.scenario, run.args, run.basis
    if args.phi is not None:
        phi1 = _vector_arg(args.phi, s.n, "--phi")
        a1 = float(args.a1)
    elif s.certificate is not None:
        phi1, a1 = np.array(s.certificate["phi"]), float(s.certificate["a1"])
    else:
        psi0 = _resolve_psi0(run, args.psi0)
        return transport_covector(s, basis.traj, basis.frame.covector(psi0)[-1], 0.0), psi0
    cov = transport_covector(s, basis.traj, phi1, a1)
    psi0 = np.linalg.solve(basis.frame.lam1[-1].T, phi1) if a1 == 0.0 else None
    return cov, psi0


def cmd_verify(run: Run) -> dict:
    s, args = run.scenario, run.args
    cov, psi0 = _verification_covector(run)
    report = ResidualReport()
    report.extend(check_first_order(s, run.basis.traj, cov, run.profile))
    report.extend([check_goh(s, run.basis.traj, cov.phi, run.profile)])
    if psi0 is not None:
        report.extend([check_goh_adapted(s, run.basis.frame, psi0, run.profile)])
    if args.jet == "analytic":
        if s.jet is None:
            raise ConfigError("--jet analytic needs a 'jet' table in the scenario")
        report.extend(check_second_order(s, run.basis.traj, cov.phi, analytic_jet(s),
                                         run.basis, run.profile))
    elif args.jet == "fitted":
        if psi0 is None:
            raise NoAbnormalCovector("a fitted jet needs an abnormal covector (a1 = 0)")
        _check_gram_cap(s)
        _, manifold = _fitted_manifold_jet(run, psi0)
        report.extend(check_second_order(s, run.basis.traj, cov.phi, manifold, run.basis,
                                         run.profile))
    doc = report.to_dict()
    _write_json(run.emit("verify", "residuals.json"), doc)
    print(report.summary())
    if not report.all_pass:
        raise ResidualBreach("residual above tolerance")
    return doc


def cmd_report(run: Run) -> dict:
    doc: dict = {"scenario_digest": run.digest, "version": __version__}
    doc["simulate"] = cmd_simulate(run)
    doc["classify"] = cmd_classify(run)
    doc["reachable"] = cmd_reachable(run)
    if doc["classify"]["abnormal_covectors"].shape[0] and run.scenario.k * run.scenario.N <= MAX_IMPULSES:
        run.args.psi0 = run.args.psi0 or "auto"
        doc["index"] = cmd_index(run)
        doc["minjet"] = cmd_minjet(run)
    _write_json(run.emit("report", "report.json"), doc)
    return doc


COMMANDS = {
    "simulate": cmd_simulate,
    "classify": cmd_classify,
    "reachable": cmd_reachable,
    "index": cmd_index,
    "minjet": cmd_minjet,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario document (YAML)")
    common.add_argument("--out-dir", default="srjet-out", help="output directory")
    common.add_argument("--tolerance-profile", choices=("default", "strict"), default="default")

    parser = argparse.ArgumentParser(prog="srjet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"srjet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="integrate the trajectory and energy")
    sub.add_parser("classify", parents=[common], help="first-order classification")
    sub.add_parser("reachable", parents=[common], help="reachable dimensions and divisions")
    p = sub.add_parser("index", parents=[common], help="negative index of the second variation")
    p.add_argument("--psi0", default=None, help="'auto' or comma-separated components")
    p = sub.add_parser("minjet", parents=[common], help="minimal 2-jet value function")
    p.add_argument("--psi0", default=None, help="'auto' or comma-separated components")
    p.add_argument("--times", default="all", help="'all' or comma-separated grid times")
    p.add_argument("--refine", type=int, default=0, help="number of grid doublings to append")
    p = sub.add_parser("verify", parents=[common], help="residuals of the necessary conditions")
    p.add_argument("--jet", choices=("none", "analytic", "fitted"), default="none")
    p.add_argument("--psi0", default=None, help="'auto' or comma-separated components")
    p.add_argument("--phi", default=None, help="terminal covector override, comma-separated")
    p.add_argument("--a1", type=float, default=0.0, help="energy multiplier for --phi")
    p = sub.add_parser("report", parents=[common], help="run every analysis that applies")
    p.add_argument("--psi0", default=None, help="'auto' or comma-separated components")
    p.set_defaults(times="all", refine=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "refine", 0) < 0:
        parser.error("--refine must be nonnegative")
    try:
        run = Run(args)
        started = time.perf_counter()
        try:
            COMMANDS[args.command](run)
        finally:
            run.timings[args.command] = time.perf_counter() - started
            run.write_manifest()
    except ConfigError as exc:
        print(f"srjet: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationError as exc:
        print(f"srjet: integration failed: {exc}", file=sys.stderr)
        return EXIT_INTEGRATION
    except NoAbnormalCovector as exc:
        print(f"srjet: {exc}", file=sys.stderr)
        return EXIT_NO_COVECTOR
    except ResidualBreach as exc:
        print(f"srjet: {exc}", file=sys.stderr)
        return EXIT_RESIDUAL
    except UnboundedValueFunction as exc:
        print(f"srjet: {exc}", file=sys.stderr)
        return EXIT_RESIDUAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
