"""Command line front end: ``stfmm {verify,solve,trace,bench}``.

Exit codes: 0 ok, 2 usage/config error, 3 GMRES did not converge,
4 verification audit failed, 5 transport failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time

import numpy as np

from .config import ConfigError, RunConfig

EXIT_OK, EXIT_USAGE, EXIT_NOCONV, EXIT_AUDIT, EXIT_TRANSPORT = 0, 2, 3, 4, 5

# flag -> RunConfig field
FLAGS = {
    "mesh": ("--mesh", str, "spatial triangle mesh file (default: generated cube surface)"),
    "cube_subdiv": ("--cube-subdiv", int, "cube surface subdivisions per edge"),
    "t_end": ("--t-end", float, "end time T"),
    "timesteps": ("--timesteps", int, "number of uniform time-steps"),
    "slices": ("--slices", int, "number of time-slices for rank distribution"),
    "alpha": ("--alpha", float, "heat conductivity"),
    "n_max": ("--nmax", int, "max elements per leaf cluster"),
    "c_st": ("--cst", float, "space-time box relation constant"),
    "n_tr": ("--ntr", int, "interaction area truncation radius"),
    "m_t": ("--mt", int, "Lagrange order in time"),
    "m_x": ("--mx", int, "Chebyshev order in space"),
    "ranks": ("--ranks", int, "number of ranks"),
    "workers": ("--workers", int, "worker threads per rank"),
    "transport": ("--transport", str, "inproc or tcp"),
    "threshold": ("--threshold", float, "scheduler participation threshold (inf: never compute)"),
    "tol": ("--tol", float, "GMRES relative tolerance"),
    "max_iter": ("--max-iter", int, "GMRES iteration limit"),
    "trace_out": ("--trace-out", str, "trace JSON output path"),
    "report_out": ("--report-out", str, "report output path (JSON or CSV)"),
    "solution_out": ("--solution-out", str, "solution vector output path"),
    "seed": ("--seed", int, "random seed"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its entries")
    for dest, (flag, typ, hlp) in FLAGS.items():
        kw = {"choices": ["inproc", "tcp"]} if dest == "transport" else {}
        common.add_argument(flag, dest=dest, type=typ, default=None, help=hlp, **kw)
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="stfmm", description="Space-time FMM for the heat single-layer operator")
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", parents=[common], help="compare FMM against the dense matrix")
    v.add_argument("--vectors", type=int, default=5, help="random vectors for the error check")
    v.add_argument("--max-error", type=float, default=1e-4)
    s = sub.add_parser("solve", parents=[common], help="GMRES solve with a manufactured right-hand side")
    s.add_argument("--rhs", help="right-hand side file, one value per line")
    sub.add_parser("trace", parents=[common], help="instrumented matvec with JSON trace")
    b = sub.add_parser("bench", parents=[common], help="timing table over worker/rank counts")
    b.add_argument("--bench-workers", default="1,2,4", help="comma separated worker counts")
    b.add_argument("--bench-ranks", default="1", help="comma separated rank counts")
    b.add_argument("--repeat", type=int, default=3, help="matvecs per row")
    sub.add_parser("config", parents=[common], help="print the effective configuration")
    return p


def resolve_config(args):
    base = RunConfig.load(args.config) if args.config else RunConfig()
    return base.override(**{k: getattr(args, k) for k in FLAGS})


def _emit(report, path):
    text = json.dumps(report, indent=2, default=float)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _plan(cfg, mesh, table=None):
    from .fmm import FMMPlan
    from .tree import build_tree

    tree = build_tree(mesh, n_max=cfg.n_max, c_st=cfg.c_st, n_tr=cfg.n_tr, alpha=cfg.alpha,
                      slice_bounds=cfg.slice_bounds())
    return FMMPlan(tree, cfg.expansion_orders(), cfg.quadrature_spec(), table=table, grain=cfg.grain)


def _operator(cfg, plan, **kw):
    from .parallel import DistributedFMM

    return DistributedFMM(plan, cfg.ranks, max(cfg.workers, 1), cfg.threshold, cfg.transport,
                          seed=cfg.seed, **kw)


def cmd_verify(cfg, args):
    from .assembly import TrianglePairTable, assemble_dense
    from .tree import coverage_audit

    mesh = cfg.build_mesh()
    if mesh.n_dofs > cfg.dense_cap:
        print(f"error: {mesh.n_dofs} DOFs exceed the dense cap {cfg.dense_cap}; refusing to assemble",
              file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    table = TrianglePairTable(mesh, cfg.quadrature_spec(), cfg.alpha)
    dense = assemble_dense(mesh, cfg.quadrature_spec(), cfg.alpha, cap=cfg.dense_cap, table=table)
    t1 = time.perf_counter()
    plan = _plan(cfg, mesh, table)
    t2 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    errs = []
    ns = mesh.n_space
    worst = 0.0
    with _operator(cfg, plan) as op:
        for _ in range(args.vectors):
            w = rng.standard_normal(mesh.n_dofs)
            ref = dense @ w
            errs.append(float(np.linalg.norm(op.matvec(w) - ref) / np.linalg.norm(ref)))
        for k in range(1, mesh.n_timesteps):
            w = np.zeros(mesh.n_dofs)
            w[k * ns : (k + 1) * ns] = rng.standard_normal(ns)
            worst = max(worst, float(np.abs(op.matvec(w)[: k * ns]).max()))
    uncovered, multiple, acausal = coverage_audit(plan.tree)
    audit_ok = uncovered == 0 and multiple == 0 and acausal == 0
    report = {
        "n_dofs": mesh.n_dofs,
        "max_rel_error": max(errs),
        "rel_errors": errs,
        "error_ok": max(errs) <= args.max_error,
        "causality_max_abs": worst,
        "causality_ok": worst <= 1e-16,
        "audit": {"uncovered": uncovered, "multiple": multiple, "acausal_admissible": acausal, "ok": audit_ok},
        "times": {"dense": t1 - t0, "fmm_setup": t2 - t1},
    }
    _emit(report, cfg.report_out)
    return EXIT_OK if (report["error_ok"] and report["causality_ok"] and audit_ok) else EXIT_AUDIT


def _read_vector(path, n):
    v = np.loadtxt(path, dtype=float, ndmin=1)
    if v.shape != (n,):
        raise ConfigError(f"{path}: expected {n} values, found {v.size}")
    return v


def slice_segments(plan):
    """DOF ranges of the time-slices; each rank owns whole slices.

    Inner products sum per slice and combine in a fixed tree, so GMRES
    takes identical steps for every rank count.
    """
    tree = plan.tree
    bounds = tree.params.get("slice_bounds")
    if bounds is None:
        tt = tree.temporal
        leaves = sorted(tt.leaves(), key=lambda j: tt[j].steps[0])
        bounds = [tt[j].steps[0] for j in leaves] + [tt[leaves[-1]].steps[1]]
    ns = tree.mesh.n_space
    return [np.arange(a * ns, b * ns) for a, b in zip(bounds[:-1], bounds[1:])]


def cmd_solve(cfg, args):
    from .solver import gmres

    mesh = cfg.build_mesh()
    plan = _plan(cfg, mesh)
    with _operator(cfg, plan) as op:
        if args.rhs:
            rhs = _read_vector(args.rhs, mesh.n_dofs)
        else:
            w_ref = np.random.default_rng(cfg.seed).standard_normal(mesh.n_dofs)
            rhs = plan.matvec(w_ref)
        x, rep = gmres(op, rhs, cfg.tol, cfg.max_iter, cfg.restart, segments=slice_segments(plan))
    if cfg.solution_out:
        np.savetxt(cfg.solution_out, x, fmt="%.17g")
    if cfg.report_out:
        rep.write_csv(cfg.report_out)
    summary = {"iterations": rep.iterations, "converged": rep.converged, "breakdown": rep.breakdown,
               "final_relres": rep.final_residual, "wall_time": rep.wall_time}
    if not args.rhs:
        summary["rel_error_vs_reference"] = float(np.linalg.norm(x - w_ref) / np.linalg.norm(w_ref))
    print(json.dumps(summary, indent=2))
    return EXIT_OK if rep.converged else EXIT_NOCONV


def cmd_trace(cfg, args):
    mesh = cfg.build_mesh()
    plan = _plan(cfg, mesh)
    w = np.random.default_rng(cfg.seed).standard_normal(mesh.n_dofs)
    with _operator(cfg, plan, trace=True) as op:
        op.matvec(w)
        summary = op.recorder.summary()
        summary["wall_time_s"] = op.last_time
        if cfg.trace_out:
            op.recorder.write(cfg.trace_out)
    _emit(summary, cfg.report_out)
    return EXIT_OK


def efficiency(t1, tp, p):
    """Parallel efficiency ``t1 / (p * tp)``."""
    return t1 / (p * tp)


def cmd_bench(cfg, args):
    try:
        worker_counts = [int(x) for x in args.bench_workers.split(",") if x]
        rank_counts = [int(x) for x in args.bench_ranks.split(",") if x]
    except ValueError as exc:
        raise ConfigError(f"bad count list: {exc}") from exc
    mesh = cfg.build_mesh()
    t0 = time.perf_counter()
    plan = _plan(cfg, mesh)
    t_asm = time.perf_counter() - t0
    w = np.random.default_rng(cfg.seed).standard_normal(mesh.n_dofs)
    rows = [{"phase": "assembly", "workers": 1, "ranks": 1, "time": t_asm, "efficiency": 1.0}]
    base = None
    for r in rank_counts:
        for k in worker_counts:
            c = cfg.override(ranks=r, workers=k)
            with _operator(c, plan) as op:
                op.matvec(w)  # warm-up
                ts = []
                for _ in range(args.repeat):
                    op.matvec(w)
                    ts.append(op.last_time)
            t = min(ts)
            base = t if base is None else base
            rows.append({"phase": "iteration", "workers": k, "ranks": r, "time": t,
                         "efficiency": efficiency(base, t, (r * k) / (rank_counts[0] * worker_counts[0]))})
    out = open(cfg.report_out, "w", newline="") if cfg.report_out else sys.stdout
    try:
        wr = csv.DictWriter(out, fieldnames=["phase", "workers", "ranks", "time", "efficiency"])
        wr.writeheader()
        wr.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "solve": cmd_solve, "trace": cmd_trace, "bench": cmd_bench}


def main(argv=None):
    from .assembly import AssemblyCapError
    from .mesh import MeshFormatError
    from .parallel import AssignmentError, DeadlockError, ProtocolError, TransportError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "config":
            print(cfg.dumps())
            return EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, AssignmentError, AssemblyCapError, MeshFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, ProtocolError, DeadlockError) as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
