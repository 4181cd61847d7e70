"""Command-line front end: ``lqkernel {solve,study,kernel-table,eta-table}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_config
from .errors import DomainError, LQKernelError
from .kernel import ZERO_Q, LQKernel
from .linsys import check_times
from .pipeline import ETA_SCALE, GRID, Runner, run_report, study, study_header, thread_count
from .socp import export_conic
from .trajectory import trajectory_csv, write_text_atomic

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _values(raw: str | None) -> list[float]:
    if raw is None or not raw.strip():
        return []
    try:
        return [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be a comma-separated list of numbers, got {raw!r}") from None


def _load(args) -> RunConfig:
    if args.preset is not None:
        if args.config is not None:
            raise ConfigError("use either --config or --preset")
        return parse_config({"preset": args.preset}, source=f"preset {args.preset}")
    if args.config is None:
        raise ConfigError("--config PATH (or --preset NAME) is required")
    return load_config(args.config)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_overrides(args, cfg: RunConfig) -> RunConfig:
    upd = {}
    if getattr(args, "dense_factor", None) is not None:
        upd["dense_factor"] = args.dense_factor
    solver = {}
    if getattr(args, "tol", None) is not None:
        solver["tol"] = args.tol
    if getattr(args, "max_iter", None) is not None:
        solver["max_iter"] = args.max_iter
    if solver:
        upd["solver"] = cfg.solver.model_copy(update=solver)
    if not upd:
        return cfg
    data = cfg.model_dump(exclude={"preset", "preset_options"})
    data.update({k: (v.model_dump() if hasattr(v, "model_dump") else v) for k, v in upd.items()})
    return parse_config(data, source="command line")


def cmd_solve(args) -> int:
    cfg = _apply_overrides(args, _load(args))
    runner = Runner(cfg)
    res = runner.run()
    out = _out_dir(args, cfg)
    report = run_report(res)
    write_text_atomic(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    if res.trajectory is not None:
        write_text_atomic(out / "solution.csv", trajectory_csv(res.trajectory, res.problem.constraints))
    if args.export_conic:
        export_conic(res.program, out / "program.json")
    sol = res.solution
    print(f"status {sol.status}  objective {sol.objective:.10g}  z {sol.z:.10g}  "
          f"iterations {sol.iterations}  solve {sol.wall_time:.2f}s")
    if res.feasibility is not None:
        for c in res.feasibility.constraints:
            print(f"  {c.label}: max violation {c.max_violation:.6g} at t={c.argmax_time:.6g}")
    if not sol.optimal:
        print(f"solver finished with status {sol.status}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _apply_overrides(args, _load(args))
    values = _values(args.values)
    runner = Runner(cfg)
    rows, times = study(runner, args.axis, values, workers=thread_count())
    out = _out_dir(args, cfg)
    header = study_header(runner.problem)
    write_text_atomic(out / "study.csv", csv_text(header, rows))
    write_text_atomic(out / "study_timing.csv",
                      csv_text(["value", "wall_time"], [[r[0], t] for r, t in zip(rows, times)]))
    for r in rows:
        print(f"{args.axis}={_cell(r[0])}: {r[1]} objective {_cell(r[2])}")
    return EXIT_OK


def kernel_table(kernel: LQKernel, times) -> tuple[list[str], list[list]]:
    """All blocks ``K(s, t)`` over pairs of ``times``, one row per matrix entry.

    Zero-Q kernels also list the free-response and controlled parts.
    """
    ts = check_times(np.asarray(times, dtype=float), kernel.T)
    split = kernel.mode == ZERO_Q
    header = ["s", "t", "row", "col", "k"] + (["k0", "k1"] if split else [])
    if not len(ts):
        return header, []
    K = kernel.block_matrix(ts, ts)
    if split:
        phi = kernel.phi(ts)
        K0 = np.einsum("aij,bkj->abik", phi, phi)
    rows = []
    N = kernel.N
    for a, s in enumerate(ts):
        for b, t in enumerate(ts):
            for i in range(N):
                for j in range(N):
                    row = [s, t, i + 1, j + 1, K[a, b, i, j]]
                    if split:
                        row += [K0[a, b, i, j], K[a, b, i, j] - K0[a, b, i, j]]
                    rows.append(row)
    return header, rows


def eta_table(tightened, labels) -> tuple[list[str], list[list]]:
    header = ["family", "label", "m", "t_m", "delta_m", "eta", "d_inf"]
    rows = []
    if tightened is not None:
        for i, m, t_m, delta, eta, dinf, _ in tightened.rows():
            rows.append([i + 1, labels[i], m + 1, t_m, delta, eta, dinf])
    return header, rows


def cmd_kernel_table(args) -> int:
    cfg = _load(args)
    times = _values(args.values) if args.values is not None else list(cfg.kernel_times)
    runner = Runner(cfg)
    try:
        header, rows = kernel_table(runner.kernel, times)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args, cfg)
    write_text_atomic(out / "kernel_table.csv", csv_text(header, rows))
    return EXIT_OK


def cmd_eta_table(args) -> int:
    cfg = _load(args)
    runner = Runner(cfg)
    prob = runner.problem
    header, rows = eta_table(runner.tightened(prob), prob.constraints.labels)
    out = _out_dir(args, cfg)
    write_text_atomic(out / "eta_table.csv", csv_text(header, rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqkernel",
        description="State-constrained linear-quadratic control via kernel methods and SOC tightening.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, solver_flags=True):
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--preset", help="built-in problem instead of a config file")
        p.add_argument("--out", help="output directory (default: output_dir from the config)")
        if solver_flags:
            p.add_argument("--dense-factor", type=int, help="reporting grid refinement")
            p.add_argument("--tol", type=float, help="solver tolerance")
            p.add_argument("--max-iter", type=int, help="solver iteration cap")

    p = sub.add_parser("solve", help="solve one problem; writes solution.csv and report.json")
    common(p)
    p.add_argument("--export-conic", action="store_true", help="also write program.json")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("study", help="solve over a list of covering sizes or eta scales")
    common(p)
    p.add_argument("--axis", choices=[GRID, ETA_SCALE], required=True)
    p.add_argument("--values", default="", help="comma-separated study points")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("kernel-table", help="dump kernel blocks at the given times")
    common(p, solver_flags=False)
    p.add_argument("--values", help="comma-separated times (default: kernel_times from the config)")
    p.set_defaults(func=cmd_kernel_table)

    p = sub.add_parser("eta-table", help="dump tightening coefficients per constraint and centre")
    common(p, solver_flags=False)
    p.set_defaults(func=cmd_eta_table)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LQKernelError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
