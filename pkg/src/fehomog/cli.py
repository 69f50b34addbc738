"""Command-line front end.

Exit codes: 0 ok, 2 invalid input, 3 no convergence, 4 numerical abort.
Every flag can also be set through an environment variable
(``HOMOG_PROBLEM``, ``HOMOG_OUT``, ``HOMOG_THREADS``, ``HOMOG_SEED``);
an explicit flag wins over the environment.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import problem as pio
from .preconditioner import SingularBlockError, assemble_reference, invert_blocks, set_workers
from .projection import UnequalWeightsError, compare_db_sb
from .solvers import IndefiniteOperatorError, reference_tangent, solve_load_program
from .spectral import condition_estimate, eigenvalue_bounds

EXIT_OK, EXIT_INVALID, EXIT_NONCONV, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("fehomog")


def _initial_tangent(prob: pio.Problem):
    """Material tangent at the first macroscopic load with zero fluctuation."""
    layout = prob.layout()
    e = prob.loads[0]
    eps = np.broadcast_to(e.reshape((-1,) + (1,) * (layout.dim + 1)), layout.quad_shape)
    _, tan, _ = prob.materials().evaluate(layout, np.array(eps))
    return layout, tan


def cmd_solve(prob: pio.Problem, out: Path) -> int:
    layout = prob.layout()
    results, report = solve_load_program(layout, prob.materials(), prob.config)
    pio.write_bundle(out, prob, results, report)
    log.info("%s: %s, Newton steps %s, %d CG iterations", prob.name, report.cause,
             report.newton_counts, report.total_cg)
    if not report.converged:
        print(f"no convergence ({report.cause}) in load step {len(results) - 1}",
              file=sys.stderr)
        return EXIT_NONCONV
    return EXIT_OK


def cmd_bounds(prob: pio.Problem, out: Path) -> int:
    layout, tan = _initial_tangent(prob)
    c_ref = reference_tangent(layout, tan, prob.config)
    b = eigenvalue_bounds(layout, tan, c_ref)
    kappa = condition_estimate(b)
    out.mkdir(parents=True, exist_ok=True)
    pio.write_csv(out / "bounds.csv", [{"index": i, "lower": float(lo), "upper": float(hi)}
                                       for i, (lo, hi) in enumerate(zip(b.lower, b.upper))])
    pio.write_csv(out / "condition.csv", [{"condition_estimate": kappa,
                                           "lower_min": float(b.lower.min()),
                                           "upper_max": float(b.upper.max())}])
    print(f"condition estimate {kappa!r}")
    return EXIT_OK


def cmd_compare(prob: pio.Problem, out: Path) -> int:
    layout = prob.layout()
    cmp = compare_db_sb(layout, prob.materials(), prob.loads, prob.config)
    out.mkdir(parents=True, exist_ok=True)
    pio.write_csv(out / "compare.csv", cmp.rows())
    pio.write_csv(out / "discrepancy.csv", [{"load_step": k, "relative_max_abs": v}
                                            for k, v in enumerate(cmp.discrepancy)])
    summary = {"newton_db": cmp.db.newton_counts, "newton_sb": cmp.sb.newton_counts,
               "cg_db": cmp.db.cg_counts(), "cg_sb": cmp.sb.cg_counts(),
               "newton_equal": cmp.newton_equal, "max_cg_difference": cmp.max_cg_difference,
               "cause_db": cmp.db.cause, "cause_sb": cmp.sb.cause}
    (out / "compare.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    if not (cmp.db.converged and cmp.sb.converged):
        return EXIT_NONCONV
    return EXIT_OK


def cmd_probe(prob: pio.Problem, out: Path) -> int:
    layout, tan = _initial_tangent(prob)
    c_ref = reference_tangent(layout, tan, prob.config)
    blocks = assemble_reference(layout, c_ref)
    inv = invert_blocks(blocks)
    eig = np.linalg.eigvalsh(blocks.blocks)
    flags = inv.pseudo_inverted
    rows = []
    for idx in np.ndindex(*eig.shape[:-1]):
        rows.append({"frequency": " ".join(map(str, idx)),
                     "eig_min": float(eig[idx][0]), "eig_max": float(eig[idx][-1]),
                     "pseudo_inverse": int(flags[idx])})
    out.mkdir(parents=True, exist_ok=True)
    pio.write_csv(out / "blocks.csv", rows)
    pio.write_field(out / "reference_blocks_real", blocks.blocks.real,
                    "(*half_spectrum, type, type)", field="reference blocks, real part")
    pio.write_field(out / "reference_blocks_imag", blocks.blocks.imag,
                    "(*half_spectrum, type, type)", field="reference blocks, imaginary part")
    nz = eig[..., 0].copy()
    nz[(0,) * layout.dim] = np.inf
    print(f"{len(rows)} frequency blocks of size {blocks.n_types}; "
          f"smallest non-zero-frequency eigenvalue {float(nz.min())!r}")
    return EXIT_OK


HELP = {"solve": "run the load program and write fields, averages and the report",
        "bounds": "eigenvalue bound sequences and condition estimate",
        "compare": "displacement- vs strain-based scheme comparison",
        "probe-precond": "frequency-block diagnostics of the preconditioner"}

COMMANDS = {"solve": cmd_solve, "bounds": cmd_bounds, "compare": cmd_compare,
            "probe-precond": cmd_probe}


def _env_int(name, default=None):
    value = os.environ.get(name)
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        raise SystemExit(f"error: {name}={value!r} is not an integer") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fehomog", description="FFT-preconditioned finite-element homogenization")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--problem", default=os.environ.get("HOMOG_PROBLEM"),
                       help="problem file (YAML)")
        p.add_argument("--out", default=os.environ.get("HOMOG_OUT", "out"),
                       help="output directory")
        p.add_argument("--threads", type=int, default=_env_int("HOMOG_THREADS", 1),
                       help="FFT worker threads")
        p.add_argument("--seed", type=int, default=_env_int("HOMOG_SEED"),
                       help="seed for randomized templates")
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.problem is None:
        print("error: no problem file (use --problem or HOMOG_PROBLEM)", file=sys.stderr)
        return EXIT_INVALID
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    set_workers(args.threads)
    try:
        prob = pio.load_problem(args.problem, seed=args.seed)
        return COMMANDS[args.command](prob, Path(args.out))
    # LinAlgError derives from ValueError, so numerical failures go first
    except (IndefiniteOperatorError, SingularBlockError, FloatingPointError,
            np.linalg.LinAlgError, ArithmeticError, MemoryError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pio.ProblemError, UnequalWeightsError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
