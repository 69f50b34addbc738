"""Strain-based scheme with the discrete Green projection.

For stencils whose quadrature weights are all equal the weight matrix is
a scalar and drops out of ``D^T W C D``.  The operator

    Gamma = D (D^T C_ref D)^+ D^T

then maps quadrature fields onto compatible (gradient) fields, and CG on
``Gamma C`` in the ``C_ref``-weighted inner product reproduces the
displacement-based PCG iterates, mapped through ``D``, step by step.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import operators
from .grid import GridLayout
from .preconditioner import FrequencyBlockDiag, apply_preconditioner
from .solvers import (ROUNDOFF, MaterialMap, NewtonResult, SolveConfig, SolveReport,
                      StepRecord, _macro_field, _Reference, pcg_solve, solve_load_program)

__all__ = [
    "UnequalWeightsError",
    "gamma_apply",
    "sb_newton_solve",
    "sb_load_program",
    "ComparisonReport",
    "compare_db_sb",
]

log = logging.getLogger(__name__)


class UnequalWeightsError(ValueError):
    """The projection scheme needs identical quadrature weights."""


def _require_equal_weights(layout: GridLayout):
    if not layout.stencil.equal_weights:
        raise UnequalWeightsError(
            f"stencil {layout.stencil.kind.value} has unequal quadrature weights "
            f"{np.unique(layout.stencil.weights)}; the projection scheme needs equal weights")


def gamma_apply(layout: GridLayout, inv_blocks: FrequencyBlockDiag, s) -> np.ndarray:
    """``D (D^T C_ref D)^+ D^T s`` for a quadrature field ``s``.

    Blocks assembled with the weights are compensated by the (single)
    weight value, so both assembly variants give the same operator.
    """
    _require_equal_weights(layout)
    f = operators.divergence_apply(layout, s, weighted=False)
    v = apply_preconditioner(layout, inv_blocks, f)
    if inv_blocks.weighted:
        v *= layout.stencil.weights[0]
    return operators.gradient_apply(layout, v)


def _cref_inner(c_ref):
    def inner(a, b):
        m = a.shape[0]
        return float(np.vdot(a.reshape(m, -1), c_ref @ b.reshape(m, -1)))
    return inner


def sb_newton_solve(layout: GridLayout, materials: MaterialMap, g, e, cfg: SolveConfig,
                    eps0=None, report: SolveReport | None = None, load_step: int = 0,
                    precond: _Reference | None = None) -> NewtonResult:
    """One load step of Newton on the strain fluctuation with projected CG.

    Each Newton iteration solves ``Gamma C deps = -Gamma sigma`` by CG in
    the inner product ``<a, b> = sum a . C_ref b``, without further
    preconditioning.  Termination tests mirror :func:`newton_solve`; the
    increment is always measured in the strain norm.  ``u`` of the
    returned result is ``None``.
    """
    _require_equal_weights(layout)
    materials.check(layout)
    report = report if report is not None else SolveReport()
    precond = precond or _Reference(layout, cfg, weighted=False)
    if precond.weighted:
        raise ValueError("the projection scheme needs unweighted reference blocks")
    E = _macro_field(layout, e)
    g = materials.initial_state(layout) if g is None else g
    eps_f = np.zeros(layout.quad_shape) if eps0 is None else np.array(eps0, dtype=float)
    deps = None
    res0 = None
    n_steps = 0
    cause = "newton-cap"
    current = None
    for it in range(cfg.max_newton + 1):
        t0 = time.perf_counter()
        sig, tan, g_trial = materials.evaluate(layout, E + eps_f, g)
        current = (sig, tan, g_trial)
        t1 = time.perf_counter()
        reassembled = precond.update(tan)
        report.timings["constitutive"] += t1 - t0
        report.timings["assembly"] += time.perf_counter() - t1
        blocks, c_ref = precond.blocks, precond.c_ref
        inner = _cref_inner(c_ref)
        b = -gamma_apply(layout, blocks, sig)

        if it > 0:
            num = np.sqrt(np.sum(deps ** 2))
            den = np.sqrt(np.sum(eps_f ** 2))
            report.steps[-1].increment_ratio = float(num / den) if den > 0 else 0.0
            if num <= cfg.eta_newton * den:
                cause = "converged"
                break
            res = np.sqrt(max(inner(b, b), 0.0))
            if res <= cfg.eta_cg * res0:
                cause = "converged"
                break
            if it == cfg.max_newton:
                break

        def A(x):
            return gamma_apply(layout, blocks, operators.apply_tangent(tan, x))

        lam = np.linalg.eigvalsh(c_ref)[-1]
        floor = ROUNDOFF * np.sqrt(np.sum(sig * sig) / lam)
        t3 = time.perf_counter()
        sol = pcg_solve(A, lambda r: r, b, cfg.eta_cg, cfg.max_cg, inner=inner, atol=floor)
        report.timings["pcg"] += time.perf_counter() - t3
        if res0 is None:
            res0 = sol.history[0]
        n_steps += 1
        report.steps.append(StepRecord(load_step, n_steps, sol.iterations, sol.history[0],
                                       sol.history[-1], np.nan, reassembled, sol.history))
        log.debug("SB load %d newton %d: %d CG iterations", load_step, n_steps, sol.iterations)
        deps = sol.x
        eps_f = eps_f + deps
        current = None
        if not sol.converged:
            cause = "cg-stall"
            break
        if materials.is_linear:
            cause = "converged"
            break

    if current is None:
        current = materials.evaluate(layout, E + eps_f, g)
    sig, tan, g_trial = current
    report.newton_counts.append(n_steps)
    if report.cause == "converged":
        report.cause = cause
    g_out = g_trial if cause == "converged" else g
    return NewtonResult(u=None, g=g_out, eps=E + eps_f, sigma=sig, report=report, tangent=tan)


def sb_load_program(layout: GridLayout, materials: MaterialMap, cfg: SolveConfig,
                    load_steps=None) -> tuple[list[NewtonResult], SolveReport]:
    """Strain-based counterpart of :func:`fehomog.solvers.solve_load_program`."""
    steps = cfg.load_steps if load_steps is None else load_steps
    if len(steps) == 0:
        raise ValueError("load program is empty")
    report = SolveReport()
    precond = _Reference(layout, cfg, weighted=False)
    g = materials.initial_state(layout)
    eps_f = None
    results = []
    for k, e in enumerate(steps):
        res = sb_newton_solve(layout, materials, g, e, cfg, eps0=eps_f, report=report,
                              load_step=k, precond=precond)
        results.append(res)
        if not report.converged:
            break
        g = res.g
        eps_f = res.eps - _macro_field(layout, e)
    return results, report


@dataclass
class ComparisonReport:
    db: SolveReport
    sb: SolveReport
    discrepancy: list[float] = field(default_factory=list)

    @property
    def newton_equal(self) -> bool:
        return self.db.newton_counts == self.sb.newton_counts

    @property
    def max_cg_difference(self) -> int:
        a, b = self.db.cg_counts(), self.sb.cg_counts()
        if len(a) != len(b):
            return max(len(a), len(b))
        return max((abs(x - y) for x, y in zip(a, b)), default=0)

    def rows(self) -> list[dict]:
        """One row per Newton step, pairing the two schemes."""
        out = []
        for a, b in zip(self.db.steps, self.sb.steps):
            out.append({
                "load_step": a.load_step, "newton_iter": a.newton_iter,
                "cg_db": a.cg_iterations, "cg_sb": b.cg_iterations,
                "res0_db": a.residual_initial, "res0_sb": b.residual_initial,
                "res_db": a.residual_final, "res_sb": b.residual_final,
            })
        return out


def compare_db_sb(layout: GridLayout, materials: MaterialMap, e, cfg: SolveConfig
                  ) -> ComparisonReport:
    """Run both schemes on the same load program and compare.

    ``e`` is a single load vector or a sequence of them.  The discrepancy
    per load step is ``max|eps_SB - eps_DB| / max|eps_DB|``.  Residual
    norms of the two schemes differ by the constant factor ``sqrt(w)``.
    """
    _require_equal_weights(layout)
    steps = [np.asarray(e, dtype=float)] if np.ndim(e) == 1 else list(e)
    db_res, db_rep = solve_load_program(layout, materials, cfg, load_steps=steps)
    sb_res, sb_rep = sb_load_program(layout, materials, cfg, load_steps=steps)
    disc = []
    for a, b in zip(db_res, sb_res):
        scale = np.abs(a.eps).max()
        disc.append(float(np.abs(b.eps - a.eps).max() / scale) if scale > 0 else 0.0)
    return ComparisonReport(db=db_rep, sb=sb_rep, discrepancy=disc)
