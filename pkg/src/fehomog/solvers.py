"""Preconditioned CG and the displacement-based Newton driver."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import operators
from .grid import GridLayout
from .mandel import MaterialModel
from .preconditioner import FrequencyBlockDiag, apply_preconditioner, build_preconditioner

__all__ = [
    "IndefiniteOperatorError",
    "MaterialMap",
    "SolveConfig",
    "StepRecord",
    "SolveReport",
    "PCGResult",
    "NewtonResult",
    "pcg_solve",
    "reference_tangent",
    "newton_solve",
    "solve_load_program",
    "average_stress",
]

log = logging.getLogger(__name__)

ROUNDOFF = 1e-13


class IndefiniteOperatorError(ArithmeticError):
    """CG met a direction of non-positive curvature."""


class MaterialMap:
    """Phase id per pixel plus a catalog ``phase id -> MaterialModel``."""

    def __init__(self, phases, catalog: dict[int, MaterialModel]):
        self.phases = np.asarray(phases, dtype=int)
        self.catalog = dict(catalog)
        missing = set(np.unique(self.phases).tolist()) - set(self.catalog)
        if missing:
            raise ValueError(f"phase ids {sorted(missing)} have no catalog entry")
        self.internal_width = max((mdl.internal_width for mdl in self.catalog.values()),
                                  default=0)

    @classmethod
    def uniform(cls, dims, model: MaterialModel) -> "MaterialMap":
        return cls(np.zeros(dims, dtype=int), {0: model})

    def check(self, layout: GridLayout):
        if self.phases.shape != layout.dims:
            raise ValueError(f"phase map has shape {self.phases.shape}, grid is {layout.dims}")

    def initial_state(self, layout: GridLayout) -> np.ndarray:
        return np.zeros((self.internal_width, layout.stencil.n_quad) + layout.dims)

    @property
    def is_linear(self) -> bool:
        return all(mdl.internal_width == 0 for mdl in self.catalog.values())

    def evaluate(self, layout: GridLayout, eps, g=None):
        """Stress, tangent and trial internal state on the quadrature field."""
        self.check(layout)
        m, nq = layout.grad_components, layout.stencil.n_quad
        if g is None:
            g = self.initial_state(layout)
        sig = np.empty(layout.quad_shape)
        tan = np.empty(layout.tangent_shape)
        g_new = g.copy()
        for pid, model in self.catalog.items():
            mask = self.phases == pid
            if not mask.any():
                continue
            e = eps[:, :, mask].reshape(m, -1).T
            w = model.internal_width
            gi = g[:w, :, mask].reshape(w, -1).T if w else None
            s, c, gn = model.evaluate(e, gi)
            npix = int(mask.sum())
            sig[:, :, mask] = s.T.reshape(m, nq, npix)
            tan[:, :, :, mask] = c.transpose(1, 2, 0).reshape(m, m, nq, npix)
            if w:
                g_new[:w, :, mask] = gn.T.reshape(w, nq, npix)
        if not (np.all(np.isfinite(sig)) and np.all(np.isfinite(tan))):
            raise FloatingPointError("constitutive update produced non-finite values")
        return sig, tan, g_new

    def shifted(self, shift) -> "MaterialMap":
        return MaterialMap(np.roll(self.phases, shift, axis=tuple(range(self.phases.ndim))),
                           self.catalog)


@dataclass
class SolveConfig:
    eta_newton: float = 1e-5
    eta_cg: float = 1e-5
    max_newton: int = 50
    max_cg: int = 1000
    load_steps: list = field(default_factory=list)
    reference: str | np.ndarray = "mean"  # "mean" | "identity" | explicit matrix
    reference_scale: float = 1.0
    reassembly_threshold: float = 0.1
    newton_norm: str = "strain"  # or "displacement"

    def __post_init__(self):
        for name in ("eta_newton", "eta_cg"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.max_newton < 1 or self.max_cg < 1:
            raise ValueError("iteration caps must be at least 1")
        if self.newton_norm not in ("strain", "displacement"):
            raise ValueError(f"unknown newton_norm {self.newton_norm!r}")
        if isinstance(self.reference, str) and self.reference not in ("mean", "identity"):
            raise ValueError(f"unknown reference policy {self.reference!r}")


@dataclass
class StepRecord:
    load_step: int
    newton_iter: int
    cg_iterations: int
    residual_initial: float
    residual_final: float
    increment_ratio: float
    reassembled: bool
    history: list[float] = field(default_factory=list, repr=False)


@dataclass
class SolveReport:
    steps: list[StepRecord] = field(default_factory=list)
    cause: str = "converged"
    newton_counts: list[int] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=lambda: {
        "constitutive": 0.0, "assembly": 0.0, "pcg": 0.0})

    @property
    def converged(self) -> bool:
        return self.cause == "converged"

    def cg_counts(self, load_step: int | None = None) -> list[int]:
        return [s.cg_iterations for s in self.steps
                if load_step is None or s.load_step == load_step]

    @property
    def total_cg(self) -> int:
        return sum(s.cg_iterations for s in self.steps)


class PCGResult(NamedTuple):
    x: np.ndarray
    iterations: int
    history: list[float]
    converged: bool


def pcg_solve(apply_A: Callable, apply_Minv: Callable, b, eta: float, it_max: int,
              x0=None, inner: Callable | None = None, atol: float = 0.0) -> PCGResult:
    """Preconditioned CG stopped on the relative ``M^{-1}``-norm of the residual.

    ``||r||_{M^{-1}}^2 = r . M^{-1} r`` is the scalar CG already computes,
    so the stopping test costs nothing extra.  Returns the last iterate with
    ``converged=False`` when ``it_max`` is hit.  A right-hand side whose
    norm does not exceed ``atol`` is treated as zero.

    Raises
    ------
    IndefiniteOperatorError
        If ``p . A p <= 0`` for a search direction.
    """
    dot = inner or (lambda a, c: float(np.vdot(a, c)))
    b = np.asarray(b, dtype=float)
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float)
        r = b - apply_A(x)
    z = apply_Minv(r)
    rz = dot(r, z)
    # round-off can make r.z of a vanishing residual slightly negative
    if abs(rz) <= atol * atol:
        return PCGResult(x, 0, [np.sqrt(abs(rz))], True)
    if rz < 0:
        raise IndefiniteOperatorError("preconditioner is not positive semi-definite")
    norm0 = np.sqrt(rz)
    history = [norm0]
    p = z.copy()
    for k in range(1, it_max + 1):
        Ap = apply_A(p)
        pAp = dot(p, Ap)
        if not pAp > 0:
            raise IndefiniteOperatorError(
                f"non-positive curvature p.Ap={pAp:.3e} at CG iteration {k}")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = apply_Minv(r)
        rz_new = dot(r, z)
        history.append(np.sqrt(max(rz_new, 0.0)))
        if history[-1] <= eta * norm0:
            return PCGResult(x, k, history, True)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PCGResult(x, it_max, history, False)


def reference_tangent(layout: GridLayout, tangent, cfg: SolveConfig) -> np.ndarray:
    """Reference tangent chosen by the configured policy."""
    m = layout.grad_components
    if isinstance(cfg.reference, str):
        if cfg.reference == "identity":
            return cfg.reference_scale * np.eye(m)
        w = layout.weight_field()
        m = tangent.shape[0]
        mean = tangent.reshape(m, m, -1) @ w.reshape(-1) / layout.cell.volume
        return 0.5 * (mean + mean.T)
    return np.asarray(cfg.reference, dtype=float)


def average_stress(layout: GridLayout, sigma) -> np.ndarray:
    """``(1/|Y|) sum_Q w_Q sigma(Q)`` per component."""
    return operators.average(layout, sigma)


def _macro_field(layout: GridLayout, e) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if e.shape != (layout.grad_components,):
        raise ValueError(f"macroscopic load needs {layout.grad_components} components, "
                         f"got {e.shape}")
    if not np.all(np.isfinite(e)):
        raise ValueError("macroscopic load is not finite")
    return np.broadcast_to(e.reshape((-1,) + (1,) * (layout.dim + 1)), layout.quad_shape)


def _remove_mean(layout: GridLayout, u):
    axes = tuple(range(1, u.ndim))
    return u - u.mean(axis=axes, keepdims=True)


class _Reference:
    """Preconditioner cache implementing the reassembly policy."""

    def __init__(self, layout, cfg, weighted=True):
        self.layout, self.cfg, self.weighted = layout, cfg, weighted
        self.c_ref = None
        self.blocks: FrequencyBlockDiag | None = None
        self.assemblies = 0

    def update(self, tangent) -> bool:
        c_new = reference_tangent(self.layout, tangent, self.cfg)
        if self.c_ref is not None:
            if not (isinstance(self.cfg.reference, str) and self.cfg.reference == "mean"):
                return False
            change = np.linalg.norm(c_new - self.c_ref) / np.linalg.norm(self.c_ref)
            if change <= self.cfg.reassembly_threshold:
                return False
        self.c_ref = c_new
        self.blocks = build_preconditioner(self.layout, c_new, weighted=self.weighted)
        self.assemblies += 1
        return True


@dataclass
class NewtonResult:
    u: np.ndarray
    g: np.ndarray
    eps: np.ndarray
    sigma: np.ndarray
    report: SolveReport
    tangent: np.ndarray | None = None


def newton_solve(layout: GridLayout, materials: MaterialMap, g, e, cfg: SolveConfig,
                 u0=None, report: SolveReport | None = None, load_step: int = 0,
                 precond: _Reference | None = None) -> NewtonResult:
    """One load step of the Newton-PCG scheme for macroscopic load ``e``.

    Each Newton iteration evaluates stress and tangent at
    ``e + D u``, forms ``b = -D^T W sigma`` and solves ``K du = b`` by PCG
    with the reference preconditioner.  The iteration stops when the
    increment is small relative to the fluctuation (strain norm by
    default), or when the residual has fallen to ``eta_cg`` times its
    value at the start of the load step.  Internal variables are returned
    updated only if the step converged.
    """
    materials.check(layout)
    report = report if report is not None else SolveReport()
    precond = precond or _Reference(layout, cfg)
    E = _macro_field(layout, e)
    g = materials.initial_state(layout) if g is None else g
    u = np.zeros(layout.nodal_shape) if u0 is None else np.array(u0, dtype=float)
    u = _remove_mean(layout, u)
    W = layout.weight_field()[None]
    du = du_grad = None
    res0 = None
    n_steps = 0
    cause = "newton-cap"
    current = None  # (grad_u, sig, tan, g_trial) at the present iterate
    for it in range(cfg.max_newton + 1):
        t0 = time.perf_counter()
        grad_u = operators.gradient_apply(layout, u)
        sig, tan, g_trial = materials.evaluate(layout, E + grad_u, g)
        current = (grad_u, sig, tan, g_trial)
        b = -operators.divergence_apply(layout, sig)
        t1 = time.perf_counter()
        reassembled = precond.update(tan)
        t2 = time.perf_counter()
        report.timings["constitutive"] += t1 - t0
        report.timings["assembly"] += t2 - t1

        def Minv(r):
            return apply_preconditioner(layout, precond.blocks, r)

        if it > 0:
            if cfg.newton_norm == "strain":
                num = np.sqrt(np.sum(du_grad ** 2 * W))
                den = np.sqrt(np.sum(grad_u ** 2 * W))
            else:
                num, den = np.linalg.norm(du), np.linalg.norm(u)
            report.steps[-1].increment_ratio = float(num / den) if den > 0 else 0.0
            if num <= cfg.eta_newton * den:
                cause = "converged"
                break
            # equilibrium already reached to the CG tolerance
            res = np.sqrt(max(float(np.vdot(b, Minv(b))), 0.0))
            if res <= cfg.eta_cg * res0:
                cause = "converged"
                break
            if it == cfg.max_newton:
                break

        def A(v):
            return operators.apply_K(layout, tan, v)

        # below this the right-hand side is round-off of a balanced stress
        lam = np.linalg.eigvalsh(precond.c_ref)[-1]
        floor = ROUNDOFF * np.sqrt(operators.weighted_inner(layout, sig, sig) / lam)
        t3 = time.perf_counter()
        sol = pcg_solve(A, Minv, b, cfg.eta_cg, cfg.max_cg, atol=floor)
        report.timings["pcg"] += time.perf_counter() - t3
        if res0 is None:
            res0 = sol.history[0]
        n_steps += 1
        report.steps.append(StepRecord(load_step, n_steps, sol.iterations, sol.history[0],
                                       sol.history[-1], np.nan, reassembled, sol.history))
        log.debug("load %d newton %d: %d CG iterations, |r0|=%.3e",
                  load_step, n_steps, sol.iterations, sol.history[0])
        du = _remove_mean(layout, sol.x)
        u = u + du
        current = None
        if not sol.converged:
            cause = "cg-stall"
            break
        if materials.is_linear:
            # the quadratic model is exact: one solve is the answer
            cause = "converged"
            break
        du_grad = operators.gradient_apply(layout, du)

    if current is None:
        grad_u = operators.gradient_apply(layout, u)
        current = (grad_u, *materials.evaluate(layout, E + grad_u, g))
    grad_u, sig, tan, g_trial = current
    report.newton_counts.append(n_steps)
    if report.cause == "converged":
        report.cause = cause
    g_out = g_trial if cause == "converged" else g
    return NewtonResult(u=u, g=g_out, eps=E + grad_u, sigma=sig, report=report, tangent=tan)


def solve_load_program(layout: GridLayout, materials: MaterialMap, cfg: SolveConfig,
                       load_steps: Sequence | None = None,
                       callback: Callable | None = None) -> tuple[list[NewtonResult], SolveReport]:
    """Run every load step, warm-starting each from the previous solution.

    Stops at the first load step that fails to converge.
    """
    steps = cfg.load_steps if load_steps is None else load_steps
    if len(steps) == 0:
        raise ValueError("load program is empty")
    report = SolveReport()
    precond = _Reference(layout, cfg)
    g = materials.initial_state(layout)
    u = None
    results = []
    for k, e in enumerate(steps):
        res = newton_solve(layout, materials, g, e, cfg, u0=u, report=report,
                           load_step=k, precond=precond)
        results.append(res)
        if callback is not None:
            callback(k, res)
        if not report.converged:
            break
        g, u = res.g, res.u
    return results, report
