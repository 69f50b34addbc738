"""Built-in benchmark problems.

``square-inclusion``
    Thermal conduction in a square cell with a centred square inclusion
    (optionally rotated by 45 degrees).  Matrix conductivity 100 I, the
    inclusion is ``ratio`` times more conductive.
``coated-sphere``
    Elastic cube with a core sphere (phase 0) inside a coating shell
    (phase 1) embedded in a matrix (phase 2).  The core and coating bulk
    moduli are balanced so that the coated sphere is neutral with respect
    to a matrix of bulk modulus 1, i.e. a hydrostatic load sees a
    homogeneous material.
``random-two-phase``
    Independent random phase per pixel.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import brentq

from .grid import CellSpec, StencilKind, mandel_size
from .mandel import Conductivity, LinearElastic
from .problem import Problem
from .solvers import SolveConfig

__all__ = [
    "TEMPLATES",
    "build_template",
    "square_inclusion",
    "hashin_bulk",
    "balanced_moduli",
    "coated_sphere",
    "random_two_phase",
]

R_CORE = 0.2
R_COAT = 0.4
K_EFF = 1.0
NU_RATIO = 0.6  # G / K in every phase


def _pixel_centres(dims, lengths):
    axes = [(np.arange(n) + 0.5) * (L / n) for n, L in zip(dims, lengths)]
    return np.meshgrid(*axes, indexing="ij")


def square_inclusion(n: int = 128, size: float = 0.5, rotated: bool = False,
                     kappa: float = 100.0, ratio: float = 100.0, stencil="TwoTriangles",
                     load=(0.01, 0.0), eta_cg: float = 1e-8) -> Problem:
    """Square inclusion of edge ``size`` (fraction of the cell edge).

    With ``rotated=True`` the square is turned by 45 degrees so that its
    half diagonal is ``size / sqrt(2)``.
    """
    if not 0 < size < 1:
        raise ValueError(f"size must lie in (0, 1), got {size}")
    cell = CellSpec((int(n), int(n)), (1.0, 1.0))
    x, y = _pixel_centres(cell.dims, cell.lengths)
    dx, dy = np.abs(x - 0.5), np.abs(y - 0.5)
    if rotated:
        inside = dx + dy <= size / np.sqrt(2.0)
    else:
        inside = np.maximum(dx, dy) <= size / 2
    phases = inside.astype(int)
    catalog = {0: Conductivity.isotropic(kappa, 2), 1: Conductivity.isotropic(kappa * ratio, 2)}
    cfg = SolveConfig(eta_cg=eta_cg, load_steps=[np.asarray(load, dtype=float)])
    return Problem(cell, StencilKind.parse(stencil), "thermal", phases, catalog, cfg,
                   name="square-inclusion")


def hashin_bulk(K1: float, K2: float, G2: float, c: float) -> float:
    """Bulk modulus of a coated sphere: core ``K1``, coating ``(K2, G2)``,
    core volume fraction ``c`` of the coated sphere."""
    return K2 + c * (K1 - K2) / (1.0 + (1.0 - c) * (K1 - K2) / (K2 + 4.0 * G2 / 3.0))


def balanced_moduli(contrast: float, k_eff: float = K_EFF, r1: float = R_CORE,
                    r2: float = R_COAT, g_ratio: float = NU_RATIO):
    """Core and coating moduli ``(K1, G1, K2, G2)`` with ``K2 = contrast K1``
    whose coated sphere has bulk modulus ``k_eff``."""
    if contrast <= 0:
        raise ValueError("contrast must be positive")
    c = (r1 / r2) ** 3

    def f(logk1):
        k1 = np.exp(logk1)
        return hashin_bulk(k1, contrast * k1, g_ratio * contrast * k1, c) - k_eff

    # the effective modulus is homogeneous of degree one in K1
    lo, hi = np.log(k_eff) - 40.0, np.log(k_eff) + 40.0
    K1 = float(np.exp(brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)))
    K2 = contrast * K1
    return K1, g_ratio * K1, K2, g_ratio * K2


def coated_sphere(n: int = 32, contrast: float = 1000.0, stencil="TrilinearHex",
                  load=(1.0, 0.0, 0.0, 0.0, 0.0, 0.0), reference="mean",
                  eta_cg: float = 1e-6) -> Problem:
    """Coated sphere centred in the unit cube, sampled at pixel centres."""
    cell = CellSpec((int(n),) * 3, (1.0,) * 3)
    x, y, z = _pixel_centres(cell.dims, cell.lengths)
    r = np.sqrt((x - 0.5) ** 2 + (y - 0.5) ** 2 + (z - 0.5) ** 2)
    phases = np.full(cell.dims, 2, dtype=int)
    phases[r <= R_COAT] = 1
    phases[r <= R_CORE] = 0
    K1, G1, K2, G2 = balanced_moduli(contrast)
    catalog = {
        0: LinearElastic.isotropic(K1, G1, 3),
        1: LinearElastic.isotropic(K2, G2, 3),
        2: LinearElastic.isotropic(K_EFF, NU_RATIO * K_EFF, 3),
    }
    cfg = SolveConfig(eta_cg=eta_cg, reference=reference,
                      load_steps=[np.asarray(load, dtype=float)])
    return Problem(cell, StencilKind.parse(stencil), "elasticity", phases, catalog, cfg,
                   name="coated-sphere")


def random_two_phase(n: int = 16, dim: int = 2, fraction: float = 0.5,
                     contrast: float = 10.0, physics: str = "elasticity",
                     stencil=None, seed: int = 0, load=None) -> Problem:
    """Each pixel is phase 1 with probability ``fraction``."""
    rng = np.random.default_rng(seed)
    cell = CellSpec((int(n),) * dim, (1.0,) * dim)
    phases = (rng.random(cell.dims) < fraction).astype(int)
    if stencil is None:
        stencil = "TwoTriangles" if dim == 2 else "TrilinearHex"
    if physics == "thermal":
        catalog = {0: Conductivity.isotropic(1.0, dim),
                   1: Conductivity.isotropic(contrast, dim)}
        m = dim
    else:
        catalog = {0: LinearElastic.isotropic(1.0, 0.6, dim),
                   1: LinearElastic.isotropic(contrast, 0.6 * contrast, dim)}
        m = mandel_size(dim)
    if load is None:
        load = np.zeros(m)
        load[0] = 0.01
    cfg = SolveConfig(load_steps=[np.asarray(load, dtype=float)])
    return Problem(cell, StencilKind.parse(stencil), physics, phases, catalog, cfg,
                   name="random-two-phase")


TEMPLATES = {
    "square-inclusion": square_inclusion,
    "coated-sphere": coated_sphere,
    "random-two-phase": random_two_phase,
}


def build_template(name: str, **params) -> Problem:
    if name not in TEMPLATES:
        raise ValueError(f"unknown template {name!r}; expected one of {sorted(TEMPLATES)}")
    return TEMPLATES[name](**params)
