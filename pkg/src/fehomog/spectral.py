"""Dense oracles and element-by-element eigenvalue bounds.

The dense matrices here exist for verification on small grids only; the
production path never assembles them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import operators
from .grid import GridLayout, wrap_index
from .mandel import SQ2, mandel_pairs

__all__ = [
    "MAX_DENSE",
    "DenseOperator",
    "BoundSequences",
    "dense_gradient",
    "dense_weights",
    "dense_tangent",
    "dense_assemble",
    "dense_triple_product",
    "translation_basis",
    "fluctuation_basis",
    "preconditioned_eigenvalues",
    "pointwise_extremes",
    "eigenvalue_bounds",
    "condition_estimate",
]

MAX_DENSE = 4096


@dataclass(frozen=True, eq=False)
class DenseOperator:
    matrix: np.ndarray
    tag: str = "K"


@dataclass(frozen=True, eq=False)
class BoundSequences:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise ValueError("bound sequences differ in length")


def _guard(layout: GridLayout):
    n = layout.n_dofs
    if n > MAX_DENSE:
        raise MemoryError(f"{n} DOFs exceed the dense-oracle limit of {MAX_DENSE}")


def dense_gradient(layout: GridLayout) -> np.ndarray:
    """Explicit gradient matrix ``D``, rows ``(m, q, pixel)``, cols ``(c, node)``.

    Built entry by entry from the stencil derivative table and periodic
    index arithmetic, independently of the convolution code path.
    """
    _guard(layout)
    st = layout.stencil
    d, c, m = layout.dim, layout.components, layout.grad_components
    NQ, NI = layout.n_quad, layout.n_nodes
    D = np.zeros((m * NQ, c * NI))
    pairs = mandel_pairs(d) if layout.physics == "elasticity" else None
    for pix in np.ndindex(*layout.dims):
        for q in range(st.n_quad):
            row_q = wrap_index(layout, pix, local=q, where="quad")
            for k, (t, off) in enumerate(st.node_refs):
                col_i = wrap_index(layout, pix, off, local=t)
                g = st.dphi[q, k]
                if pairs is None:
                    for b in range(d):
                        D[b * NQ + row_q, col_i] += g[b]
                    continue
                for mm, (i, j) in enumerate(pairs):
                    r = mm * NQ + row_q
                    if i == j:
                        D[r, i * NI + col_i] += g[i]
                    else:
                        D[r, i * NI + col_i] += g[j] / SQ2
                        D[r, j * NI + col_i] += g[i] / SQ2
    return D


def dense_weights(layout: GridLayout) -> np.ndarray:
    w = layout.weight_field().reshape(-1)
    return np.diag(np.tile(w, layout.grad_components))


def dense_tangent(layout: GridLayout, tangent) -> np.ndarray:
    """Block matrix with diagonal sub-blocks ``C_ab[Q, Q]``."""
    m, NQ = layout.grad_components, layout.n_quad
    tangent = np.asarray(tangent, dtype=float)
    if tangent.ndim == 2:
        tangent = np.broadcast_to(tangent.reshape(m, m, *(1,) * (layout.dim + 1)),
                                  layout.tangent_shape)
    tangent = np.broadcast_to(tangent, layout.tangent_shape)
    C = np.zeros((m * NQ, m * NQ))
    idx = np.arange(NQ)
    for a in range(m):
        for b in range(m):
            C[a * NQ + idx, b * NQ + idx] = tangent[a, b].reshape(-1)
    return C


def dense_triple_product(layout: GridLayout, tangent) -> np.ndarray:
    """``D^T W C D`` from explicitly built factors."""
    D = dense_gradient(layout)
    return D.T @ dense_weights(layout) @ dense_tangent(layout, tangent) @ D


def dense_assemble(layout: GridLayout, tangent, tag: str = "K") -> DenseOperator:
    """Dense stiffness whose column ``j`` is ``apply_K(e_j)``."""
    _guard(layout)
    n = layout.n_dofs
    K = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        K[:, j] = operators.apply_K(layout, tangent, e.reshape(layout.nodal_shape)).reshape(-1)
        e[j] = 0.0
    scale = np.abs(K).max()
    if np.abs(K - K.T).max() > 1e-12 * scale:
        raise ArithmeticError("assembled stiffness is not symmetric")
    return DenseOperator(0.5 * (K + K.T), tag)


def translation_basis(layout: GridLayout) -> np.ndarray:
    """Orthonormal uniform translations, ``(n_dofs, c)``."""
    c, NI = layout.components, layout.n_nodes
    V = np.zeros((c * NI, c))
    for a in range(c):
        V[a * NI:(a + 1) * NI, a] = 1.0 / np.sqrt(NI)
    return V


def fluctuation_basis(layout: GridLayout) -> np.ndarray:
    """Orthonormal basis of the complement of the translations."""
    V = translation_basis(layout)
    return scipy.linalg.null_space(V.T)


def preconditioned_eigenvalues(K, K_ref, layout: GridLayout) -> np.ndarray:
    """Eigenvalues of the pencil ``(K, K_ref)`` on the fluctuation space."""
    Q = fluctuation_basis(layout)
    return scipy.linalg.eigh(Q.T @ K @ Q, Q.T @ K_ref @ Q, eigvals_only=True)


def pointwise_extremes(tangent, c_ref) -> tuple[np.ndarray, np.ndarray]:
    """Extreme generalised eigenvalues of ``(C(x), C_ref)`` per point.

    ``tangent`` is ``(m, m, ...)``; the pencil is reduced with the Cholesky
    factor of ``C_ref``.
    """
    tangent = np.asarray(tangent, dtype=float)
    m = tangent.shape[0]
    L = np.linalg.cholesky(np.asarray(c_ref, dtype=float))
    Linv = np.linalg.inv(L)
    pts = np.moveaxis(tangent.reshape(m, m, -1), -1, 0)
    S = Linv[None] @ pts @ Linv.T[None]
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    ev = np.linalg.eigvalsh(S)
    if ev[:, 0].min() <= 0:
        raise ValueError("tangent field is not positive definite")
    shape = tangent.shape[2:]
    return ev[:, 0].reshape(shape), ev[:, -1].reshape(shape)


def eigenvalue_bounds(layout: GridLayout, tangent, c_ref,
                      pixel_constant: bool = False,
                      replicate: int | None = None) -> BoundSequences:
    """Two-sided bounds on every eigenvalue of the preconditioned operator.

    For each node the lower (upper) bound is the minimum (maximum) over the
    quadrature points of all elements containing the node of the extreme
    generalised eigenvalues of ``C_ref^{-1} C``.  Each node bound is
    repeated ``replicate`` times (default: unknowns per node) and both sets
    are sorted.
    """
    c_ref = np.asarray(c_ref, dtype=float)
    if np.linalg.eigvalsh(0.5 * (c_ref + c_ref.T)).min() <= 0:
        raise ValueError("reference tangent is not positive definite")
    tangent = np.asarray(tangent, dtype=float)
    st = layout.stencil
    if tangent.ndim == 2:
        tangent = tangent.reshape(tangent.shape + (1,) * (layout.dim + 1))
    if pixel_constant:
        lo_p, hi_p = pointwise_extremes(tangent[:, :, 0], c_ref)
        lo_q = np.broadcast_to(lo_p, (st.n_quad,) + layout.dims)
        hi_q = np.broadcast_to(hi_p, (st.n_quad,) + layout.dims)
    else:
        tangent = np.broadcast_to(tangent, layout.tangent_shape)
        lo_q, hi_q = pointwise_extremes(tangent, c_ref)

    # per element: extremes over its quadrature points
    n_el = len(st.element_nodes)
    lo_e = np.stack([lo_q[st.quad_element == e].min(axis=0) for e in range(n_el)])
    hi_e = np.stack([hi_q[st.quad_element == e].max(axis=0) for e in range(n_el)])

    lo_n = np.full((st.n_nodes,) + layout.dims, np.inf)
    hi_n = np.full((st.n_nodes,) + layout.dims, -np.inf)
    axes = tuple(range(layout.dim))
    for e, nodes in enumerate(st.element_nodes):
        for k in nodes:
            t, off = st.node_refs[k]
            # element at pixel p touches node (t, p + off)
            lo_n[t] = np.minimum(lo_n[t], np.roll(lo_e[e], off, axis=axes))
            hi_n[t] = np.maximum(hi_n[t], np.roll(hi_e[e], off, axis=axes))

    rep = layout.components if replicate is None else int(replicate)
    lower = np.sort(np.repeat(lo_n.reshape(-1), rep))
    upper = np.sort(np.repeat(hi_n.reshape(-1), rep))
    return BoundSequences(lower=lower, upper=upper)


def condition_estimate(bounds: BoundSequences) -> float:
    """Upper bound ``max(upper) / min(lower)`` on the condition number."""
    if bounds.lower.min() <= 0:
        raise ValueError("bounds must be positive")
    return float(bounds.upper.max() / bounds.lower.min())
