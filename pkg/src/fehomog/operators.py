"""Matrix-free gradient, weighted divergence and stiffness operators.

The discrete gradient is a short convolution of the nodal field with the
stencil derivative table; it is evaluated in real space by shifting the
nodal arrays (periodic wrap) and contracting with the table.
"""
from __future__ import annotations

import numpy as np

from .grid import GridLayout
from .mandel import SQ2, mandel_pairs

__all__ = [
    "gradient_apply",
    "divergence_apply",
    "apply_tangent",
    "apply_K",
    "average",
    "weighted_inner",
]


def _axes(layout: GridLayout):
    return tuple(range(1, layout.dim + 1))


def _check(arr, shape, what):
    arr = np.asarray(arr, dtype=float)
    if arr.shape != shape:
        try:
            return arr.reshape(shape)
        except ValueError:
            raise ValueError(f"{what} has shape {arr.shape}, expected {shape}") from None
    return arr


def _gather(layout: GridLayout, u: np.ndarray) -> np.ndarray:
    """Values of ``u`` at every stencil node reference, ``(c, K, *dims)``."""
    refs = layout.stencil.node_refs
    out = np.empty((u.shape[0], len(refs)) + layout.dims)
    axes = _axes(layout)
    for k, (t, off) in enumerate(refs):
        if any(off):
            out[:, k] = np.roll(u[:, t], tuple(-o for o in off), axis=axes)
        else:
            out[:, k] = u[:, t]
    return out


def _scatter(layout: GridLayout, f: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_gather`: accumulate ``(c, K, *dims)`` onto nodes."""
    refs = layout.stencil.node_refs
    out = np.zeros((f.shape[0], layout.stencil.n_nodes) + layout.dims)
    axes = _axes(layout)
    for k, (t, off) in enumerate(refs):
        if any(off):
            out[:, t] += np.roll(f[:, k], off, axis=axes)
        else:
            out[:, t] += f[:, k]
    return out


def _full_gradient(layout: GridLayout, u: np.ndarray) -> np.ndarray:
    """du_a/dx_b at the quadrature points, shape ``(c, d, nq, *dims)``."""
    U = _gather(layout, u)
    c, K = U.shape[:2]
    dphi = layout.stencil.dphi  # (nq, K, d)
    nq, _, d = dphi.shape
    # (nq*d, K) @ (K, c*P)
    B = dphi.transpose(0, 2, 1).reshape(nq * d, K)
    Uf = U.transpose(1, 0, *range(2, U.ndim)).reshape(K, -1)
    H = (B @ Uf).reshape((nq, d, c) + layout.dims)
    return H.transpose(2, 1, 0, *range(3, H.ndim))


def _full_divergence(layout: GridLayout, T: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_full_gradient` (no weights)."""
    c, d, nq = T.shape[:3]
    dphi = layout.stencil.dphi
    K = dphi.shape[1]
    B = dphi.transpose(0, 2, 1).reshape(nq * d, K)
    Tf = T.transpose(2, 1, 0, *range(3, T.ndim)).reshape(nq * d, -1)
    F = (B.T @ Tf).reshape((K, c) + layout.dims)
    return _scatter(layout, F.transpose(1, 0, *range(2, F.ndim)))


def gradient_apply(layout: GridLayout, u) -> np.ndarray:
    """Symmetrised gradient in Mandel form (or plain gradient for heat)."""
    u = _check(u, layout.nodal_shape, "nodal field")
    H = _full_gradient(layout, u)
    if layout.physics == "thermal":
        return H[0]
    out = np.empty(layout.quad_shape)
    for m, (i, j) in enumerate(mandel_pairs(layout.dim)):
        out[m] = H[i, i] if i == j else (H[i, j] + H[j, i]) / SQ2
    return out


def divergence_apply(layout: GridLayout, s, weighted: bool = True) -> np.ndarray:
    """``D^T W s``, the weighted discrete divergence of a quadrature field.

    With ``weighted=False`` the plain transpose ``D^T s`` is returned.
    """
    s = _check(s, layout.quad_shape, "quadrature field")
    if weighted:
        s = s * layout.weight_field()[None]
    d = layout.dim
    if layout.physics == "thermal":
        T = s[None]
    else:
        T = np.zeros((d, d) + s.shape[1:])
        for m, (i, j) in enumerate(mandel_pairs(d)):
            if i == j:
                T[i, i] = s[m]
            else:
                T[i, j] = T[j, i] = s[m] / SQ2
    return _full_divergence(layout, T)


def apply_tangent(tangent, e) -> np.ndarray:
    """Pointwise ``C e`` for a tangent field or a uniform matrix."""
    tangent = np.asarray(tangent)
    if tangent.ndim == 2:
        m = tangent.shape[0]
        return (tangent @ e.reshape(m, -1)).reshape(e.shape)
    out = tangent[:, 0] * e[0]
    for j in range(1, e.shape[0]):
        out += tangent[:, j] * e[j]
    return out


def apply_K(layout: GridLayout, tangent, u) -> np.ndarray:
    """``D^T W C D u`` evaluated matrix-free."""
    u = _check(u, layout.nodal_shape, "nodal field")
    tangent = np.asarray(tangent, dtype=float)
    if tangent.ndim != 2 and tangent.shape[:2] != layout.tangent_shape[:2]:
        raise ValueError(f"tangent shape {tangent.shape} does not match "
                         f"{layout.tangent_shape}")
    return divergence_apply(layout, apply_tangent(tangent, gradient_apply(layout, u)))


def weighted_inner(layout: GridLayout, a, b) -> float:
    """``<a, b>_W`` for quadrature fields."""
    return float(np.sum(a * b * layout.weight_field()[None]))


def average(layout: GridLayout, s) -> np.ndarray:
    """Volume average of a quadrature field, one value per component."""
    s = _check(s, layout.quad_shape, "quadrature field")
    w = layout.weight_field()
    return np.array([np.sum(s[i] * w) for i in range(s.shape[0])]) / layout.cell.volume
