"""Reference-material preconditioner diagonalised by the FFT.

For a spatially uniform reference tangent the stiffness matrix consists of
``(d*Nn)**2`` block-circulant blocks.  Each block is diagonalised by the
discrete Fourier transform, so the whole operator falls apart into one
small Hermitian ``(d*Nn) x (d*Nn)`` matrix per frequency.  Only the
zero-frequency matrix is singular (its kernel are the uniform
translations) and is pseudo-inverted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from . import operators
from .grid import GridLayout

__all__ = [
    "FrequencyBlockDiag",
    "SingularBlockError",
    "check_reference",
    "translation_kernel",
    "assemble_reference",
    "invert_blocks",
    "apply_preconditioner",
    "build_preconditioner",
    "set_workers",
]

_WORKERS = 1


def set_workers(n: int) -> None:
    """Number of threads handed to the FFT provider."""
    global _WORKERS
    _WORKERS = max(1, int(n))


def _rfftn(x, axes):
    return scipy.fft.rfftn(x, axes=axes, workers=_WORKERS)


def _irfftn(x, shape, axes):
    return scipy.fft.irfftn(x, s=shape, axes=axes, workers=_WORKERS)


class SingularBlockError(np.linalg.LinAlgError):
    """A non-zero-frequency block could not be inverted."""


@dataclass(frozen=True, eq=False)
class FrequencyBlockDiag:
    """Per-frequency blocks over the real-FFT half spectrum.

    ``blocks`` has shape ``(*rdims, n, n)`` with ``n = c*Nn`` DOF types,
    ordered component-major like the nodal fields.
    """

    blocks: np.ndarray
    dims: tuple[int, ...]
    components: int
    inverted: bool = False
    weighted: bool = True
    c_ref: np.ndarray | None = None

    @property
    def n_types(self) -> int:
        return self.blocks.shape[-1]

    @property
    def pseudo_inverted(self) -> np.ndarray:
        """Flag per stored frequency: True where a pseudo-inverse was used."""
        flags = np.zeros(self.blocks.shape[:-2], dtype=bool)
        if self.inverted:
            flags[(0,) * len(self.dims)] = True
        return flags


def check_reference(c_ref) -> np.ndarray:
    c_ref = np.asarray(c_ref, dtype=float)
    if c_ref.ndim != 2 or c_ref.shape[0] != c_ref.shape[1]:
        raise ValueError("reference tangent must be a square matrix")
    scale = np.abs(c_ref).max()
    if not np.all(np.isfinite(c_ref)) or scale == 0:
        raise ValueError("reference tangent must be finite and non-zero")
    if not np.allclose(c_ref, c_ref.T, rtol=0, atol=1e-12 * scale):
        raise ValueError("reference tangent must be symmetric")
    if np.linalg.eigvalsh(c_ref).min() <= 0:
        raise ValueError("reference tangent must be positive definite")
    return 0.5 * (c_ref + c_ref.T)


def translation_kernel(components: int, n_nodes: int) -> np.ndarray:
    """Orthonormal basis of the zero-frequency kernel, ``(c*Nn, c)``.

    A uniform translation of component ``a`` moves every node type of that
    component by the same amount.
    """
    c, nn = components, n_nodes
    V = np.zeros((c * nn, c))
    for a in range(c):
        V[a * nn:(a + 1) * nn, a] = 1.0 / np.sqrt(nn)
    return V


def assemble_reference(layout: GridLayout, c_ref, weighted: bool = True,
                       hermitian_rtol: float = 1e-12) -> FrequencyBlockDiag:
    """Fourier blocks of ``D^T W C_ref D`` by impulse probing.

    One matrix-free operator application per DOF type yields the first
    column of every block in that block column; its FFT is the block
    diagonal.  With ``weighted=False`` the quadrature weights are left out.
    """
    c_ref = check_reference(c_ref)
    m = layout.grad_components
    if c_ref.shape != (m, m):
        raise ValueError(f"reference tangent must be {m}x{m}")
    c, nn = layout.components, layout.stencil.n_nodes
    n = c * nn
    pixel_axes = tuple(range(layout.dim))
    rdims = layout.dims[:-1] + (layout.dims[-1] // 2 + 1,)
    blocks = np.empty(rdims + (n, n), dtype=complex)
    origin = (0,) * layout.dim
    for beta in range(n):
        impulse = np.zeros(layout.nodal_shape)
        impulse[(beta // nn, beta % nn) + origin] = 1.0
        grad = operators.gradient_apply(layout, impulse)
        col = operators.divergence_apply(
            layout, operators.apply_tangent(c_ref, grad), weighted=weighted)
        col = col.reshape((n,) + layout.dims)
        for alpha in range(n):
            blocks[..., alpha, beta] = _rfftn(col[alpha], axes=pixel_axes)
    herm = np.conj(np.swapaxes(blocks, -1, -2))
    scale = np.abs(blocks).max()
    err = np.abs(blocks - herm).max()
    if err > hermitian_rtol * scale:
        raise ArithmeticError(f"assembled blocks are not Hermitian (error {err:.3e})")
    blocks = 0.5 * (blocks + herm)
    return FrequencyBlockDiag(blocks=blocks, dims=layout.dims, components=c,
                              weighted=weighted, c_ref=c_ref)


def _zero_block_pinv(Z: np.ndarray, V: np.ndarray, s: float) -> np.ndarray:
    # Z is Hermitian PSD with kernel span(V), s > 0 any scale:
    # (Z + s V V^H)^{-1} = Z^+ + V V^H / s
    P = V @ V.T
    return np.linalg.inv(Z + s * P) - P / s


def invert_blocks(blocks: FrequencyBlockDiag,
                  singular_rtol: float = 1e-12) -> FrequencyBlockDiag:
    """Invert every block; pseudo-invert the zero-frequency block.

    Raises
    ------
    SingularBlockError
        If any non-zero frequency block is numerically singular.
    """
    if blocks.inverted:
        raise ValueError("blocks are already inverted")
    B = blocks.blocks
    n = B.shape[-1]
    origin = (0,) * len(blocks.dims)
    V = translation_kernel(blocks.components, n // blocks.components)
    eig = np.linalg.eigvalsh(B)
    top = eig[..., -1].max()
    low = eig[..., 0].copy()
    low[origin] = np.inf
    if np.any(low <= singular_rtol * top):
        bad = np.unravel_index(np.argmin(low), low.shape)
        raise SingularBlockError(
            f"frequency block {bad} is singular (min eigenvalue {low[bad]:.3e}); "
            "the stencil/reference pairing is invalid")
    Z = B[origin]
    zeig = np.linalg.eigvalsh(Z)
    n_null = int(np.count_nonzero(zeig < singular_rtol * top))
    if n_null != V.shape[1]:
        raise SingularBlockError(
            f"zero-frequency block has {n_null} null eigenvalues, expected {V.shape[1]}")
    Bs = B.copy()
    Bs[origin] = np.eye(n)
    inv = np.linalg.inv(Bs)
    inv[origin] = _zero_block_pinv(Z, V, max(np.trace(Z).real / n, top))
    inv = 0.5 * (inv + np.conj(np.swapaxes(inv, -1, -2)))
    return FrequencyBlockDiag(blocks=inv, dims=blocks.dims, components=blocks.components,
                              inverted=True, weighted=blocks.weighted, c_ref=blocks.c_ref)


def apply_preconditioner(layout: GridLayout, inv_blocks: FrequencyBlockDiag, r) -> np.ndarray:
    """``F^H K_hat^+ F r``: FFT, per-frequency block product, inverse FFT."""
    if not inv_blocks.inverted:
        raise ValueError("preconditioner blocks have not been inverted")
    r = np.asarray(r, dtype=float)
    if r.shape != layout.nodal_shape:
        raise ValueError(f"nodal field has shape {r.shape}, expected {layout.nodal_shape}")
    n = inv_blocks.n_types
    axes = tuple(range(1, layout.dim + 1))
    rhat = _rfftn(r.reshape((n,) + layout.dims), axes=axes)
    # (n, *rdims) -> (*rdims, n)
    rhat = np.moveaxis(rhat, 0, -1)
    zhat = np.einsum("...ij,...j->...i", inv_blocks.blocks, rhat)
    z = _irfftn(np.moveaxis(zhat, -1, 0), shape=layout.dims, axes=axes)
    return z.reshape(layout.nodal_shape)


def build_preconditioner(layout: GridLayout, c_ref, weighted: bool = True) -> FrequencyBlockDiag:
    """Assemble and invert in one call."""
    return invert_blocks(assemble_reference(layout, c_ref, weighted=weighted))
