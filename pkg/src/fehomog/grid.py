"""Periodic cells, discretisation stencils and index arithmetic.

Every pixel (voxel) of the periodic grid carries one copy of a
discretisation stencil: a few nodes, a few elements and the quadrature
points of those elements.  The stencil tables below are evaluated once in
physical units and reused for every pixel.

Array layouts used throughout the package::

    nodal field      (components, Nn, *dims)
    quadrature field (gradient components, nq, *dims)
    tangent field    (m, m, nq, *dims)

Flattening these arrays in C order gives the component-major ordering of
the discrete operators (all nodes of component 1, then component 2, ...).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "StencilKind",
    "CellSpec",
    "StencilSpec",
    "GridLayout",
    "build_grid",
    "build_stencil",
    "wrap_index",
    "unflatten_index",
    "mandel_size",
]


class StencilKind(str, Enum):
    BILINEAR_QUAD = "BilinearQuad"
    TWO_TRIANGLES = "TwoTriangles"
    FOUR_TRIANGLES_TWO_NODE = "FourTrianglesTwoNode"
    TRILINEAR_HEX = "TrilinearHex"

    @property
    def dim(self) -> int:
        return 3 if self is StencilKind.TRILINEAR_HEX else 2

    @classmethod
    def parse(cls, kind: "StencilKind | str") -> "StencilKind":
        if isinstance(kind, cls):
            return kind
        for member in cls:
            if kind in (member.value, member.name):
                return member
        raise ValueError(f"unknown stencil kind {kind!r}; "
                         f"expected one of {[m.value for m in cls]}")


def mandel_size(d: int) -> int:
    return d * (d + 1) // 2


@dataclass(frozen=True)
class CellSpec:
    """Rectangular periodic cell discretised by a regular pixel grid."""

    dims: tuple[int, ...]
    lengths: tuple[float, ...]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        lengths = tuple(float(x) for x in self.lengths)
        if len(dims) not in (2, 3):
            raise ValueError(f"cell must be 2D or 3D, got dims={dims}")
        if len(lengths) != len(dims):
            raise ValueError("dims and lengths must have the same length")
        if any(n < 2 for n in dims):
            raise ValueError(f"need at least 2 pixels per axis, got dims={dims}")
        if any(not np.isfinite(x) or x <= 0 for x in lengths):
            raise ValueError(f"cell lengths must be positive, got {lengths}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "lengths", lengths)

    @property
    def dim(self) -> int:
        return len(self.dims)

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def spacing(self) -> np.ndarray:
        return np.array(self.lengths) / np.array(self.dims)

    @property
    def pixel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))


@dataclass(frozen=True, eq=False)
class StencilSpec:
    """Per-pixel discretisation pattern.

    ``node_refs`` lists the (node type, pixel offset) pairs the stencil
    touches; ``dphi[q, k, beta]`` is the derivative along ``x_beta`` of the
    basis function of ``node_refs[k]`` at quadrature point ``q``.  Every
    quadrature point belongs to exactly one element; ``element_nodes`` lists
    the ``node_refs`` indices spanning each element (the basis-function
    supports are unions of these elements).
    """

    kind: StencilKind
    dim: int
    n_nodes: int
    node_positions: np.ndarray  # (Nn, d), fractions of the pixel
    node_refs: tuple[tuple[int, tuple[int, ...]], ...]
    weights: np.ndarray  # (nq,)
    dphi: np.ndarray  # (nq, K, d)
    quad_positions: np.ndarray  # (nq, d), fractions of the pixel
    quad_element: np.ndarray  # (nq,) element id
    element_nodes: tuple[tuple[int, ...], ...]

    @property
    def n_quad(self) -> int:
        return len(self.weights)

    @property
    def equal_weights(self) -> bool:
        return bool(np.allclose(self.weights, self.weights[0], rtol=1e-14, atol=0))


def _simplex_gradients(vertices: np.ndarray) -> np.ndarray:
    """Gradients of the linear barycentric functions of a simplex, (d+1, d)."""
    d = vertices.shape[1]
    A = np.hstack([np.ones((d + 1, 1)), vertices])
    # columns of inv(A) hold the coefficients (c0, grad) of each barycentric
    return np.linalg.inv(A)[1:, :].T


def _multilinear(dim: int, spacing: np.ndarray):
    corners = list(itertools.product((0, 1), repeat=dim))
    g = 0.5 / np.sqrt(3.0)
    gauss = list(itertools.product((0.5 - g, 0.5 + g), repeat=dim))
    dphi = np.zeros((len(gauss), len(corners), dim))
    for q, xi in enumerate(gauss):
        for k, c in enumerate(corners):
            factors = [xi[a] if c[a] else 1.0 - xi[a] for a in range(dim)]
            for beta in range(dim):
                sign = 1.0 if c[beta] else -1.0
                others = np.prod([factors[a] for a in range(dim) if a != beta])
                dphi[q, k, beta] = sign * others / spacing[beta]
    node_refs = tuple((0, c) for c in corners)
    nq = len(gauss)
    return dict(
        n_nodes=1,
        node_positions=np.zeros((1, dim)),
        node_refs=node_refs,
        dphi=dphi,
        quad_positions=np.array(gauss),
        quad_element=np.zeros(nq, dtype=int),
        element_nodes=(tuple(range(len(corners))),),
        nq=nq,
    )


def _triangles(triangles, node_refs, positions, spacing):
    """Tables for a pixel split into linear simplices, one point per element."""
    nq = len(triangles)
    dim = len(spacing)
    dphi = np.zeros((nq, len(node_refs), dim))
    centroids = []
    for q, tri in enumerate(triangles):
        verts = np.array([positions[k] for k in tri]) * spacing
        grads = _simplex_gradients(verts)
        for j, k in enumerate(tri):
            dphi[q, k] = grads[j]
        centroids.append(np.mean([positions[k] for k in tri], axis=0))
    return dphi, np.array(centroids)


def build_stencil(kind: StencilKind | str, spacing) -> StencilSpec:
    kind = StencilKind.parse(kind)
    spacing = np.asarray(spacing, dtype=float)
    dim = kind.dim
    if len(spacing) != dim:
        raise ValueError(f"{kind.value} is a {dim}D stencil, "
                         f"cell is {len(spacing)}D")
    vp = float(np.prod(spacing))

    if kind in (StencilKind.BILINEAR_QUAD, StencilKind.TRILINEAR_HEX):
        t = _multilinear(dim, spacing)
        nq = t.pop("nq")
        return StencilSpec(kind=kind, dim=dim, weights=np.full(nq, vp / nq), **t)

    if kind is StencilKind.TWO_TRIANGLES:
        node_refs = ((0, (0, 0)), (0, (1, 0)), (0, (0, 1)), (0, (1, 1)))
        positions = [np.array(off, dtype=float) for _, off in node_refs]
        triangles = [(0, 1, 2), (1, 3, 2)]
        dphi, centroids = _triangles(triangles, node_refs, positions, spacing)
        return StencilSpec(
            kind=kind, dim=2, n_nodes=1, node_positions=np.zeros((1, 2)),
            node_refs=node_refs, weights=np.full(2, vp / 2), dphi=dphi,
            quad_positions=centroids, quad_element=np.arange(2),
            element_nodes=tuple(triangles))

    # two node types: pixel corner (type 0) and pixel centre (type 1)
    node_refs = ((0, (0, 0)), (0, (1, 0)), (0, (1, 1)), (0, (0, 1)), (1, (0, 0)))
    positions = [np.array(off, dtype=float) for _, off in node_refs[:4]]
    positions.append(np.array([0.5, 0.5]))
    triangles = [(0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
    dphi, centroids = _triangles(triangles, node_refs, positions, spacing)
    return StencilSpec(
        kind=kind, dim=2, n_nodes=2,
        node_positions=np.array([[0.0, 0.0], [0.5, 0.5]]),
        node_refs=node_refs, weights=np.full(4, vp / 4), dphi=dphi,
        quad_positions=centroids, quad_element=np.arange(4),
        element_nodes=tuple(triangles))


@dataclass(frozen=True, eq=False)
class GridLayout:
    """A cell, a stencil and the physics-dependent field sizes.

    ``components`` is the number of unknowns per node (``d`` for
    elasticity, 1 for heat conduction) and ``grad_components`` the number
    of gradient entries per quadrature point (Mandel size or ``d``).
    """

    cell: CellSpec
    stencil: StencilSpec
    physics: str = "elasticity"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.cell.dim

    @property
    def dims(self) -> tuple[int, ...]:
        return self.cell.dims

    @property
    def n_pixels(self) -> int:
        return self.cell.n_pixels

    @property
    def n_nodes(self) -> int:
        return self.n_pixels * self.stencil.n_nodes

    @property
    def n_quad(self) -> int:
        return self.n_pixels * self.stencil.n_quad

    @property
    def components(self) -> int:
        return self.dim if self.physics == "elasticity" else 1

    @property
    def grad_components(self) -> int:
        return mandel_size(self.dim) if self.physics == "elasticity" else self.dim

    @property
    def nodal_shape(self) -> tuple[int, ...]:
        return (self.components, self.stencil.n_nodes) + self.dims

    @property
    def quad_shape(self) -> tuple[int, ...]:
        return (self.grad_components, self.stencil.n_quad) + self.dims

    @property
    def tangent_shape(self) -> tuple[int, ...]:
        m = self.grad_components
        return (m, m, self.stencil.n_quad) + self.dims

    @property
    def n_dofs(self) -> int:
        return self.components * self.n_nodes

    def weight_field(self) -> np.ndarray:
        """Quadrature weights broadcast to ``(nq, *dims)``."""
        w = self.stencil.weights.reshape((-1,) + (1,) * self.dim)
        return np.broadcast_to(w, (self.stencil.n_quad,) + self.dims)

    def node_coordinates(self) -> np.ndarray:
        """Positions of all nodes, shape ``(d, Nn, *dims)``."""
        h = self.cell.spacing
        grids = np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij")
        out = np.empty((self.dim, self.stencil.n_nodes) + self.dims)
        for a in range(self.dim):
            for t in range(self.stencil.n_nodes):
                out[a, t] = (grids[a] + self.stencil.node_positions[t, a]) * h[a]
        return out

    def quad_coordinates(self) -> np.ndarray:
        """Positions of all quadrature points, shape ``(d, nq, *dims)``."""
        h = self.cell.spacing
        grids = np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij")
        out = np.empty((self.dim, self.stencil.n_quad) + self.dims)
        for a in range(self.dim):
            for q in range(self.stencil.n_quad):
                out[a, q] = (grids[a] + self.stencil.quad_positions[q, a]) * h[a]
        return out


def build_grid(cell: CellSpec, kind: StencilKind | str,
               physics: str = "elasticity") -> GridLayout:
    """Attach a discretisation stencil to a periodic cell.

    Raises
    ------
    ValueError
        If the stencil dimension does not match the cell or ``physics`` is
        unknown.
    """
    if physics not in ("elasticity", "thermal"):
        raise ValueError(f"unknown physics {physics!r}")
    stencil = build_stencil(kind, cell.spacing)
    return GridLayout(cell=cell, stencil=stencil, physics=physics)


def wrap_index(layout: GridLayout, coords, offset=None, local: int = 0,
               where: str = "node") -> int:
    """Flat index of a node (or quadrature point) in a periodic grid.

    ``coords + offset`` is reduced modulo the grid dimensions; ``local`` is
    the node type (or quadrature point within the pixel).
    """
    p = np.asarray(coords, dtype=int)
    if offset is not None:
        p = p + np.asarray(offset, dtype=int)
    p = np.mod(p, layout.dims)
    pixel = int(np.ravel_multi_index(tuple(p), layout.dims))
    per = layout.stencil.n_nodes if where == "node" else layout.stencil.n_quad
    if not 0 <= local < per:
        raise IndexError(f"local index {local} out of range for {where}")
    return local * layout.n_pixels + pixel


def unflatten_index(layout: GridLayout, index: int, where: str = "node"):
    """Inverse of :func:`wrap_index`: returns ``(local, pixel coords)``."""
    local, pixel = divmod(int(index), layout.n_pixels)
    per = layout.stencil.n_nodes if where == "node" else layout.stencil.n_quad
    if local >= per:
        raise IndexError(f"index {index} out of range")
    return local, tuple(int(c) for c in np.unravel_index(pixel, layout.dims))
