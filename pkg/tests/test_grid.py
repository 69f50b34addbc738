import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fehomog.grid import (CellSpec, StencilKind, build_grid, build_stencil, unflatten_index,
                          wrap_index)

from conftest import ALL_KINDS


def test_two_triangles_counts():
    layout = build_grid(CellSpec((4, 4), (1.0, 1.0)), "TwoTriangles")
    assert layout.n_nodes == 16
    assert layout.n_quad == 32
    assert np.allclose(layout.stencil.weights, layout.cell.pixel_volume / 2)


def test_bilinear_counts():
    layout = build_grid(CellSpec((4, 4), (1.0, 1.0)), "BilinearQuad")
    assert layout.n_nodes == 16
    assert layout.n_quad == 64
    assert np.allclose(layout.stencil.weights, layout.cell.pixel_volume / 4)


def test_node_counts_per_kind():
    expect = {"BilinearQuad": (1, 4), "TwoTriangles": (1, 2),
              "FourTrianglesTwoNode": (2, 4), "TrilinearHex": (1, 8)}
    for kind, (nn, nq) in expect.items():
        d = StencilKind.parse(kind).dim
        layout = build_grid(CellSpec((3,) * d, (1.0,) * d), kind)
        assert layout.stencil.n_nodes == nn
        assert layout.stencil.n_quad == nq
        assert layout.n_nodes == nn * layout.n_pixels


@pytest.mark.parametrize("dims", [(1, 1), (1, 4), (4, 1, 4)])
def test_rejects_small_dims(dims):
    with pytest.raises(ValueError, match="at least 2"):
        CellSpec(dims, (1.0,) * len(dims))


@pytest.mark.parametrize("lengths", [(0.0, 1.0), (-1.0, 1.0), (np.inf, 1.0)])
def test_rejects_bad_lengths(lengths):
    with pytest.raises(ValueError, match="positive"):
        CellSpec((4, 4), lengths)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="3D stencil|2D"):
        build_grid(CellSpec((4, 4), (1.0, 1.0)), "TrilinearHex")
    with pytest.raises(ValueError):
        build_grid(CellSpec((4, 4, 4), (1.0,) * 3), "TwoTriangles")


def test_unknown_stencil_and_physics():
    with pytest.raises(ValueError, match="unknown stencil"):
        StencilKind.parse("Hexagon")
    with pytest.raises(ValueError, match="physics"):
        build_grid(CellSpec((4, 4), (1.0, 1.0)), "TwoTriangles", "acoustics")


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_weights_partition_volume(kind):
    d = kind.dim
    cell = CellSpec((3, 5, 4)[:d], (1.3, 0.7, 2.1)[:d])
    layout = build_grid(cell, kind)
    assert layout.cell.pixel_volume * layout.n_pixels == pytest.approx(cell.volume, rel=1e-15)
    assert layout.weight_field().sum() == pytest.approx(cell.volume, rel=1e-14)
    assert np.all(layout.stencil.weights > 0)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_derivatives_partition_of_unity(kind):
    d = kind.dim
    st_ = build_stencil(kind, np.array([0.3, 0.5, 0.2])[:d])
    assert np.abs(st_.dphi.sum(axis=1)).max() < 1e-12


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_derivatives_reproduce_linear_functions(kind):
    # sum_k dphi_k * x_k = grad x at every quadrature point
    d = kind.dim
    h = np.array([0.3, 0.5, 0.2])[:d]
    st_ = build_stencil(kind, h)
    pos = np.array([(st_.node_positions[t] + np.array(off)) * h for t, off in st_.node_refs])
    G = np.einsum("qkb,ka->qab", st_.dphi, pos)
    assert np.allclose(G, np.eye(d)[None], atol=1e-12)


def test_wrap_index_examples():
    layout = build_grid(CellSpec((4, 4), (1.0, 1.0)), "BilinearQuad")
    assert wrap_index(layout, (0, 0), (0, 0)) == 0
    assert wrap_index(layout, (4, 4)) == wrap_index(layout, (0, 0))
    assert wrap_index(layout, (-1, 2)) == wrap_index(layout, (3, 2))


@settings(max_examples=60, deadline=None)
@given(st.integers(-50, 50), st.integers(-50, 50), st.integers(-3, 3), st.integers(-3, 3))
def test_wrap_periodicity(i, j, oi, oj):
    layout = build_grid(CellSpec((4, 5), (1.0, 1.0)), "FourTrianglesTwoNode")
    for t in range(2):
        a = wrap_index(layout, (i, j), (oi, oj), local=t)
        b = wrap_index(layout, (i + 4, j - 5), (oi, oj), local=t)
        assert a == b
        assert 0 <= a < layout.n_nodes


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_index_bijection(kind):
    d = kind.dim
    layout = build_grid(CellSpec((3, 4, 2)[:d], (1.0,) * d), kind)
    for where, total in (("node", layout.n_nodes), ("quad", layout.n_quad)):
        seen = set()
        for i in range(total):
            local, pix = unflatten_index(layout, i, where)
            assert wrap_index(layout, pix, local=local, where=where) == i
            seen.add(i)
        assert len(seen) == total
    with pytest.raises(IndexError):
        unflatten_index(layout, layout.n_nodes, "node")


def test_anisotropic_pixels_enter_derivatives():
    a = build_grid(CellSpec((4, 4), (1.0, 1.0)), "TwoTriangles").stencil
    b = build_grid(CellSpec((4, 4), (2.0, 1.0)), "TwoTriangles").stencil
    assert np.allclose(b.dphi[..., 0], a.dphi[..., 0] / 2)
    assert np.allclose(b.dphi[..., 1], a.dphi[..., 1])


def test_coordinates_shapes():
    layout = build_grid(CellSpec((3, 4), (1.0, 2.0)), "FourTrianglesTwoNode")
    X = layout.node_coordinates()
    assert X.shape == (2, 2, 3, 4)
    assert np.allclose(X[:, 1, 0, 0], [1 / 6, 0.25])
    Q = layout.quad_coordinates()
    assert Q.shape == (2, 4, 3, 4)
    assert Q.min() >= 0 and Q[0].max() <= 1.0 and Q[1].max() <= 2.0
