import numpy as np
import pytest
import scipy.fft

from fehomog import operators, preconditioner as pc, spectral
from fehomog.mandel import isotropic_stiffness

from conftest import ALL_KINDS, small_layout

PHYSICS = ["elasticity", "thermal"]


def _spd(rng, m):
    A = rng.standard_normal((m, m))
    return A @ A.T + m * np.eye(m)


def _dense_ref(layout, c_ref):
    return spectral.dense_triple_product(layout, c_ref)


def _zero_mean(layout, r):
    axes = tuple(range(1, r.ndim))
    return r - r.mean(axis=axes, keepdims=True)


@pytest.mark.parametrize("physics", PHYSICS)
@pytest.mark.parametrize("kind", ALL_KINDS)
def test_matches_dense_pinv(kind, physics, rng):
    layout = small_layout(kind, physics)
    c_ref = _spd(rng, layout.grad_components)
    inv = pc.build_preconditioner(layout, c_ref)
    P = np.linalg.pinv(_dense_ref(layout, c_ref), hermitian=True)
    for _ in range(5):
        r = _zero_mean(layout, rng.standard_normal(layout.nodal_shape))
        z = pc.apply_preconditioner(layout, inv, r)
        assert np.abs(z.reshape(-1) - P @ r.reshape(-1)).max() < 1e-10


@pytest.mark.parametrize("physics", PHYSICS)
@pytest.mark.parametrize("kind", ALL_KINDS)
def test_block_structure(kind, physics, rng):
    layout = small_layout(kind, physics, n=4)
    c_ref = _spd(rng, layout.grad_components)
    blocks = pc.assemble_reference(layout, c_ref)
    B = blocks.blocks
    n = layout.components * layout.stencil.n_nodes
    assert B.shape == layout.dims[:-1] + (layout.dims[-1] // 2 + 1, n, n)
    assert np.abs(B - np.conj(np.swapaxes(B, -1, -2))).max() <= 1e-12 * np.abs(B).max()
    ev = np.linalg.eigvalsh(B)
    origin = (0,) * layout.dim
    nz = ev.copy()
    nz[origin] = np.inf
    assert nz[..., 0].min() > 0
    z = ev[origin]
    tol = max(1e-12 * np.trace(B[origin]).real / n, 1e-12 * ev.max())
    assert np.sum(np.abs(z) <= tol) == layout.components
    # kernel is the uniform translation across node types
    V = pc.translation_kernel(layout.components, layout.stencil.n_nodes)
    assert np.abs(B[origin] @ V).max() < 1e-12 * np.abs(B).max()


def test_blocks_equal_dft_conjugation(rng):
    layout = small_layout("BilinearQuad", n=2)
    c_ref = _spd(rng, 3)
    K = _dense_ref(layout, c_ref)
    P, n = layout.n_pixels, 2
    # unitary-normalised 2D DFT on the pixel index
    F1 = scipy.fft.fft(np.eye(2), axis=0)
    F = np.kron(F1, F1)
    B = pc.assemble_reference(layout, c_ref).blocks
    for a in range(n):
        for b in range(n):
            Kab = K[a * P:(a + 1) * P, b * P:(b + 1) * P]
            D = F @ Kab @ F.conj().T / P
            assert np.abs(D - np.diag(np.diag(D))).max() < 1e-11
            full = np.diag(D).reshape(2, 2)
            assert np.abs(full[:, :B.shape[1]] - B[..., a, b]).max() < 1e-11


def test_non_zero_blocks_spd_identity_reference():
    layout = small_layout("TwoTriangles", n=6)
    B = pc.assemble_reference(layout, np.eye(3)).blocks
    ev = np.linalg.eigvalsh(B)
    ev[0, 0] = 1.0
    assert ev.min() > 0


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_inverse_identities(kind, rng):
    layout = small_layout(kind, n=4)
    blocks = pc.assemble_reference(layout, _spd(rng, layout.grad_components))
    inv = pc.invert_blocks(blocks)
    B, Bi = blocks.blocks, inv.blocks
    origin = (0,) * layout.dim
    n = B.shape[-1]
    prod = B @ Bi
    prod[origin] = np.eye(n)
    assert np.abs(prod - np.eye(n)).max() < 1e-12
    Z, Zp = B[origin], Bi[origin]
    scale = np.abs(B).max()  # Z itself is round-off for one-node stencils
    assert np.abs(Z @ Zp @ Z - Z).max() <= 1e-11 * scale
    assert np.abs(Zp @ Z @ Zp - Zp).max() <= 1e-11 * max(np.abs(Zp).max(), 1.0)
    # eigen-decomposition oracle with the c smallest eigenvalues dropped
    w, U = np.linalg.eigh(Z)
    c = layout.components
    w_inv = np.zeros_like(w)
    w_inv[c:] = 1.0 / w[c:]
    assert np.abs((U * w_inv) @ U.conj().T - Zp).max() < 1e-11 * max(1.0, np.abs(Zp).max())
    assert inv.pseudo_inverted[origin] and inv.pseudo_inverted.sum() == 1


def test_apply_examples(rng):
    layout = small_layout("FourTrianglesTwoNode", n=3)
    inv = pc.build_preconditioner(layout, np.eye(3))
    assert np.all(pc.apply_preconditioner(layout, inv, np.zeros(layout.nodal_shape)) == 0)
    r = np.zeros(layout.nodal_shape)
    r[0] = 1.0
    r[1] = -2.0
    assert np.abs(pc.apply_preconditioner(layout, inv, r)).max() < 1e-12
    u, v = rng.standard_normal((2,) + layout.nodal_shape)
    Mu = pc.apply_preconditioner(layout, inv, u)
    Mv = pc.apply_preconditioner(layout, inv, v)
    assert np.sum(u * Mv) == pytest.approx(np.sum(Mu * v), rel=1e-12)
    assert np.sum(u * Mu) >= 0
    a = pc.apply_preconditioner(layout, inv, 2 * u - 3 * v)
    assert np.allclose(a, 2 * Mu - 3 * Mv)


@pytest.mark.parametrize("physics", PHYSICS)
@pytest.mark.parametrize("kind", ALL_KINDS)
def test_exact_solve(kind, physics, rng):
    layout = small_layout(kind, physics, n=5 if kind.dim == 2 else 4)
    m = layout.grad_components
    C = isotropic_stiffness(2.0, 0.8, layout.dim) if physics == "elasticity" else _spd(rng, m)
    # a heterogeneous stress field of a uniform material is the residual of a random u
    u = rng.standard_normal(layout.nodal_shape)
    b = -operators.apply_K(layout, C, u)
    z = pc.apply_preconditioner(layout, pc.build_preconditioner(layout, C), b)
    back = operators.apply_K(layout, C, z)
    assert np.abs(back - b).max() < 1e-10 * np.abs(b).max()


def test_call_counts(monkeypatch, rng):
    layout = small_layout("FourTrianglesTwoNode", n=4)
    calls = {"grad": 0, "fft": 0}
    grad = pc.operators.gradient_apply
    fft = pc._rfftn

    def counting_grad(*a, **k):
        calls["grad"] += 1
        return grad(*a, **k)

    def counting_fft(*a, **k):
        calls["fft"] += 1
        return fft(*a, **k)

    monkeypatch.setattr(pc.operators, "gradient_apply", counting_grad)
    monkeypatch.setattr(pc, "_rfftn", counting_fft)
    pc.assemble_reference(layout, np.eye(3))
    n = layout.components * layout.stencil.n_nodes
    assert calls == {"grad": n, "fft": n * n}


def test_reassembly_idempotent(rng):
    layout = small_layout("TrilinearHex", n=3)
    c = _spd(rng, 6)
    a = pc.build_preconditioner(layout, c)
    b = pc.build_preconditioner(layout, c.copy())
    assert np.array_equal(a.blocks, b.blocks)


def test_errors(rng):
    layout = small_layout("TwoTriangles", n=3)
    with pytest.raises(ValueError, match="positive definite"):
        pc.assemble_reference(layout, -np.eye(3))
    with pytest.raises(ValueError, match="symmetric"):
        pc.assemble_reference(layout, np.array([[1.0, 0.5, 0], [0, 1, 0], [0, 0, 1]]))
    with pytest.raises(ValueError, match="3x3"):
        pc.assemble_reference(layout, np.eye(2))
    blocks = pc.assemble_reference(layout, np.eye(3))
    with pytest.raises(ValueError, match="not been inverted"):
        pc.apply_preconditioner(layout, blocks, np.zeros(layout.nodal_shape))
    inv = pc.invert_blocks(blocks)
    with pytest.raises(ValueError, match="already"):
        pc.invert_blocks(inv)
    with pytest.raises(ValueError, match="shape"):
        pc.apply_preconditioner(layout, inv, np.zeros((2, 1, 4, 4)))
    # a singular non-zero frequency is reported, not regularised
    bad = blocks.blocks.copy()
    bad[1, 1] = 0.0
    with pytest.raises(pc.SingularBlockError, match="singular"):
        pc.invert_blocks(pc.FrequencyBlockDiag(bad, blocks.dims, blocks.components))


def test_workers_do_not_change_results(rng):
    layout = small_layout("TwoTriangles", n=8)
    r = rng.standard_normal(layout.nodal_shape)
    inv = pc.build_preconditioner(layout, np.eye(3))
    a = pc.apply_preconditioner(layout, inv, r)
    pc.set_workers(2)
    try:
        b = pc.apply_preconditioner(layout, inv, r)
    finally:
        pc.set_workers(1)
    assert np.allclose(a, b, rtol=0, atol=1e-14)
