import numpy as np
import pytest

from fehomog.grid import CellSpec, StencilKind, build_grid

ALL_KINDS = list(StencilKind)
# acceptance verdicts collected by test_acceptance.py, printed at the end
ACCEPTANCE: dict[int, str] = {}


def small_layout(kind, physics="elasticity", n=None):
    kind = StencilKind.parse(kind)
    d = kind.dim
    if n is None:
        n = 3 if d == 2 else 2
    dims = (n,) * d if np.isscalar(n) else tuple(n)
    return build_grid(CellSpec(dims, (1.0,) * d), kind, physics)


def random_spd_field(layout, rng, contrast=10.0):
    """Two-phase SPD tangent field, one random SPD matrix per phase."""
    m = layout.grad_components
    mats = []
    for scale in (1.0, contrast):
        A = rng.standard_normal((m, m))
        mats.append(scale * (A @ A.T + m * np.eye(m)))
    phase = rng.integers(0, 2, layout.dims)
    T = np.empty(layout.tangent_shape)
    for p, M in enumerate(mats):
        mask = phase == p
        T[:, :, :, mask] = M[:, :, None, None]
    return T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
