"""Mandel notation and constitutive models.

Symmetric second-order tensors are stored as vectors with off-diagonal
entries scaled by sqrt(2), so that Euclidean dot products reproduce double
contractions.  Component order is (11, 22, 12) in 2D and
(11, 22, 33, 23, 13, 12) in 3D.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "mandel_pairs",
    "to_mandel_strain",
    "from_mandel_strain",
    "to_mandel_stiffness",
    "from_mandel_stiffness",
    "identity_mandel",
    "isotropic_stiffness",
    "MaterialModel",
    "LinearElastic",
    "Conductivity",
    "J2Plastic",
    "evaluate",
]

SQ2 = np.sqrt(2.0)

_PAIRS = {
    2: ((0, 0), (1, 1), (0, 1)),
    3: ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)),
}
# in-plane rows of the 3D Mandel vector (plane strain embedding)
_PLANE = np.array([0, 1, 5])


def mandel_pairs(d: int):
    return _PAIRS[d]


def _factors(d: int) -> np.ndarray:
    return np.array([1.0 if i == j else SQ2 for i, j in _PAIRS[d]])


def to_mandel_strain(E) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    d = E.shape[-1]
    E = 0.5 * (E + np.swapaxes(E, -1, -2))
    return np.stack([E[..., i, j] for i, j in _PAIRS[d]], axis=-1) * _factors(d)


def from_mandel_strain(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    d = {3: 2, 6: 3}[v.shape[-1]]
    out = np.zeros(v.shape[:-1] + (d, d))
    for m, ((i, j), f) in enumerate(zip(_PAIRS[d], _factors(d))):
        out[..., i, j] = v[..., m] / f
        out[..., j, i] = v[..., m] / f
    return out


def to_mandel_stiffness(C4) -> np.ndarray:
    """Mandel matrix of a minor-symmetric fourth-order tensor."""
    C4 = np.asarray(C4, dtype=float)
    d = C4.shape[0]
    pairs, f = _PAIRS[d], _factors(d)
    n = len(pairs)
    M = np.empty((n, n))
    for a, (i, j) in enumerate(pairs):
        for b, (k, l) in enumerate(pairs):
            M[a, b] = f[a] * f[b] * C4[i, j, k, l]
    return M


def from_mandel_stiffness(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    d = {3: 2, 6: 3}[M.shape[0]]
    pairs, f = _PAIRS[d], _factors(d)
    C4 = np.zeros((d,) * 4)
    for a, (i, j) in enumerate(pairs):
        for b, (k, l) in enumerate(pairs):
            v = M[a, b] / (f[a] * f[b])
            for p, q in {(i, j), (j, i)}:
                for r, s in {(k, l), (l, k)}:
                    C4[p, q, r, s] = v
    return C4


def identity_mandel(d: int) -> np.ndarray:
    """Symmetrised fourth-order identity I_s in Mandel form."""
    return np.eye(d * (d + 1) // 2)


def _vol_dev_3d():
    one = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    p_vol = np.outer(one, one) / 3.0
    return one, p_vol, np.eye(6) - p_vol


def isotropic_stiffness(K: float, G: float, d: int = 3) -> np.ndarray:
    """``3K P_vol + 2G P_dev`` in Mandel form; 2D is plane strain."""
    if not (K > 0 and G > 0):
        raise ValueError(f"moduli must be positive, got K={K}, G={G}")
    _, p_vol, p_dev = _vol_dev_3d()
    C = 3.0 * K * p_vol + 2.0 * G * p_dev
    if d == 3:
        return C
    if d == 2:
        return C[np.ix_(_PLANE, _PLANE)].copy()
    raise ValueError(f"dimension must be 2 or 3, got {d}")


# --------------------------------------------------------------------------
# constitutive models
#
# Each model evaluates a batch of points: eps (n, m) and internal variables
# g (n, width) -> stress (n, m), tangent (n, m, m), updated g (n, width).
# --------------------------------------------------------------------------

class MaterialModel:
    internal_width = 0

    def evaluate(self, eps, g=None):
        raise NotImplementedError

    def initial_state(self, n: int) -> np.ndarray:
        return np.zeros((n, self.internal_width))


def _check_spd(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    if not np.allclose(M, M.T, rtol=1e-12, atol=1e-14 * np.abs(M).max()):
        raise ValueError(f"{name} is not symmetric; non-symmetric tangents "
                         "are not supported by the CG solvers")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ValueError(f"{name} is not positive definite")
    return 0.5 * (M + M.T)


def _check_eps(eps, m):
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    if eps.shape[-1] != m:
        raise ValueError(f"expected {m} strain components, got {eps.shape[-1]}")
    if not np.all(np.isfinite(eps)):
        raise FloatingPointError("non-finite strain passed to constitutive model")
    return eps


@dataclass(frozen=True, eq=False)
class LinearElastic(MaterialModel):
    C: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "C", _check_spd(self.C, "stiffness"))

    @classmethod
    def isotropic(cls, K: float, G: float, d: int = 3) -> "LinearElastic":
        return cls(isotropic_stiffness(K, G, d))

    def evaluate(self, eps, g=None):
        eps = _check_eps(eps, self.C.shape[0])
        n = eps.shape[0]
        sig = eps @ self.C.T
        tan = np.broadcast_to(self.C, (n,) + self.C.shape).copy()
        return sig, tan, np.zeros((n, 0)) if g is None else np.asarray(g)


@dataclass(frozen=True, eq=False)
class Conductivity(MaterialModel):
    """Linear Fourier conduction, flux ``q = A grad(theta)``."""

    A: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _check_spd(self.A, "conductivity"))

    @classmethod
    def isotropic(cls, kappa: float, d: int = 2) -> "Conductivity":
        return cls(kappa * np.eye(d))

    @property
    def C(self):
        return self.A

    def evaluate(self, eps, g=None):
        eps = _check_eps(eps, self.A.shape[0])
        n = eps.shape[0]
        q = eps @ self.A.T
        tan = np.broadcast_to(self.A, (n,) + self.A.shape).copy()
        return q, tan, np.zeros((n, 0)) if g is None else np.asarray(g)


@dataclass(frozen=True, eq=False)
class J2Plastic(MaterialModel):
    """Small-strain von Mises plasticity with linear isotropic hardening.

    Internal variables per point: the plastic strain tensor (6 Mandel
    components, always 3D) followed by the accumulated plastic strain.  2D
    problems are plane strain: the in-plane strain is embedded in 3D with
    zero out-of-plane components and only in-plane rows are returned.
    """

    K: float
    G: float
    tau_y0: float
    H: float = 0.0
    d: int = 3

    internal_width = 7

    def __post_init__(self):
        if not (self.K > 0 and self.G > 0 and self.tau_y0 > 0):
            raise ValueError("J2 model needs K, G, tau_y0 > 0")
        if self.H < 0:
            raise ValueError("hardening modulus must be non-negative")
        if self.d not in (2, 3):
            raise ValueError("d must be 2 or 3")

    @property
    def C(self):
        return isotropic_stiffness(self.K, self.G, self.d)

    def yield_stress(self, ep):
        return self.tau_y0 + self.H * ep

    def evaluate(self, eps, g=None):
        m = 3 if self.d == 2 else 6
        eps = _check_eps(eps, m)
        n = eps.shape[0]
        if g is None:
            g = self.initial_state(n)
        g = np.asarray(g, dtype=float)
        if g.shape != (n, 7):
            raise ValueError(f"J2 internal state must have shape ({n}, 7), "
                             f"got {g.shape}")
        if self.d == 2:
            e3 = np.zeros((n, 6))
            e3[:, _PLANE] = eps
        else:
            e3 = eps
        K, G, H = self.K, self.G, self.H
        one, p_vol, p_dev = _vol_dev_3d()
        eps_p, ep = g[:, :6], g[:, 6]

        ee = e3 - eps_p
        tr = ee @ one
        s_tr = 2.0 * G * (ee @ p_dev)
        s_norm = np.linalg.norm(s_tr, axis=1)
        q_tr = np.sqrt(1.5) * s_norm
        f = q_tr - self.yield_stress(ep)
        plastic = f > 0

        dgam = np.where(plastic, f / (3.0 * G + H), 0.0)
        safe = np.where(s_norm > 0, s_norm, 1.0)
        nvec = s_tr / safe[:, None]
        q_safe = np.where(q_tr > 0, q_tr, 1.0)
        shrink = np.where(plastic, 1.0 - 3.0 * G * dgam / q_safe, 1.0)
        s = s_tr * shrink[:, None]
        sig = s + K * tr[:, None] * one[None, :]

        c_el = 3.0 * K * p_vol + 2.0 * G * p_dev
        tan = np.broadcast_to(c_el, (n, 6, 6)).copy()
        if np.any(plastic):
            pi = np.flatnonzero(plastic)
            a = 2.0 * G * shrink[pi]
            b = 6.0 * G * G * (dgam[pi] / q_safe[pi] - 1.0 / (3.0 * G + H))
            nn = np.einsum("pi,pj->pij", nvec[pi], nvec[pi])
            tan[pi] = (3.0 * K * p_vol[None] + a[:, None, None] * p_dev[None]
                       + b[:, None, None] * nn)

        g_new = g.copy()
        g_new[:, :6] += np.sqrt(1.5) * dgam[:, None] * nvec
        g_new[:, 6] += dgam
        if self.d == 2:
            return sig[:, _PLANE], tan[:, _PLANE][:, :, _PLANE], g_new
        return sig, tan, g_new


def evaluate(model: MaterialModel, eps, g=None):
    """Stress, consistent tangent and updated internal variables at points.

    Accepts a single point (1D ``eps``) or a batch ``(n, m)``.
    """
    eps = np.asarray(eps, dtype=float)
    single = eps.ndim == 1
    if g is not None:
        g = np.asarray(g, dtype=float)
        if single:
            g = g[None, :]
    sig, tan, g_new = model.evaluate(eps, g)
    if single:
        return sig[0], tan[0], g_new[0]
    return sig, tan, g_new
