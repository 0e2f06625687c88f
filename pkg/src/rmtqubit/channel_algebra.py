"""Choi matrices and superoperators of X-form qubit channels.

Superoperators act on density matrices vectorized by column stacking
(``rho00, rho10, rho01, rho11``). Composition is the matrix product
``L(A o B) = L_A @ L_B``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-6


class NonInvertibleChannelError(ValueError):
    pass


@dataclass(frozen=True)
class IntermediateMapParams:
    q: complex
    Z1: complex
    Z2: complex
    D: complex
    d: float

    def choi(self) -> np.ndarray:
        return x_choi(self.q, self.Z1, self.Z2)

    def superop(self) -> np.ndarray:
        return x_superop(self.q, self.Z1, self.Z2)


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v: np.ndarray) -> np.ndarray:
    return np.asarray(v).reshape(2, 2, order="F")


def x_choi(r, z1, z2) -> np.ndarray:
    """X-form Choi matrix with diagonal ``(r, 1-r, 1-r, r)``."""
    c = np.zeros((4, 4), dtype=complex)
    c[0, 0] = c[3, 3] = r
    c[1, 1] = c[2, 2] = 1 - r
    c[0, 3] = np.conj(z1)
    c[3, 0] = z1
    c[1, 2] = z2
    c[2, 1] = np.conj(z2)
    return c


def x_superop(r, z1, z2) -> np.ndarray:
    m = np.zeros((4, 4), dtype=complex)
    m[0, 0] = m[3, 3] = r
    m[0, 3] = m[3, 0] = 1 - r
    m[1, 1] = z1
    m[1, 2] = z2
    m[2, 1] = np.conj(z2)
    m[2, 2] = np.conj(z1)
    return m


def choi_from_point(p) -> np.ndarray:
    return x_choi(p.r, p.z1, p.z2)


def superop_from_point(p) -> np.ndarray:
    return x_superop(p.r, p.z1, p.z2)


def reshuffle(m: np.ndarray) -> np.ndarray:
    """Exchange superoperator and Choi representations (an involution).

    With ``L[(k,l), (i,j)] = <k|L(|i><j|)|l>`` in column-stacked indices and
    ``C[(i,k), (j,l)]`` in row-major block indices.
    """
    # L index: row = k + 2 l, col = i + 2 j  ->  L4[l, k, j, i]
    l4 = np.asarray(m).reshape(2, 2, 2, 2)
    return l4.transpose(3, 1, 2, 0).reshape(4, 4)


def apply_superop(L: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return unvec(L @ vec(rho))


def invert_superop(L: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Closed-form inverse of an X-form superoperator."""
    r = L[0, 0].real
    z1, z2 = L[1, 1], L[1, 2]
    d = 2 * r - 1
    D = abs(z1) ** 2 - abs(z2) ** 2
    if abs(d) <= tol or abs(D) <= tol:
        raise NonInvertibleChannelError(f"channel not invertible: |2r-1|={abs(d):.3g}, |D|={abs(D):.3g}")
    inv = np.zeros((4, 4), dtype=complex)
    inv[0, 0] = inv[3, 3] = r / d
    inv[0, 3] = inv[3, 0] = (r - 1) / d
    inv[1, 1] = np.conj(z1) / D
    inv[1, 2] = -z2 / D
    inv[2, 1] = -np.conj(z2) / D
    inv[2, 2] = z1 / D
    return inv


def intermediate_map(p_t, p_te, tol: float = DEFAULT_TOL) -> IntermediateMapParams:
    """Parameters of the map carrying states from ``p_t.t`` to ``p_te.t``."""
    r, z1, z2 = p_t.r, p_t.z1, p_t.z2
    r_, z1_, z2_ = p_te.r, p_te.z1, p_te.z2
    d = 2 * r - 1
    D = abs(z1) ** 2 - abs(z2) ** 2
    if abs(d) <= tol or abs(D) <= tol:
        raise NonInvertibleChannelError(f"channel not invertible: |2r-1|={abs(d):.3g}, |D|={abs(D):.3g}")
    q = (r + r_ - 1) / d
    Z1 = (z1_ * np.conj(z1) - z2_ * np.conj(z2)) / D
    Z2 = (z2_ * z1 - z1_ * z2) / D
    return IntermediateMapParams(complex(q), complex(Z1), complex(Z2), complex(D), float(d))


def choi_eigenvalues(m: IntermediateMapParams) -> np.ndarray:
    """Eigenvalues ``q +- |Z1|, (1-q) +- |Z2|`` of an X-form Choi matrix."""
    q = np.real(m.q)
    a, b = abs(m.Z1), abs(m.Z2)
    return np.array([q + a, q - a, 1 - q + b, 1 - q - b])


def trace_norm(eigenvalues) -> float:
    return float(np.sum(np.abs(eigenvalues)))


def is_completely_positive(choi: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.linalg.eigvalsh(choi).min() >= -tol)
