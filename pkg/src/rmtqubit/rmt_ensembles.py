"""GUE sampling with per-realization, counter-based random streams.

Normalization: ``<|M_ij|^2> = 1`` for every entry, so the raw spectrum fills
the semicircle ``[-2 sqrt(N), 2 sqrt(N)]`` with central density ``sqrt(N)/pi``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Role tags keep H_e and V_e of one realization on disjoint streams.
ROLE_HAMILTONIAN = 0
ROLE_COUPLING = 1


class InvalidDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class SeededStream:
    """Reproducible random stream for one (seed, realization, role) triple.

    Streams are derived with :class:`numpy.random.SeedSequence`, whose spawn
    keys hash the realization index into the seed. Any realization can be
    generated independently of the others, in any order.
    """

    master_seed: int
    realization_index: int
    role: int = ROLE_HAMILTONIAN

    def __post_init__(self):
        if self.realization_index < 0:
            raise ValueError("realization_index must be non-negative")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.master_seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(int(self.realization_index), int(self.role)),
        )
        return np.random.Generator(np.random.PCG64(seq))


def sample_gue(dim: int, stream: SeededStream | np.random.Generator) -> np.ndarray:
    """Draw a ``dim x dim`` GUE matrix.

    Diagonal entries are real with variance 1. Off-diagonal entries are
    complex with variance 1/2 in both the real and the imaginary part.
    Gaussians come from numpy's ziggurat sampler (exact, no truncation).
    """
    if dim < 1:
        raise InvalidDimensionError(f"GUE dimension must be >= 1, got {dim}")
    rng = stream.generator() if isinstance(stream, SeededStream) else stream
    a = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    # IEEE addition commutes, so this is Hermitian bit-for-bit with a real diagonal.
    return (a + a.conj().T) / 2.0


def unit_spacing_factor(dim: int) -> float:
    return math.sqrt(dim) / math.pi


def scale_to_unit_spacing(m: np.ndarray) -> np.ndarray:
    """Rescale a raw GUE matrix to unit mean level spacing at the band center."""
    dim = m.shape[0]
    return unit_spacing_factor(dim) * m


def semicircle_density(energy, dim: int):
    """Level density (levels per unit energy) of a raw GUE matrix of size ``dim``."""
    radius = 2.0 * math.sqrt(dim)
    e = np.asarray(energy, dtype=float)
    inside = np.clip(radius**2 - e**2, 0.0, None)
    return dim * 2.0 / (math.pi * radius**2) * np.sqrt(inside)


def sample_environment(dim: int, master_seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(H_e, V_e)`` for one realization; ``H_e`` already unit-spacing scaled."""
    h = scale_to_unit_spacing(sample_gue(dim, SeededStream(master_seed, index, ROLE_HAMILTONIAN)))
    v = sample_gue(dim, SeededStream(master_seed, index, ROLE_COUPLING))
    return h, v
