"""Exact propagation of a qubit coupled to a GUE environment.

The full Hamiltonian on C^2 (x) C^N is

    H = (delta/2) sigma_z (x) 1 + 1 (x) H_e + lam * sigma_x (x) V_e

with ``H_e`` scaled to unit mean level spacing at the band center. The
environment starts maximally mixed, and the reduced qubit map is averaged
over independent ``(H_e, V_e)`` draws.

Channel parameters follow the X-form Choi matrix with diagonal
``(r, 1-r, 1-r, r)`` and corners ``z1``, ``z2``. Coherences are read from
the upper-right element of the evolved qubit states, so that in the
decoupled limit ``z1(t) = exp(-1j * delta * t)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .rmt_ensembles import sample_environment

HEISENBERG_TIME = 2.0 * math.pi
# Time points per propagation block. Blocks are aligned to the global time
# index so values at a given time never depend on how far the grid extends.
CHUNK = 256

# Upper bound on cached eigensystems (bytes) when an ensemble is extended.
_CACHE_LIMIT = 256 * 2**20


class NumericalError(RuntimeError):
    pass


class EmptyEnsembleError(ValueError):
    pass


@dataclass
class ModelParams:
    delta: float
    lam: float
    env_dim: int
    n_samples: int
    time_grid: np.ndarray | None = None
    master_seed: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.env_dim < 1:
            raise ValueError("env_dim must be positive")
        if self.lam > 0 and self.env_dim < 2:
            raise ValueError("env_dim must be >= 2 when lambda > 0")
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")
        if self.time_grid is not None:
            g = np.asarray(self.time_grid, dtype=float)
            if g.ndim != 1 or g.size == 0 or g[0] != 0.0:
                raise ValueError("time_grid must be 1-d and start at 0")
            if np.any(np.diff(g) <= 0):
                raise ValueError("time_grid must be strictly increasing")
            self.time_grid = g

    def default_dt(self) -> float:
        return default_dt(self.delta)


def default_dt(delta: float) -> float:
    """Grid step resolving both the qubit period and the Heisenberg time."""
    period = 2.0 * math.pi / delta if delta > 0 else HEISENBERG_TIME
    return min(period, HEISENBERG_TIME) / 40.0


def uniform_grid(dt: float, n_points: int) -> np.ndarray:
    return np.arange(n_points) * dt


@dataclass(frozen=True)
class ChannelPoint:
    t: float
    r: float
    z1: complex
    z2: complex


@dataclass
class RealizationChannel:
    """Channel parameters of one realization on a time grid.

    ``maps`` (only when requested) holds ``maps[k, i, j, a, b] =
    <a| L_t(|i><j|) |b>`` for the physical reduced map at ``t[k]``.
    """

    t: np.ndarray
    r: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    maps: np.ndarray | None = None

    def evolve(self, rho: np.ndarray) -> np.ndarray:
        """Evolved qubit states (T, 2, 2) for initial state ``rho``."""
        if self.maps is None:
            raise ValueError("propagate with full=True to evolve arbitrary states")
        return np.einsum("ij,kijab->kab", np.asarray(rho), self.maps)


@dataclass
class ChannelTrajectory:
    params: ModelParams
    t: np.ndarray
    r: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    se_r: np.ndarray
    se_z1: np.ndarray  # complex: real part is SE of Re z1, imag part SE of Im z1
    se_z2: np.ndarray
    n_accumulated: int

    def __len__(self):
        return self.t.size

    @property
    def points(self) -> list[ChannelPoint]:
        return [self.point(i) for i in range(len(self))]

    def point(self, i: int) -> ChannelPoint:
        return ChannelPoint(float(self.t[i]), float(self.r[i]), complex(self.z1[i]), complex(self.z2[i]))

    def head(self, n: int) -> "ChannelTrajectory":
        """First ``n`` time points."""
        return replace(
            self,
            t=self.t[:n], r=self.r[:n], z1=self.z1[:n], z2=self.z2[:n],
            se_r=self.se_r[:n], se_z1=self.se_z1[:n], se_z2=self.se_z2[:n],
        )

    def up_to(self, t_stop: float) -> "ChannelTrajectory":
        return self.head(int(np.searchsorted(self.t, t_stop, side="right")))

    def purity_y(self) -> np.ndarray:
        return purity_y(self.z1, self.z2)


def purity_y(z1, z2):
    """Purity of the evolved sigma_y eigenstate."""
    return 0.5 + 0.5 * np.abs(np.asarray(z1) - np.asarray(z2)) ** 2


def build_hamiltonian(params: ModelParams, h_env: np.ndarray, v_env: np.ndarray) -> np.ndarray:
    n = params.env_dim
    if h_env.shape != (n, n) or v_env.shape != (n, n):
        raise ValueError(
            f"environment matrices must be {n}x{n}, got {h_env.shape} and {v_env.shape}"
        )
    half = params.delta / 2.0
    eye = np.eye(n)
    h = np.empty((2 * n, 2 * n), dtype=complex)
    h[:n, :n] = h_env + half * eye
    h[n:, n:] = h_env - half * eye
    h[:n, n:] = params.lam * v_env
    h[n:, :n] = params.lam * v_env
    return h


# Component order for the fast path; each entry is (i, j, a, b) with the
# value <a| L(|i><j|) |b>.
_R = (0, 0, 0, 0)
_Z1 = (0, 1, 0, 1)
_Z2 = (1, 0, 0, 1)
_ALL = tuple((i, j, a, b) for i in range(2) for j in range(2) for a in range(2) for b in range(2))


@dataclass
class _Eigensystem:
    energies: np.ndarray
    kernels: np.ndarray  # (2N, K * 2N)
    n_components: int
    env_dim: int


def _eigensystem(h_total: np.ndarray, env_dim: int, components, realization=None) -> _Eigensystem:
    try:
        energies, w = np.linalg.eigh(h_total)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed for realization {realization}: {exc}") from exc
    n = env_dim
    blocks = (w[:n], w[n:])
    overlap = {(i, j): blocks[i].conj().T @ blocks[j] for i in range(2) for j in range(2)}
    # <a|L(|i><j|)|b> = (1/N) sum_mn e^{-i(E_m - E_n)t} P_ij[m, n] P_ba[n, m]
    kernels = np.concatenate(
        [overlap[(i, j)] * overlap[(b, a)].T for (i, j, a, b) in components], axis=1
    )
    return _Eigensystem(energies, kernels, len(components), n)


def _evaluate(system: _Eigensystem, times: np.ndarray) -> np.ndarray:
    """Channel components (T, K) on ``times``, block by block."""
    dim = system.energies.size
    out = np.empty((times.size, system.n_components), dtype=complex)
    for start in range(0, times.size, CHUNK):
        t = times[start:start + CHUNK]
        phase = np.exp(-1j * np.outer(t, system.energies))
        x = (phase @ system.kernels).reshape(t.size, system.n_components, dim)
        out[start:start + CHUNK] = np.einsum("ckn,cn->ck", x, phase.conj())
    return out / system.env_dim


def propagate_channel(
    params: ModelParams,
    h_total: np.ndarray,
    times: np.ndarray | None = None,
    full: bool = False,
    realization: int | None = None,
) -> RealizationChannel:
    """Reduced channel of a single realization, maximally mixed environment.

    The Hamiltonian is diagonalized once; the propagator at every grid time
    follows from the eigenbasis. The environment trace over all ``N`` basis
    states is carried out exactly.
    """
    times = params.time_grid if times is None else np.asarray(times, dtype=float)
    if times is None:
        raise ValueError("no time grid given")
    system = _eigensystem(h_total, params.env_dim, _ALL if full else (_R, _Z1, _Z2), realization)
    values = _evaluate(system, times)
    return _channel_from_values(times, values, full)


def _channel_from_values(times, values, full):
    if full:
        maps = values.reshape(times.size, 2, 2, 2, 2)
        return RealizationChannel(
            times, maps[:, 0, 0, 0, 0].real.copy(), maps[:, 0, 1, 0, 1].copy(),
            maps[:, 1, 0, 0, 1].copy(), maps,
        )
    return RealizationChannel(times, values[:, 0].real.copy(), values[:, 1].copy(), values[:, 2].copy())


def realization_hamiltonian(params: ModelParams, index: int) -> np.ndarray:
    h_env, v_env = sample_environment(params.env_dim, params.master_seed, index)
    return build_hamiltonian(params, h_env, v_env)


def simulate_realization(params: ModelParams, index: int, times=None, full=False) -> RealizationChannel:
    return propagate_channel(params, realization_hamiltonian(params, index), times, full, index)


class Ensemble:
    """Per-realization channel data for one parameter point.

    Keeps every realization's ``r, z1, z2`` so that statistics over any
    prefix of the ensemble can be formed without re-simulating. The time
    grid can be extended in whole blocks of :data:`CHUNK` points.
    """

    def __init__(self, params: ModelParams, times: np.ndarray | None = None,
                 dt: float | None = None, threads: int = 1):
        if params.n_samples < 1:
            raise EmptyEnsembleError("ensemble needs at least one realization")
        self.params = params
        self.threads = max(1, int(threads))
        self.dt = dt
        n = params.n_samples
        self.t = np.zeros(0)
        self.r = np.zeros((n, 0))
        self.z1 = np.zeros((n, 0), dtype=complex)
        self.z2 = np.zeros((n, 0), dtype=complex)
        per = (2 * params.env_dim) ** 2 * 3 * 16
        self._cache = {} if per * n <= _CACHE_LIMIT else None
        if times is not None:
            self._append(np.asarray(times, dtype=float))

    @classmethod
    def uniform(cls, params: ModelParams, dt: float | None = None, n_chunks: int = 1, threads: int = 1):
        ens = cls(params, dt=dt if dt is not None else params.default_dt(), threads=threads)
        ens.extend(n_chunks)
        return ens

    def sibling(self, dt: float) -> "Ensemble":
        """Empty ensemble on another uniform grid sharing the eigensystem cache."""
        other = Ensemble(self.params, dt=dt, threads=self.threads)
        other._cache = self._cache
        return other

    @property
    def n_samples(self) -> int:
        return self.params.n_samples

    @property
    def n_times(self) -> int:
        return self.t.size

    def extend(self, n_chunks: int = 1):
        """Append ``n_chunks`` blocks to a uniform grid."""
        if self.dt is None:
            raise ValueError("only uniform-grid ensembles can be extended")
        start = self.t.size
        idx = np.arange(start, start + n_chunks * CHUNK)
        self._append(idx * self.dt)

    def _system(self, index):
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        h = realization_hamiltonian(self.params, index)
        system = _eigensystem(h, self.params.env_dim, (_R, _Z1, _Z2), index)
        if self._cache is not None:
            self._cache[index] = system
        return system

    def _one(self, index, times):
        return _evaluate(self._system(index), times)

    def _append(self, times):
        n = self.n_samples
        with threadpool_limits(limits=1):
            if self.threads == 1:
                values = [self._one(i, times) for i in range(n)]
            else:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    values = list(pool.map(lambda i: self._one(i, times), range(n)))
        block = np.stack(values)  # (n, T, 3)
        self.t = np.concatenate([self.t, times])
        self.r = np.concatenate([self.r, block[:, :, 0].real], axis=1)
        self.z1 = np.concatenate([self.z1, block[:, :, 1]], axis=1)
        self.z2 = np.concatenate([self.z2, block[:, :, 2]], axis=1)

    def _indices(self, k, indices):
        if indices is None:
            k = self.n_samples if k is None else int(k)
            if k < 1 or k > self.n_samples:
                raise ValueError(f"prefix size {k} outside 1..{self.n_samples}")
            return list(range(k))
        indices = list(indices)
        if not indices:
            raise EmptyEnsembleError("empty index list")
        return indices

    def purity_y(self, k: int | None = None, indices=None, start: int = 0) -> np.ndarray:
        """Mean-channel purity of the evolved sigma_y eigenstate from column ``start`` on.

        Bitwise equal to the corresponding slice of ``trajectory(k).purity_y()``.
        """
        indices = self._indices(k, indices)
        re1 = _mean_se([self.z1[i, start:].real for i in indices])[0]
        im1 = _mean_se([self.z1[i, start:].imag for i in indices])[0]
        re2 = _mean_se([self.z2[i, start:].real for i in indices])[0]
        im2 = _mean_se([self.z2[i, start:].imag for i in indices])[0]
        return purity_y(re1 + 1j * im1, re2 + 1j * im2)

    def trajectory(self, k: int | None = None, indices=None) -> ChannelTrajectory:
        """Ensemble mean over the first ``k`` realizations (or an explicit index list)."""
        indices = self._indices(k, indices)
        r, se_r = _mean_se([self.r[i] for i in indices])
        re1, se_re1 = _mean_se([self.z1[i].real for i in indices])
        im1, se_im1 = _mean_se([self.z1[i].imag for i in indices])
        re2, se_re2 = _mean_se([self.z2[i].real for i in indices])
        im2, se_im2 = _mean_se([self.z2[i].imag for i in indices])
        params = replace(self.params, n_samples=len(indices), time_grid=self.t.copy())
        return ChannelTrajectory(
            params, self.t.copy(), r, re1 + 1j * im1, re2 + 1j * im2,
            se_r, se_re1 + 1j * se_im1, se_re2 + 1j * se_im2, len(indices),
        )


def _mean_se(rows):
    # Fixed-order, two-pass accumulation: results depend only on the realization order.
    k = len(rows)
    total = np.zeros_like(rows[0])
    for row in rows:
        total += row
    mean = total / k
    if k < 2:
        return mean, np.zeros_like(mean)
    squares = np.zeros_like(mean)
    for row in rows:
        dev = row - mean
        squares += dev * dev
    return mean, np.sqrt(squares / (k - 1) / k)


def accumulate_ensemble(params: ModelParams, threads: int = 1) -> ChannelTrajectory:
    """Ensemble-averaged channel on ``params.time_grid``."""
    if params.n_samples < 1:
        raise EmptyEnsembleError("n_samples must be >= 1")
    if params.time_grid is None:
        raise ValueError("params.time_grid is required")
    return Ensemble(params, times=params.time_grid, threads=threads).trajectory()


def evolve_direct(h_total: np.ndarray, env_dim: int, rho: np.ndarray, times) -> np.ndarray:
    """Reduced states by explicit ``U(t) = expm(-iHt)`` on every environment basis state.

    Independent of the eigenbasis kernels used by :func:`propagate_channel`;
    intended for checks, cost is O(T N^3).
    """
    from scipy.linalg import expm

    n = env_dim
    out = []
    for t in np.atleast_1d(times):
        u = expm(-1j * t * h_total)
        # U (rho (x) 1/N) U^dagger, traced over the environment.
        blocks = [[u[a * n:(a + 1) * n, i * n:(i + 1) * n] for i in range(2)] for a in range(2)]
        state = np.zeros((2, 2), dtype=complex)
        for a in range(2):
            for b in range(2):
                acc = 0.0
                for i in range(2):
                    for j in range(2):
                        if rho[i, j] != 0:
                            acc = acc + rho[i, j] * np.trace(blocks[a][i] @ blocks[b][j].conj().T)
                state[a, b] = acc / n
        out.append(state)
    return np.array(out)
