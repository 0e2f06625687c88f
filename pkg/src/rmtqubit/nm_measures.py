"""Local Markovianity criteria and non-Markovianity measures for X-form channels.

All functions take a :class:`~rmtqubit.dynamics.ChannelTrajectory` on a
uniform time grid. Derivatives are estimated by finite differences; the
measures are evaluated up to the process ending time.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel_algebra import DEFAULT_TOL, choi_eigenvalues, intermediate_map, trace_norm
from .dynamics import ChannelPoint, ChannelTrajectory, purity_y

PURITY_THRESHOLD = 0.51
# Time points per block when scanning the state grid.
_SCAN_BLOCK = 2048


class InsufficientDataError(ValueError):
    pass


class EndingTimeNotReached(RuntimeError):
    pass


@dataclass
class MeasureConfig:
    tol: float = DEFAULT_TOL
    n_theta: int = 31
    n_phi: int = 31
    blp_R: float = 2.0
    purity_threshold: float = PURITY_THRESHOLD
    smooth_window: int | None = None

    def __post_init__(self):
        if self.n_theta < 2 or self.n_phi < 2:
            raise ValueError("state grid resolutions must be >= 2")
        if not 0 < self.blp_R <= 2:
            raise ValueError("blp_R must lie in (0, 2]")


@dataclass
class Derivatives:
    """Time derivatives of the channel parameters.

    ``D``, ``A`` and ``w`` are derivatives of ``|z1|^2 - |z2|^2``,
    ``|z1|^2 + |z2|^2`` and ``z1 conj(z2)``. They are insensitive to the
    common phase rotation of ``z1`` and are exactly zero for unitary
    evolution, unlike products formed from ``z1'`` and ``z2'``.
    """

    r: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    D: np.ndarray
    A: np.ndarray
    w: np.ndarray


@dataclass
class DivisibilityDeltas:
    t: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray
    deltaq: np.ndarray
    valid: np.ndarray


@dataclass
class ContractivityDeltas:
    t: np.ndarray
    deltaq: np.ndarray
    delta1C: np.ndarray
    delta2C: np.ndarray
    m_dot_max: np.ndarray


@dataclass(frozen=True)
class BlochPair:
    """Two initial states whose Bloch vectors differ by ``R`` along ``(theta, phi)``."""

    theta: float
    phi: float
    R: float = 2.0

    def __post_init__(self):
        if not 0 < self.R <= 2:
            raise ValueError("R must lie in (0, 2]")


@dataclass
class RHPResult:
    value: float
    g: np.ndarray
    cumulative: np.ndarray


@dataclass
class BLPResult:
    value: float
    theta: float
    phi: float
    cumulative: np.ndarray


@dataclass
class MDRResult:
    value: float
    theta: float
    phi: float
    t1: float
    t2: float
    cumulative: np.ndarray


@dataclass
class SigmaMax:
    """Time derivative of the trace distance along a fixed state pair.

    ``values`` sit at the interval midpoints ``t_mid``; ``nodes`` are their
    averages onto the grid points (central differences, one-sided at the ends).
    """

    t_mid: np.ndarray
    values: np.ndarray
    t: np.ndarray
    nodes: np.ndarray

    def positive_integral(self) -> float:
        return float(np.sum(np.clip(self.values, 0.0, None) * np.diff(self.t)))


@dataclass
class NMReport:
    delta: float
    lam: float
    t_end: float
    nm_rhp: float
    nm_blp: float
    nm_mdr: float
    blp_theta: float
    blp_phi: float
    mdr_theta: float
    mdr_phi: float
    mdr_t1: float
    mdr_t2: float
    blp_R: float
    env_dim: int
    n_samples: int
    seed: int
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform_step(t: np.ndarray) -> float:
    steps = np.diff(t)
    dt = steps.mean()
    if not np.allclose(steps, dt, rtol=1e-9, atol=0.0):
        raise ValueError("time grid is not uniform")
    return float(dt)


def estimate_derivatives(traj: ChannelTrajectory, smooth_window: int | None = None) -> Derivatives:
    """Second-order finite differences of ``r, z1, z2``.

    Central differences inside, one-sided second order at the ends. A
    positive odd ``smooth_window`` switches to a local cubic (Savitzky-Golay)
    derivative instead.
    """
    if len(traj) < 3:
        raise InsufficientDataError("need at least 3 time points for derivatives")
    dt = _uniform_step(traj.t)
    if smooth_window:
        from scipy.signal import savgol_filter

        def diff(f):
            return savgol_filter(f, smooth_window, 3, deriv=1, delta=dt, mode="interp")
    else:
        def diff(f):
            return np.gradient(f, dt, edge_order=2)

    def cdiff(z):
        return diff(z.real) + 1j * diff(z.imag)

    a1, a2 = np.abs(traj.z1) ** 2, np.abs(traj.z2) ** 2
    return Derivatives(
        diff(traj.r), cdiff(traj.z1), cdiff(traj.z2),
        diff(a1 - a2), diff(a1 + a2), cdiff(traj.z1 * np.conj(traj.z2)),
    )


def divisibility_deltas(traj: ChannelTrajectory, derivatives: Derivatives | None = None,
                        tol: float = DEFAULT_TOL) -> DivisibilityDeltas:
    der = derivatives if derivatives is not None else estimate_derivatives(traj)
    z1, z2 = traj.z1, traj.z2
    d = 2 * traj.r - 1
    D = np.abs(z1) ** 2 - np.abs(z2) ** 2
    valid = (np.abs(d) > tol) & (np.abs(D) > tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        # Re(z1' z1* - z2' z2*) = D' / 2
        delta1 = -0.5 * der.D / D
        deltaq = -der.r / d
        delta2 = np.abs(der.z2 * z1 - der.z1 * z2) / np.abs(D)
    return DivisibilityDeltas(traj.t, delta1, delta2, deltaq, valid)


def g_of_t(deltas: DivisibilityDeltas) -> np.ndarray:
    """Rate of trace-norm growth of the infinitesimal intermediate Choi matrix.

    Written as the sum of the negative parts of ``delta1 - deltaq``,
    ``deltaq + delta2`` and ``deltaq - delta2``, which equals
    ``(|d1-dq| + |dq+d2| + |dq-d2| - dq - d1) / 2`` and is exactly zero iff
    ``delta2 <= deltaq <= delta1``. NaN marks non-invertible points.
    """
    d1, d2, dq = deltas.delta1, deltas.delta2, deltas.deltaq
    with np.errstate(invalid="ignore"):
        g = (np.maximum(dq - d1, 0.0) + np.maximum(-dq - d2, 0.0) + np.maximum(d2 - dq, 0.0))
    return np.where(deltas.valid, g, np.nan)


def g_scalar(delta1: float, deltaq: float, delta2: float) -> float:
    return float(max(deltaq - delta1, 0.0) + max(-deltaq - delta2, 0.0) + max(delta2 - deltaq, 0.0))


def g_trace_norm(traj: ChannelTrajectory, derivatives: Derivatives | None = None,
                 eps: float = 1e-5, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Finite-epsilon trace-norm estimate of ``g``, Richardson-extrapolated.

    Builds the intermediate map from ``t`` to ``t + eps`` (channel advanced
    along the estimated derivatives), takes the trace norm of its Choi
    matrix from the closed-form eigenvalues, and extrapolates
    ``(||C|| - 2) / (2 eps)`` from ``eps, eps/2, eps/4`` to zero.
    """
    der = derivatives if derivatives is not None else estimate_derivatives(traj)
    out = np.full(len(traj), np.nan)
    for k in range(len(traj)):
        p = traj.point(k)
        est = []
        try:
            for e in (eps, eps / 2, eps / 4):
                ahead = ChannelPoint(p.t + e, p.r + e * der.r[k], p.z1 + e * der.z1[k], p.z2 + e * der.z2[k])
                m = intermediate_map(p, ahead, tol)
                est.append((trace_norm(choi_eigenvalues(m)) - 2.0) / (2.0 * e))
        except ValueError:
            continue
        g1, g2, g4 = est
        out[k] = (8.0 * g4 - 6.0 * g2 + g1) / 3.0
    return out


def _half_interval_trapezoid(t: np.ndarray, f: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid; an invalid point drops its half of each adjacent interval."""
    w = np.where(valid, np.nan_to_num(f), 0.0)
    dt = np.diff(t)
    pieces = 0.5 * dt * (w[:-1] + w[1:])
    return np.concatenate([[0.0], np.cumsum(pieces)])


def nm_rhp(traj: ChannelTrajectory, tol: float = DEFAULT_TOL,
           derivatives: Derivatives | None = None) -> RHPResult:
    deltas = divisibility_deltas(traj, derivatives, tol)
    g = g_of_t(deltas)
    cum = _half_interval_trapezoid(traj.t, g, deltas.valid)
    return RHPResult(float(cum[-1]), g, cum)


def trace_distance(p: ChannelPoint, pair: BlochPair) -> float:
    a = 2 * p.r - 1
    m = abs(p.z1 + p.z2 * np.exp(-2j * pair.phi)) ** 2
    return pair.R * math.sqrt(a * a * math.cos(pair.theta) ** 2 + m * math.sin(pair.theta) ** 2) / 2


def trace_distance_series(traj: ChannelTrajectory, theta, phi, R: float = 2.0) -> np.ndarray:
    """Trace distance over time, broadcast over arrays of ``theta`` and ``phi``.

    Returns shape ``(len(theta), len(phi), T)``.
    """
    theta = np.atleast_1d(theta)
    phi = np.atleast_1d(phi)
    a2 = (2 * traj.r - 1) ** 2
    m = np.abs(traj.z1[None, :] + traj.z2[None, :] * np.exp(-2j * phi)[:, None]) ** 2
    c2 = np.cos(theta)[:, None, None] ** 2
    s2 = np.sin(theta)[:, None, None] ** 2
    return 0.5 * R * np.sqrt(a2[None, None, :] * c2 + m[None, :, :] * s2)


def state_grid(n_theta: int, n_phi: int) -> tuple[np.ndarray, np.ndarray]:
    """Polar angles on ``[0, pi/2]`` and azimuths on ``[0, pi)``.

    The trace distance depends on ``cos^2``/``sin^2`` of the polar angle and
    is pi-periodic in the azimuth, so this covers all pairs.
    """
    return np.linspace(0.0, math.pi / 2, n_theta), np.arange(n_phi) * (math.pi / n_phi)


def _scan(traj: ChannelTrajectory, n_theta: int, n_phi: int, R: float):
    """One blocked pass over time for every state on the grid.

    Returns per-state backflow sums and best recoveries, plus the
    horizon-resolved maxima over states.
    """
    theta, phi = state_grid(n_theta, n_phi)
    n_t = len(traj)
    n_states = n_theta * n_phi
    last = None
    backflow = np.zeros(n_states)
    run_min = np.full(n_states, np.inf)
    best = np.zeros(n_states)
    blp_series = np.empty(n_t)
    mdr_series = np.empty(n_t)
    for start in range(0, n_t, _SCAN_BLOCK):
        block = traj.head(min(start + _SCAN_BLOCK, n_t))
        T = trace_distance_series(_Window(block, start), theta, phi, R).reshape(n_states, -1)
        prev = T[:, :1] if last is None else last[:, None]
        steps = np.diff(np.concatenate([prev, T], axis=1), axis=1)
        cum = backflow[:, None] + np.cumsum(np.clip(steps, 0.0, None), axis=1)
        backflow = cum[:, -1].copy()
        blp_series[start:start + T.shape[1]] = cum.max(axis=0)
        mins = np.minimum.accumulate(np.concatenate([run_min[:, None], T], axis=1), axis=1)[:, 1:]
        gains = np.maximum.accumulate(
            np.concatenate([best[:, None], T - mins], axis=1), axis=1)[:, 1:]
        run_min = mins[:, -1].copy()
        best = gains[:, -1].copy()
        mdr_series[start:start + T.shape[1]] = gains.max(axis=0)
        last = T[:, -1].copy()
    return theta, phi, backflow, blp_series, best, mdr_series


class _Window:
    def __init__(self, traj, start):
        self.t = traj.t[start:]
        self.r = traj.r[start:]
        self.z1 = traj.z1[start:]
        self.z2 = traj.z2[start:]


def _unravel(k: int, n_phi: int, theta, phi):
    return float(theta[k // n_phi]), float(phi[k % n_phi])


def nm_blp(traj: ChannelTrajectory, n_theta: int = 31, n_phi: int = 31, R: float = 2.0) -> BLPResult:
    """Largest summed trace-distance increase over the state grid.

    Ties go to the smallest polar angle, then the smallest azimuth.
    """
    if n_theta < 2 or n_phi < 2:
        raise ValueError("state grid resolutions must be >= 2")
    theta, phi, backflow, series, _, _ = _scan(traj, n_theta, n_phi, R)
    k = int(np.argmax(backflow))
    th, ph = _unravel(k, n_phi, theta, phi)
    return BLPResult(float(backflow[k]), th, ph, series)


def nm_mdr(traj: ChannelTrajectory, n_theta: int = 31, n_phi: int = 31, R: float = 2.0) -> MDRResult:
    """Largest recovery ``T(t1) - T(t2)`` with ``t1 >= t2`` over the state grid."""
    if n_theta < 2 or n_phi < 2:
        raise ValueError("state grid resolutions must be >= 2")
    theta, phi, _, _, best, series = _scan(traj, n_theta, n_phi, R)
    k = int(np.argmax(best))
    th, ph = _unravel(k, n_phi, theta, phi)
    T = trace_distance_series(traj, th, ph, R)[0, 0]
    mins = np.minimum.accumulate(T)
    i1 = int(np.argmax(T - mins))
    i2 = int(np.argmin(T[:i1 + 1]))
    return MDRResult(float(best[k]), th, ph, float(traj.t[i1]), float(traj.t[i2]), series)


def contractivity_deltas(traj: ChannelTrajectory, derivatives: Derivatives | None = None) -> ContractivityDeltas:
    der = derivatives if derivatives is not None else estimate_derivatives(traj)
    z1, z2 = traj.z1, traj.z2
    with np.errstate(divide="ignore", invalid="ignore"):
        deltaq = -der.r / (2 * traj.r - 1)
    # Re(z1' z1* + z2' z2*) = A' / 2 and z1' z2* + z1 z2'* = w'
    delta1C = -0.5 * der.A
    delta2C = np.abs(der.w)
    return ContractivityDeltas(traj.t, deltaq, delta1C, delta2C, der.A + 2 * delta2C)


def sigma_max(traj: ChannelTrajectory, theta: float, phi: float, R: float = 2.0) -> SigmaMax:
    T = trace_distance_series(traj, theta, phi, R)[0, 0]
    t = traj.t
    mid = np.diff(T) / np.diff(t)
    nodes = np.empty_like(T)
    if T.size > 1:
        nodes[1:-1] = 0.5 * (mid[:-1] + mid[1:])
        nodes[0], nodes[-1] = mid[0], mid[-1]
    else:
        nodes[:] = 0.0
    return SigmaMax(0.5 * (t[:-1] + t[1:]), mid, t, nodes)


def ending_time(traj: ChannelTrajectory, threshold: float = PURITY_THRESHOLD) -> float:
    """First time the evolved sigma_y eigenstate reaches purity ``threshold``.

    Linear interpolation between the bracketing grid points; later
    re-crossings are ignored.
    """
    p = purity_y(traj.z1, traj.z2)
    hits = np.nonzero(p <= threshold)[0]
    if hits.size == 0:
        raise EndingTimeNotReached(
            f"purity stays above {threshold} up to t={traj.t[-1]:.6g} (min {p.min():.6g})"
        )
    i = int(hits[0])
    if i == 0:
        return float(traj.t[0])
    frac = (p[i - 1] - threshold) / (p[i - 1] - p[i])
    return float(traj.t[i - 1] + frac * (traj.t[i] - traj.t[i - 1]))


@dataclass
class Analysis:
    """Everything computed for one trajectory up to its ending time."""

    report: NMReport
    trajectory: ChannelTrajectory
    derivatives: Derivatives
    divisibility: DivisibilityDeltas
    contractivity: ContractivityDeltas
    rhp: RHPResult
    blp: BLPResult
    mdr: MDRResult
    sigma: SigmaMax

    def criteria_table(self) -> dict[str, np.ndarray]:
        d, c = self.divisibility, self.contractivity
        return {
            "t": d.t, "delta1": d.delta1, "delta2": d.delta2, "deltaq": d.deltaq,
            "g": self.rhp.g, "delta1C": c.delta1C, "delta2C": c.delta2C,
            "sigma_max": self.sigma.nodes, "valid": d.valid,
        }


def analyze(traj: ChannelTrajectory, config: MeasureConfig | None = None) -> Analysis:
    """Ending time, local criteria and the three measures for one trajectory."""
    cfg = config or MeasureConfig()
    flags = []
    try:
        t_end = ending_time(traj, cfg.purity_threshold)
    except EndingTimeNotReached:
        t_end = float(traj.t[-1])
        flags.append("t_end_not_reached")
    seg = traj.up_to(t_end)
    if len(seg) < 3:
        seg = traj.head(3)
        flags.append("short_process")
    der = estimate_derivatives(seg, cfg.smooth_window)
    div = divisibility_deltas(seg, der, cfg.tol)
    con = contractivity_deltas(seg, der)
    rhp = nm_rhp(seg, cfg.tol, der)
    blp = nm_blp(seg, cfg.n_theta, cfg.n_phi, cfg.blp_R)
    mdr = nm_mdr(seg, cfg.n_theta, cfg.n_phi, cfg.blp_R)
    sig = sigma_max(seg, blp.theta, blp.phi, cfg.blp_R)
    if not div.valid.all():
        flags.append("non_invertible_points")
    p = traj.params
    report = NMReport(
        delta=float(p.delta), lam=float(p.lam), t_end=t_end,
        nm_rhp=rhp.value, nm_blp=blp.value, nm_mdr=mdr.value,
        blp_theta=blp.theta, blp_phi=blp.phi,
        mdr_theta=mdr.theta, mdr_phi=mdr.phi, mdr_t1=mdr.t1, mdr_t2=mdr.t2,
        blp_R=float(cfg.blp_R), env_dim=int(p.env_dim), n_samples=int(traj.n_accumulated),
        seed=int(p.master_seed), flags=flags,
    )
    return Analysis(report, seg, der, div, con, rhp, blp, mdr, sig)
