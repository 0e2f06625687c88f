"""Per-point pipeline, grid sweeps with checkpoints, and sample-size studies."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .dynamics import HEISENBERG_TIME, Ensemble, ModelParams, ChannelTrajectory
from .nm_measures import Analysis, MeasureConfig, NMReport, analyze, ending_time, EndingTimeNotReached

log = logging.getLogger(__name__)

DESK_SHAPE = (9, 8)
FULL_SHAPE = (25, 16)
DELTA_RANGE = (0.016, 16.0)
LAMBDA_RANGE = (1.0 / 32.0, 0.5)
MAX_REFINE_LEVEL = 12


class ConfigError(ValueError):
    """Bad configuration file or override."""


@dataclass
class RunSettings:
    """Time-grid and measure controls shared by every point of a run.

    ``dt=None`` selects ``min(2 pi / delta, 2 pi) / 40``. When the ending
    time is reached after fewer than ``min_points`` steps, the step is
    halved until it is not.
    """

    dt: float | None = None
    t_max: float = 200.0 * HEISENBERG_TIME
    min_points: int = 400
    measure: MeasureConfig = field(default_factory=MeasureConfig)
    threads: int = 1

    def __post_init__(self):
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.min_points < 3:
            raise ValueError("min_points must be >= 3")


@dataclass
class ParameterGrid:
    delta_values: np.ndarray
    lambda_values: np.ndarray
    env_dim: int = 64
    n_samples: int = 160
    master_seed: int = 0

    def __post_init__(self):
        self.delta_values = np.asarray(self.delta_values, dtype=float)
        self.lambda_values = np.asarray(self.lambda_values, dtype=float)
        for name, v in (("delta_values", self.delta_values), ("lambda_values", self.lambda_values)):
            if v.ndim != 1 or v.size == 0:
                raise ValueError(f"{name} must be a non-empty 1-d sequence")
            if np.any(np.diff(v) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
        if np.any(self.delta_values <= 0):
            raise ValueError("delta_values must be positive")
        if np.any(self.lambda_values < 0):
            raise ValueError("lambda_values must be non-negative")

    @classmethod
    def from_bounds(cls, delta_min=DELTA_RANGE[0], delta_max=DELTA_RANGE[1], delta_count=DESK_SHAPE[0],
                    lambda_min=LAMBDA_RANGE[0], lambda_max=LAMBDA_RANGE[1], lambda_count=DESK_SHAPE[1],
                    env_dim=64, n_samples=160, master_seed=0):
        deltas = np.geomspace(delta_min, delta_max, int(delta_count))
        lambdas = np.linspace(lambda_min, lambda_max, int(lambda_count))
        return cls(deltas, lambdas, env_dim, n_samples, master_seed)

    @classmethod
    def desk(cls, master_seed=0):
        return cls.from_bounds(master_seed=master_seed)

    @classmethod
    def full(cls, master_seed=0):
        return cls.from_bounds(delta_count=FULL_SHAPE[0], lambda_count=FULL_SHAPE[1],
                               env_dim=200, n_samples=2400, master_seed=master_seed)

    def params(self):
        for d in self.delta_values:
            for lam in self.lambda_values:
                yield ModelParams(float(d), float(lam), self.env_dim, self.n_samples, master_seed=self.master_seed)

    def __len__(self):
        return self.delta_values.size * self.lambda_values.size


@dataclass
class SweepRecord:
    delta: float
    lam: float
    t_end: float
    nm_rhp: float
    nm_blp: float
    nm_mdr: float
    n_samples_used: int
    wall_time: float
    flags: list[str] = field(default_factory=list)

    @classmethod
    def from_report(cls, report: NMReport, wall_time: float) -> "SweepRecord":
        return cls(report.delta, report.lam, report.t_end, report.nm_rhp, report.nm_blp,
                   report.nm_mdr, report.n_samples, wall_time, list(report.flags))


@dataclass
class ConvergenceSeries:
    sample_prefix_sizes: np.ndarray
    t_end: np.ndarray
    nm_rhp: np.ndarray
    nm_blp: np.ndarray
    nm_mdr: np.ndarray
    reports: list[NMReport]


@dataclass
class PointResult:
    trajectory: ChannelTrajectory
    analysis: Analysis
    refine_level: int

    @property
    def report(self) -> NMReport:
        return self.analysis.report


class PointRunner:
    """Simulates one parameter point and serves any subset of its realizations.

    Eigensystems are computed once and shared between grid refinements;
    per-realization data are kept so that prefixes and resamples of the
    ensemble cost no new diagonalizations.
    """

    def __init__(self, params: ModelParams, settings: RunSettings | None = None):
        self.params = replace(params, time_grid=None)
        self.settings = settings or RunSettings()
        self.dt0 = self.settings.dt or params.default_dt()
        self._ensembles: dict[int, Ensemble] = {}

    def ensemble(self, level: int) -> Ensemble:
        if level not in self._ensembles:
            dt = self.dt0 / 2 ** level
            if self._ensembles:
                ens = next(iter(self._ensembles.values())).sibling(dt)
            else:
                ens = Ensemble(self.params, dt=dt, threads=self.settings.threads)
            self._ensembles[level] = ens
        return self._ensembles[level]

    def _cover(self, ens: Ensemble, k=None, indices=None, t_stop=None) -> None:
        """Extend ``ens`` until the purity crossing (or ``t_stop``, or t_max) is on the grid."""
        s = self.settings
        start = 0
        while True:
            if ens.n_times > start:
                if t_stop is not None:
                    if ens.t[-1] >= t_stop:
                        return
                else:
                    p = ens.purity_y(k, indices, start)
                    hit = (p <= s.measure.purity_threshold) & (ens.t[start:] <= s.t_max)
                    if hit.any():
                        return
                if ens.t[-1] >= s.t_max:
                    return
                start = ens.n_times
            ens.extend(1)

    def refine_level(self, t_end: float) -> int:
        if t_end <= 0:
            return 0
        need = self.settings.min_points * self.dt0 / t_end
        return min(MAX_REFINE_LEVEL, max(0, math.ceil(math.log2(need)))) if need > 1 else 0

    def _trajectory(self, ens: Ensemble, k, indices) -> ChannelTrajectory:
        return ens.trajectory(k, indices).up_to(self.settings.t_max)

    def trajectory(self, k: int | None = None, indices=None) -> tuple[ChannelTrajectory, int]:
        """Mean trajectory over a prefix (or index list) and the grid refinement used."""
        coarse = self.ensemble(0)
        self._cover(coarse, k, indices)
        traj = self._trajectory(coarse, k, indices)
        try:
            t_end = ending_time(traj, self.settings.measure.purity_threshold)
        except EndingTimeNotReached:
            return traj, 0
        level = self.refine_level(t_end)
        if level == 0:
            return traj, 0
        fine = self.ensemble(level)
        self._cover(fine, k, indices)
        return self._trajectory(fine, k, indices), level

    def run(self, k: int | None = None, indices=None) -> PointResult:
        traj, level = self.trajectory(k, indices)
        return PointResult(traj, analyze(traj, self.settings.measure), level)


def provenance(settings: RunSettings, result: PointResult | None = None) -> dict:
    import scipy

    m = settings.measure
    out = {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "blp_R": m.blp_R,
        "n_theta": m.n_theta,
        "n_phi": m.n_phi,
        "tol": m.tol,
        "purity_threshold": m.purity_threshold,
        "smooth_window": m.smooth_window,
        "t_max": settings.t_max,
        "min_points": settings.min_points,
        "z_convention": "z1=<0|L(|0><1|)|1>, z2=<0|L(|1><0|)|1>",
    }
    if result is not None:
        t = result.trajectory.t
        out["dt"] = float(t[1] - t[0]) if t.size > 1 else None
        out["refine_level"] = result.refine_level
    return out


def point_stem(params: ModelParams) -> str:
    return (f"d{params.delta:.15g}_l{params.lam:.15g}_N{params.env_dim}"
            f"_S{params.n_samples}_seed{params.master_seed}")


def trajectory_path(out_dir, params: ModelParams) -> Path:
    return Path(out_dir) / f"traj_{point_stem(params)}.csv"


def report_path(out_dir, params: ModelParams) -> Path:
    return Path(out_dir) / f"report_{point_stem(params)}.json"


def evaluate_point(params: ModelParams, settings: RunSettings | None = None) -> PointResult:
    return PointRunner(params, settings).run()


def run_point(params: ModelParams, settings: RunSettings | None = None,
              out_dir=None) -> tuple[ChannelTrajectory, NMReport]:
    """Simulate, find the ending time, and evaluate every measure for one point.

    With ``out_dir`` the trajectory CSV and report JSON are written there.
    """
    settings = settings or RunSettings()
    result = evaluate_point(params, settings)
    if out_dir is not None:
        save_point(out_dir, params, result, settings)
    return result.trajectory, result.report


def save_point(out_dir, params: ModelParams, result: PointResult, settings: RunSettings):
    fio.write_trajectory(trajectory_path(out_dir, params), result.trajectory)
    fio.write_report(report_path(out_dir, params), result.report.to_dict(), provenance(settings, result))


def sweep_header(grid: ParameterGrid, settings: RunSettings) -> str:
    return (f"N={grid.env_dim} N_sam={grid.n_samples} seed={grid.master_seed} "
            f"blp_R={settings.measure.blp_R:g} version={__version__}")


def run_sweep(grid: ParameterGrid, out_dir, settings: RunSettings | None = None,
              resume: bool = True, sweep_name: str = "sweep.csv") -> list[SweepRecord]:
    """Run every grid point, checkpointing one trajectory file per point.

    Points whose trajectory file already exists are re-analyzed from that
    file instead of re-simulated. A failing point is recorded with NaN
    values and a ``failed:<error>`` flag; the sweep continues. The sweep
    CSV is rewritten after every point.
    """
    settings = settings or RunSettings()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = sweep_header(grid, settings)
    records: list[SweepRecord] = []
    for params in grid.params():
        t0 = time.perf_counter()
        path = trajectory_path(out_dir, params)
        try:
            report = None
            if resume and path.exists():
                try:
                    traj = fio.validate_trajectory_file(path)
                    report = analyze(traj, settings.measure).report
                    log.info("resumed %s", path.name)
                except fio.TrajectoryFormatError as exc:
                    log.warning("discarding checkpoint %s: %s", path.name, exc)
            if report is None:
                result = evaluate_point(params, settings)
                save_point(out_dir, params, result, settings)
                report = result.report
            rec = SweepRecord.from_report(report, time.perf_counter() - t0)
        except Exception as exc:  # recorded, sweep continues
            log.error("point delta=%g lambda=%g failed: %s", params.delta, params.lam, exc)
            nan = float("nan")
            rec = SweepRecord(params.delta, params.lam, nan, nan, nan, nan, params.n_samples,
                              time.perf_counter() - t0, [f"failed:{type(exc).__name__}"])
        records.append(rec)
        log.info("delta=%.4g lambda=%.4g t_end=%.4g rhp=%.4g blp=%.4g mdr=%.4g (%.1fs)",
                 rec.delta, rec.lam, rec.t_end, rec.nm_rhp, rec.nm_blp, rec.nm_mdr, rec.wall_time)
        fio.write_sweep(out_dir / sweep_name, records, header)
    return records


def convergence_study(params: ModelParams, prefix_sizes, settings: RunSettings | None = None,
                      runner: PointRunner | None = None) -> ConvergenceSeries:
    """Measures on growing prefixes of one ensemble.

    Prefix ``k`` gives the same report as a fresh run with ``n_samples=k``
    and the same seed.
    """
    sizes = np.asarray(prefix_sizes, dtype=int)
    if sizes.ndim != 1 or sizes.size == 0:
        raise ValueError("prefix_sizes must be a non-empty sequence")
    if np.any(np.diff(sizes) <= 0) or sizes[0] < 1:
        raise ValueError("prefix_sizes must be positive and increasing")
    if sizes[-1] > params.n_samples:
        raise ValueError(f"prefix size {sizes[-1]} exceeds n_samples={params.n_samples}")
    runner = runner or PointRunner(params, settings)
    reports = [runner.run(int(k)).report for k in sizes]
    col = lambda name: np.array([getattr(r, name) for r in reports])  # noqa: E731
    return ConvergenceSeries(sizes, col("t_end"), col("nm_rhp"), col("nm_blp"), col("nm_mdr"), reports)


def prefix_sizes(n_samples: int, smallest: int = 10, count: int = 5) -> np.ndarray:
    """Log-spaced prefix sizes ending at ``n_samples``."""
    sizes = np.unique(np.round(np.geomspace(min(smallest, n_samples), n_samples, count)).astype(int))
    return sizes


def bootstrap_samples(runner: PointRunner, n_boot: int = 50, seed: int = 0) -> dict[str, np.ndarray]:
    """Measures on ``n_boot`` resamples (with replacement) of the realizations.

    Resamples are evaluated on the grid chosen for the full ensemble. The
    resample indices depend only on ``seed`` and ``n_samples``, so two points
    bootstrapped with the same seed are paired.
    """
    full, level = runner.trajectory()
    ens = runner.ensemble(level)
    try:
        t_end = ending_time(full, runner.settings.measure.purity_threshold)
        runner._cover(ens, t_stop=min(1.5 * t_end, runner.settings.t_max))
    except EndingTimeNotReached:
        pass
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    n = runner.params.n_samples
    values = {"nm_rhp": [], "nm_blp": [], "nm_mdr": []}
    for _ in range(n_boot):
        idx = np.sort(rng.integers(0, n, size=n))
        rep = analyze(ens.trajectory(indices=idx).up_to(runner.settings.t_max), runner.settings.measure).report
        for key in values:
            values[key].append(getattr(rep, key))
    return {key: np.array(v) for key, v in values.items()}


def bootstrap_measures(runner: PointRunner, n_boot: int = 50, seed: int = 0) -> dict[str, float]:
    """Bootstrap standard errors of the three measures over realizations."""
    return {key: float(np.std(v, ddof=1)) for key, v in bootstrap_samples(runner, n_boot, seed).items()}


CONFIG_KEYS = {
    "delta_min": float, "delta_max": float, "delta_count": int,
    "lambda_min": float, "lambda_max": float, "lambda_count": int,
    "env_dim": int, "n_samples": int, "seed": int,
    "delta": float, "lambda": float,
    "dt": float, "t_max": float, "min_points": int,
    "blp_R": float, "n_theta": int, "n_phi": int, "tol": float,
    "purity_threshold": float, "smooth_window": int, "threads": int,
    "full_grid": bool, "prefixes": str,
}


def _convert(key: str, raw: str):
    kind = CONFIG_KEYS[key]
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if key in ("dt", "smooth_window") and raw.lower() in ("", "none", "default"):
        return None
    try:
        if kind is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError
            return int(value)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_assignment(text: str, where: str = "override") -> tuple[str, object]:
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"{where}: expected key=value, got {text!r}")
    if key not in CONFIG_KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    return key, _convert(key, value)


def load_config(path) -> dict:
    """Flat ``key=value`` file; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            key, value = parse_assignment(line, f"{path}:{lineno}")
            cfg[key] = value
    return cfg


def settings_from_config(cfg: dict) -> RunSettings:
    m = MeasureConfig(
        tol=cfg.get("tol", 1e-6), n_theta=cfg.get("n_theta", 31), n_phi=cfg.get("n_phi", 31),
        blp_R=cfg.get("blp_R", 2.0), purity_threshold=cfg.get("purity_threshold", 0.51),
        smooth_window=cfg.get("smooth_window"),
    )
    return RunSettings(
        dt=cfg.get("dt"), t_max=cfg.get("t_max", 200.0 * HEISENBERG_TIME),
        min_points=cfg.get("min_points", 400), measure=m, threads=cfg.get("threads", 1),
    )


def grid_from_config(cfg: dict) -> ParameterGrid:
    full = cfg.get("full_grid", False)
    shape = FULL_SHAPE if full else DESK_SHAPE
    return ParameterGrid.from_bounds(
        delta_min=cfg.get("delta_min", DELTA_RANGE[0]), delta_max=cfg.get("delta_max", DELTA_RANGE[1]),
        delta_count=cfg.get("delta_count", shape[0]),
        lambda_min=cfg.get("lambda_min", LAMBDA_RANGE[0]), lambda_max=cfg.get("lambda_max", LAMBDA_RANGE[1]),
        lambda_count=cfg.get("lambda_count", shape[1]),
        env_dim=cfg.get("env_dim", 200 if full else 64),
        n_samples=cfg.get("n_samples", 2400 if full else 160),
        master_seed=cfg.get("seed", 0),
    )


def params_from_config(cfg: dict) -> ModelParams:
    missing = [k for k in ("delta", "lambda") if k not in cfg]
    if missing:
        raise ConfigError(f"missing {', '.join(missing)} for a single point")
    return ModelParams(cfg["delta"], cfg["lambda"], cfg.get("env_dim", 64),
                       cfg.get("n_samples", 160), master_seed=cfg.get("seed", 0))
