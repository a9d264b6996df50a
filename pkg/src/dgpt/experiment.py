"""Scenario configuration, single runs, Monte-Carlo sweeps and the timing benchmark.

Run ``k`` of a sweep with master seed ``s`` uses the integer seed drawn from
``SeedSequence([s, k])``, so any run can be repeated on its own and adding
runs never changes earlier ones.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregate import GPOE, RBCM, AggregationMethod, ExpertPrediction
from .gp import Dataset, Hyperparameters, NumericalError, lml_and_gradient
from .hybrid import PoissonLikelihoodParams, hybrid_step
from .sim import (
    Field,
    MeasurementStreams,
    NetworkConfig,
    SCENARIOS,
    TrajectoryConfig,
    TrajectoryEscapeError,
    build_grid,
    generate_measurements,
    generate_trajectory,
    group_by_sensor,
)
from .tracker import STGP, TGP, TrackerConfig, centralized_step, init_state, step
from .ucb import DEFAULT_DELTA, one_step_ucb, split_gammas

DGP, HYBRID, CENTRALIZED = "dgp", "hybrid", "centralized"
TRACKERS = (DGP, HYBRID, CENTRALIZED)
WORKERS_ENV = "DGPT_WORKERS"


class ConfigError(ValueError):
    """Invalid or unreadable scenario configuration."""


class DegenerateRangeError(ValueError):
    """Truth has zero range, so NRMSE is undefined."""


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    # world
    field_size: tuple[float, float] = (1000.0, 1000.0)
    n_sensors: int = 250
    sensor_layout: str = "lattice"
    sensing_radius: float = 50.0
    # target
    scenario: str = "S1"
    length: int = 100
    start: tuple[float, float] = (150.0, 200.0)
    speed: float = 10.0
    heading_deg: float = 0.0
    waypoints: tuple[tuple[float, float], ...] = TrajectoryConfig().waypoints
    ncv_accel_std: float = 0.05
    straight_duration: int = 10
    turn_rate_deg: float = 20.0
    turn_duration: int = 10
    max_accel: float = 50.0
    p_no_accel: float = 0.4
    tau: float = 10.0
    max_speed: float = 15.0
    # sensing
    sigma_z: float = 1.0
    clutter_rate: float = 1.0
    lambda_target: float = 1.0
    # tracker
    window: int = 5
    feature_mode: str = TGP
    method: str = RBCM
    weight_rule: str = "entropy"
    tracker: str = DGP
    learn_noise: bool = True
    delta: float = DEFAULT_DELTA
    # experiment
    seed: int = 0
    runs: int = 100

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.tracker not in TRACKERS:
            raise ConfigError(f"tracker must be one of {TRACKERS}, got {self.tracker!r}")
        if self.feature_mode not in (TGP, STGP):
            raise ConfigError(f"feature_mode must be tgp or stgp, got {self.feature_mode!r}")
        if self.runs < 1 or self.length < 2 or self.window < 1 or self.n_sensors < 1:
            raise ConfigError("runs, window and n_sensors must be >= 1 and length >= 2")
        if not (self.sigma_z > 0 and self.clutter_rate >= 0 and self.lambda_target > 0):
            raise ConfigError("need sigma_z > 0, clutter_rate >= 0, lambda_target > 0")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        try:
            self.aggregation()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = dict(data)
        for key in ("field_size", "start"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        if "waypoints" in kw:
            kw["waypoints"] = tuple(tuple(float(c) for c in w) for w in kw["waypoints"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def aggregation(self) -> AggregationMethod:
        return AggregationMethod.parse(self.method, self.weight_rule)

    def field(self) -> Field:
        return Field(0.0, 0.0, *self.field_size)

    def network(self, seed: int = 0):
        return build_grid(
            NetworkConfig(self.n_sensors, self.sensing_radius, self.field(), self.sensor_layout, seed)
        )

    def trajectory(self) -> TrajectoryConfig:
        names = {f.name for f in dataclasses.fields(TrajectoryConfig)}
        return TrajectoryConfig(**{k: v for k, v in self.to_dict().items() if k in names})

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(
            window=self.window,
            feature_mode=self.feature_mode,
            method=self.aggregation(),
            learn_noise=self.learn_noise,
            pinned_noise_variance=None if self.learn_noise else self.sigma_z**2,
        )

    @property
    def variant(self) -> str:
        return f"{self.tracker}-{self.method}-{self.feature_mode}"


def default_config(scenario: str) -> ScenarioConfig:
    """Shipped defaults for ``S1``..``S4``."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"no default config for {scenario!r}")
    text = resources.files("dgpt.scenarios").joinpath(f"{scenario.lower()}.json").read_text()
    return ScenarioConfig.from_dict(json.loads(text))


# -- metrics ------------------------------------------------------------------


def nrmse(estimates, truth) -> float:
    """Root-mean-square error over the range of ``truth``, in percent."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape or tru.size == 0:
        raise ValueError("estimates and truth must be equally long and non-empty")
    span = float(tru.max() - tru.min())
    if not span > 0:
        raise DegenerateRangeError("truth is constant")
    return 100.0 * math.sqrt(float(np.mean((est - tru) ** 2))) / span


# -- single run ---------------------------------------------------------------

STEP_FIELDS = (
    "t", "truth_x", "truth_y", "est_x", "est_y", "var_x", "var_y",
    "ucb_x", "ucb_y", "covered_x", "covered_y", "n_meas", "n_active",
)  # fmt: skip


@dataclass(frozen=True)
class StepRecord:
    t: int
    truth_x: float
    truth_y: float
    est_x: float
    est_y: float
    var_x: float
    var_y: float
    ucb_x: float
    ucb_y: float
    covered_x: bool
    covered_y: bool
    n_meas: int
    n_active: int

    def row(self) -> list:
        return [getattr(self, f) for f in STEP_FIELDS]

    def ci_covered(self, coord: int, k: float = 3.0) -> bool:
        """Whether the k-sigma interval of the reported variance holds the truth."""
        est, tru, var = (
            (self.est_x, self.truth_x, self.var_x) if coord == 0 else (self.est_y, self.truth_y, self.var_y)
        )
        return abs(tru - est) <= k * math.sqrt(var)


@dataclass
class RunResult:
    seed: int
    variant: str
    records: list[StepRecord] = field(default_factory=list)
    wall_time_ms: float = 0.0
    step_times_ms: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def rmse(self, coord: int) -> float:
        c = "xy"[coord]
        err = self.column(f"est_{c}") - self.column(f"truth_{c}")
        return math.sqrt(float(np.mean(err**2)))

    def nrmse(self, coord: int) -> float:
        c = "xy"[coord]
        return nrmse(self.column(f"est_{c}"), self.column(f"truth_{c}"))

    def ucb_coverage(self, coord: int) -> float:
        return float(np.mean(self.column(f"covered_{'xy'[coord]}")))

    def ci_coverage(self, coord: int, k: float = 3.0) -> float:
        return float(np.mean([r.ci_covered(coord, k) for r in self.records]))


def _bound(experts: Sequence[ExpertPrediction], method: str, delta: float, prior_var: float) -> float:
    gammas = split_gammas(len(experts), delta)
    if method in (GPOE, RBCM):
        return one_step_ucb(experts, gammas, method, prior_var).bound
    # PoE and BCM carry no weights: the GPoE expression with unit weights
    unit = [ExpertPrediction(e.mean, e.variance, 1.0) for e in experts]
    return one_step_ucb(unit, gammas, GPOE).bound


def _record(t, truth, mean, var, ucb, n_meas, n_active) -> StepRecord:
    err = np.abs(np.asarray(truth) - np.asarray(mean))
    return StepRecord(
        int(t), float(truth[0]), float(truth[1]), float(mean[0]), float(mean[1]),
        float(var[0]), float(var[1]), float(ucb[0]), float(ucb[1]),
        bool(err[0] <= ucb[0]), bool(err[1] <= ucb[1]), int(n_meas), int(n_active),
    )  # fmt: skip


def run_scenario(config: ScenarioConfig, seed: int) -> RunResult | tuple[RunResult, RunResult]:
    """One simulated track.

    For ``tracker="hybrid"`` the distributed tracker runs underneath to
    supply the prior, and both results are returned as ``(hybrid, dgp)``.
    A numerical failure ends the run with ``error`` set.
    """
    tcfg = config.tracker_config()
    stepper = centralized_step if config.tracker == CENTRALIZED else step
    base_variant = config.replace(tracker=DGP).variant if config.tracker == HYBRID else config.variant
    main = RunResult(seed, base_variant)
    hyb = RunResult(seed, config.variant) if config.tracker == HYBRID else None
    network = config.network(seed)
    params = PoissonLikelihoodParams(
        config.lambda_target, config.clutter_rate, network.sensing_area, config.sigma_z**2
    )
    kind = tcfg.method.kind
    try:
        traj = generate_trajectory(config.trajectory(), seed, config.field())
        streams = MeasurementStreams(seed)
        state = init_state(tcfg)
        prior = None
        t_start = time.perf_counter()
        for k, t in enumerate(traj.times):
            truth = traj.positions[k]
            meas = generate_measurements(
                network, truth, int(t), config.sigma_z, config.clutter_rate, streams, config.lambda_target
            )
            t0 = time.perf_counter()
            state, est = stepper(state, group_by_sensor(meas), int(t))
            main.step_times_ms.append(1e3 * (time.perf_counter() - t0))
            if est is None:
                # nothing observed yet: report the zero-mean prior
                mean, var, ucb, n_active = (0.0, 0.0), (np.inf, np.inf), (np.inf, np.inf), 0
            else:
                mean, var = est.mean, est.variance
                n_active = est.active_sensor_count
                if est.coasted:
                    ucb = tuple(
                        math.sqrt(split_gammas(1, config.delta)[0] * v) for v in est.variance
                    )
                else:
                    ucb = tuple(
                        _bound(est.expert_predictions[c], kind, config.delta, est.prior_variance[c])
                        for c in (0, 1)
                    )
            main.records.append(_record(t, truth, mean, var, ucb, len(meas), n_active))

            if hyb is not None:
                values = np.array([m.value for m in meas]).reshape(-1, 2)
                if prior is None:
                    # no next-step prior yet: report what the tracker has
                    h_mean, h_var = mean, var
                else:
                    post = hybrid_step(prior, values, params)
                    h_mean = (post[0].mean, post[1].mean)
                    h_var = (post[0].variance, post[1].variance)
                g = split_gammas(1, config.delta)[0]
                h_ucb = tuple(math.sqrt(g * v) for v in h_var)
                hyb.records.append(_record(t, truth, h_mean, h_var, h_ucb, len(meas), n_active))
            if est is not None:
                prior = (est.next_prior_x, est.next_prior_y)
        main.wall_time_ms = 1e3 * (time.perf_counter() - t_start)
    except (NumericalError, TrajectoryEscapeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        main.error = f"{type(exc).__name__}: {exc}"
        if hyb is not None:
            hyb.error = main.error
    if hyb is not None:
        hyb.wall_time_ms = main.wall_time_ms
        return hyb, main
    return main


def run_seed(master_seed: int, k: int) -> int:
    """Integer seed of run ``k`` under ``master_seed``."""
    return int(np.random.SeedSequence([int(master_seed), int(k)]).generate_state(1)[0])


# -- Monte Carlo --------------------------------------------------------------

SUMMARY_FIELDS = (
    "scenario", "sigma_z", "clutter_rate", "tracker", "method", "feature_mode",
    "nrmse_x", "nrmse_y", "rmse_std_x", "rmse_std_y",
    "ucb_coverage_x", "ucb_coverage_y", "ci3_coverage_x", "ci3_coverage_y",
    "runs", "failures",
)  # fmt: skip
RUN_FIELDS = (
    "run", "seed", "variant", "rmse_x", "rmse_y", "nrmse_x", "nrmse_y",
    "ucb_coverage_x", "ucb_coverage_y", "ci3_coverage_x", "ci3_coverage_y",
    "wall_time_ms", "error",
)  # fmt: skip


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    sigma_z: float
    clutter_rate: float
    tracker: str
    method: str
    feature_mode: str
    nrmse_x: float
    nrmse_y: float
    rmse_std_x: float
    rmse_std_y: float
    ucb_coverage_x: float
    ucb_coverage_y: float
    ci3_coverage_x: float
    ci3_coverage_y: float
    runs: int
    failures: int

    @property
    def variant(self) -> str:
        return f"{self.tracker}-{self.method}-{self.feature_mode}"

    @property
    def nrmse(self) -> tuple[float, float]:
        return (self.nrmse_x, self.nrmse_y)

    def row(self) -> list:
        return [getattr(self, f) for f in SUMMARY_FIELDS]


def summarize(config: ScenarioConfig, tracker: str, results: Sequence[RunResult]) -> SummaryRow:
    ok = [r for r in results if not r.failed]
    nan = float("nan")

    def mean_of(fn):
        return [float(np.mean([fn(r, c) for r in ok])) if ok else nan for c in (0, 1)]

    def std_of(fn):
        return [float(np.std([fn(r, c) for r in ok], ddof=1)) if len(ok) > 1 else 0.0 if ok else nan for c in (0, 1)]

    nr = mean_of(RunResult.nrmse)
    sd = std_of(RunResult.rmse)
    ucb = mean_of(RunResult.ucb_coverage)
    ci = mean_of(RunResult.ci_coverage)
    return SummaryRow(
        config.scenario, config.sigma_z, config.clutter_rate, tracker, config.method, config.feature_mode,
        nr[0], nr[1], sd[0], sd[1], ucb[0], ucb[1], ci[0], ci[1], len(ok), len(results) - len(ok),
    )  # fmt: skip


@dataclass
class MonteCarloResult:
    config: ScenarioConfig
    runs: dict[str, list[RunResult]]  # variant -> per-run results, in run order
    summary: list[SummaryRow]

    def row(self, tracker: str) -> SummaryRow:
        for r in self.summary:
            if r.tracker == tracker:
                return r
        raise KeyError(tracker)


def _one(args):
    config, k = args
    return run_scenario(config, run_seed(config.seed, k))


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return max(1, os.cpu_count() or 1)


def monte_carlo(config: ScenarioConfig, runs: int | None = None, workers: int | None = None) -> MonteCarloResult:
    """Run ``runs`` independent tracks; failed runs are kept aside and counted."""
    runs = config.runs if runs is None else runs
    if runs < 1:
        raise ValueError("runs must be >= 1")
    jobs = [(config, k) for k in range(runs)]
    n = min(worker_count(workers), runs)
    if n == 1:
        outs = [_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(n) as pool:
            outs = list(pool.map(_one, jobs))  # map keeps run order
    if config.tracker == HYBRID:
        hyb = [o[0] for o in outs]
        base = [o[1] for o in outs]
        by_variant = {hyb[0].variant: hyb, base[0].variant: base}
        summary = [summarize(config, HYBRID, hyb), summarize(config, DGP, base)]
    else:
        by_variant = {outs[0].variant: list(outs)}
        summary = [summarize(config, config.tracker, outs)]
    return MonteCarloResult(config, by_variant, summary)


# -- CSV ----------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _write(path: Path, header: Sequence[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_steps(path, result: RunResult) -> Path:
    """Per-step records. Contains no timings, so it is byte-stable for a seed."""
    return _write(Path(path), STEP_FIELDS, (r.row() for r in result.records))


def run_row(k: int, r: RunResult) -> list:
    if r.failed:
        nan = float("nan")
        return [k, r.seed, r.variant] + [nan] * 8 + [r.wall_time_ms, r.error]
    return [
        k, r.seed, r.variant, r.rmse(0), r.rmse(1), r.nrmse(0), r.nrmse(1),
        r.ucb_coverage(0), r.ucb_coverage(1), r.ci_coverage(0), r.ci_coverage(1),
        r.wall_time_ms, "",
    ]  # fmt: skip


def write_monte_carlo(out_dir, mc: MonteCarloResult) -> list[Path]:
    """``<out>/<scenario>/<variant>/runs.csv`` and ``summary.csv`` per variant."""
    paths = []
    for row in mc.summary:
        variant_dir = Path(out_dir) / mc.config.scenario / row.variant
        runs = mc.runs[row.variant]
        paths.append(_write(variant_dir / "runs.csv", RUN_FIELDS, (run_row(k, r) for k, r in enumerate(runs))))
        paths.append(_write(variant_dir / "summary.csv", SUMMARY_FIELDS, [row.row()]))
    return paths


# -- timing benchmark ---------------------------------------------------------

BENCH_FIELDS = ("n_points", "m_experts", "block_size", "centralized_ms", "factorized_ms", "per_expert_ms")
BENCH_NOISE_SD = 0.5
BENCH_THETA = Hyperparameters(1.0, (0.2, 0.2), BENCH_NOISE_SD**2)


@dataclass(frozen=True)
class BenchRow:
    n_points: int
    m_experts: int
    block_size: int
    centralized_ms: float
    factorized_ms: float

    @property
    def per_expert_ms(self) -> float:
        return self.factorized_ms / self.m_experts

    def row(self) -> list:
        return [self.n_points, self.m_experts, self.block_size, self.centralized_ms, self.factorized_ms, self.per_expert_ms]


def bench_data(n: int, seed: int = 0) -> Dataset:
    """Noisy samples of 5 x1^2 + sin(12 x2) on the unit square."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, (n, 2))
    f = 5.0 * X[:, 0] ** 2 + np.sin(12.0 * X[:, 1])
    return Dataset(X, f + rng.normal(0.0, BENCH_NOISE_SD, n))


def _partition(data: Dataset, m: int, rng) -> list[Dataset]:
    idx = rng.permutation(len(data))
    return [Dataset(data.inputs[p], data.outputs[p]) for p in np.array_split(idx, m)]


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(1e3 * (time.perf_counter() - t0))
    return float(np.median(times))


def timing_benchmark(
    n_points: Sequence[int],
    m_experts: Sequence[int],
    repeats: int = 3,
    seed: int = 0,
    centralized: bool = True,
) -> list[BenchRow]:
    """Median wall time of one objective-plus-gradient evaluation.

    Centralised: one GP on all ``n`` points. Factorised: the sum over ``m``
    equal random blocks. BLAS is pinned to one thread while timing.
    """
    from threadpoolctl import threadpool_limits

    rows = []
    with threadpool_limits(limits=1):
        for n in n_points:
            data = bench_data(n, seed)
            cent = _median_ms(lambda: lml_and_gradient(data, BENCH_THETA), repeats) if centralized else float("nan")
            for m in m_experts:
                if m < 1 or m > n:
                    raise ValueError(f"cannot split {n} points into {m} blocks")
                blocks = _partition(data, m, np.random.default_rng([seed, m]))
                fact = _median_ms(lambda: [lml_and_gradient(b, BENCH_THETA) for b in blocks], repeats)
                rows.append(BenchRow(n, m, n // m, cent, fact))
    return rows


def write_bench(path, rows: Sequence[BenchRow]) -> Path:
    return _write(Path(path), BENCH_FIELDS, (r.row() for r in rows))
