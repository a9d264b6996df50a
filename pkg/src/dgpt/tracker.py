"""Distributed GP tracker over per-sensor sliding windows.

Each step:

1. every sensor collapses its scan to one pseudo-measurement, weighting
   candidates by how well they extend the sensor's window under the previous
   hyperparameters (sensors without a usable window borrow the average weight
   profile of the others);
2. the pseudo-measurement joins the sensor's window and entries older than
   ``t - C + 1`` are dropped;
3. shared hyperparameters for each coordinate are refit on the factorised
   likelihood, warm-started from the previous step;
4. each active sensor predicts the coordinate at ``t`` and ``t + 1`` and the
   predictions are aggregated.

The centralised variant pools every window into one dataset instead.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .aggregate import AggregationMethod, ExpertPrediction, PriorMoments, aggregate, assign_weights
from .gp import (
    LOG_2PI,
    Dataset,
    Hyperparameters,
    Prediction,
    cholesky_jitter,
    kernel_matrix,
    optimize_hyperparameters,
)

TGP, STGP = "tgp", "stgp"
COORDS = (0, 1)


@dataclass(frozen=True)
class TrackerConfig:
    window: int = 5
    feature_mode: str = TGP
    method: AggregationMethod = AggregationMethod()
    learn_noise: bool = True
    pinned_noise_variance: float | None = None
    warm_iters: int = 30
    cold_iters: int = 200
    state_scale: float = 100.0  # metres per unit of the previous-state feature
    coast_inflation: float = 2.0
    min_gating_entries: int = 2

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window length must be >= 1")
        if self.feature_mode not in (TGP, STGP):
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")
        if not self.learn_noise and self.pinned_noise_variance is None:
            raise ValueError("pinning the noise needs pinned_noise_variance")

    @property
    def input_dim(self) -> int:
        return 1 if self.feature_mode == TGP else 2


@dataclass(frozen=True)
class WindowEntry:
    t: int
    input_x: tuple[float, ...]
    input_y: tuple[float, ...]
    z_x: float
    z_y: float

    def row(self, coord: int) -> tuple[float, ...]:
        return self.input_x if coord == 0 else self.input_y

    def z(self, coord: int) -> float:
        return self.z_x if coord == 0 else self.z_y


@dataclass(frozen=True)
class SensorWindow:
    sensor_id: int
    entries: tuple[WindowEntry, ...] = ()

    def dataset(self, coord: int) -> Dataset:
        if not self.entries:
            return Dataset.empty(0)
        X = np.array([e.row(coord) for e in self.entries])
        z = np.array([e.z(coord) for e in self.entries])
        return Dataset(X, z)

    def evicted(self, oldest: int) -> "SensorWindow":
        return SensorWindow(self.sensor_id, tuple(e for e in self.entries if e.t >= oldest))

    def appended(self, entry: WindowEntry) -> "SensorWindow":
        return SensorWindow(self.sensor_id, self.entries + (entry,))

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class TrackerState:
    config: TrackerConfig
    windows: Mapping[int, SensorWindow] = field(default_factory=dict)
    theta: tuple[Hyperparameters, Hyperparameters] | None = None
    last_estimate: tuple[float, float] | None = None
    next_prior: tuple[Prediction, Prediction] | None = None
    step: int = 0
    coasted: int = 0


@dataclass
class StepEstimate:
    t: int
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    next_prior_x: Prediction
    next_prior_y: Prediction
    active_sensor_count: int
    expert_predictions: dict[int, list[ExpertPrediction]] = field(default_factory=dict)
    prior_variance: tuple[float, float] = (1.0, 1.0)
    degenerate: bool = False
    coasted: bool = False
    gating_weights: dict[int, list[float]] = field(default_factory=dict)
    n_measurements: int = 0

    @property
    def mean(self) -> tuple[float, float]:
        return (self.mean_x, self.mean_y)

    @property
    def variance(self) -> tuple[float, float]:
        return (self.var_x, self.var_y)


def init_state(config: TrackerConfig) -> TrackerState:
    return TrackerState(config=config)


# -- gating -------------------------------------------------------------------


def _predictive(window: SensorWindow, coord: int, x_star, h: Hyperparameters):
    """Predictive mean and variance of a new noisy observation at ``x_star``."""
    d = window.dataset(coord)
    K = kernel_matrix(d.inputs, d.inputs, h)
    K[np.diag_indices_from(K)] += h.noise_variance
    L = cholesky_jitter(K, h.output_variance)
    ks = kernel_matrix(d.inputs, np.atleast_2d(x_star), h)[:, 0]
    alpha = cho_solve((L, True), d.outputs, check_finite=False)
    v = np.linalg.solve(L, ks)
    mean = float(ks @ alpha)
    var = max(h.output_variance - float(v @ v), 0.0) + h.noise_variance
    return mean, var


def gate_measurements(
    candidates: Sequence,
    window: SensorWindow,
    theta: Sequence[Hyperparameters],
    rows: Sequence[Sequence[float]],
) -> tuple[float, float, list[float]]:
    """Collapse one sensor's scan to a likelihood-weighted pseudo-measurement.

    Candidate ``j`` is weighted by the marginal likelihood of the window with
    ``z_j`` appended (both coordinates, independent GPs), normalised in log
    space. Appending changes the window likelihood by the predictive density
    of ``z_j`` alone, so the shared window term cancels in the normalisation.
    ``rows`` holds the test input for the x and y GP.
    """
    values = _candidate_values(candidates)
    if len(values) == 0:
        raise ValueError("need at least one candidate")
    if len(values) == 1 or len(window) == 0:
        w = np.full(len(values), 1.0 / len(values))
    else:
        logw = np.zeros(len(values))
        for coord in COORDS:
            mean, var = _predictive(window, coord, rows[coord], theta[coord])
            logw += -0.5 * (values[:, coord] - mean) ** 2 / var - 0.5 * np.log(var) - 0.5 * LOG_2PI
        logw -= logw.max()
        w = np.exp(logw)
        w /= w.sum()
    z = w @ values
    return float(z[0]), float(z[1]), w.tolist()


def default_weights_for_new_sensor(other_sensor_weights: Sequence[Sequence[float]], k: int) -> list[float]:
    """Rank-wise average of the other sensors' weight profiles, resized to ``k``.

    Each profile is sorted in descending order, truncated or zero-padded to
    ``k`` entries, averaged element-wise and renormalised; entry ``r`` is the
    weight for the new sensor's ``r``-th most plausible candidate.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if not other_sensor_weights:
        return [1.0 / k] * k
    rows = []
    for ws in other_sensor_weights:
        s = sorted(ws, reverse=True)[:k]
        rows.append(s + [0.0] * (k - len(s)))
    avg = np.mean(rows, axis=0)
    total = avg.sum()
    if not total > 0:
        return [1.0 / k] * k
    return (avg / total).tolist()


def _candidate_values(candidates) -> np.ndarray:
    vals = [np.asarray(getattr(c, "value", c), dtype=float) for c in candidates]
    return np.array(vals, dtype=float).reshape(len(vals), 2)


# -- step ---------------------------------------------------------------------


def _feature(config: TrackerConfig, prev: float | None, t: int) -> tuple[float, ...]:
    if config.feature_mode == TGP:
        return (float(t),)
    return ((prev if prev is not None else 0.0) / config.state_scale, float(t))


def _default_theta(config: TrackerConfig, outputs: np.ndarray) -> Hyperparameters:
    """Data-scaled start: signal variance = second moment of the outputs (zero-mean prior)."""
    second = float(np.mean(np.square(outputs))) if len(outputs) else 1.0
    noise = config.pinned_noise_variance if not config.learn_noise else 1.0
    return Hyperparameters(max(second, 1.0), (config.window / 2.0,) * config.input_dim, noise)


def _cold_theta(config: TrackerConfig, values: np.ndarray) -> tuple[Hyperparameters, Hyperparameters]:
    return tuple(_default_theta(config, values[:, coord]) for coord in COORDS)


def _coast(state: TrackerState, t: int, windows, n_meas: int) -> tuple[TrackerState, StepEstimate]:
    cfg = state.config
    if state.next_prior is None:
        raise ValueError("cannot coast before the first estimate")
    inflated = []
    for coord in COORDS:
        p = state.next_prior[coord]
        cap = state.theta[coord].output_variance
        inflated.append(Prediction(p.mean, min(p.variance * cfg.coast_inflation, max(cap, p.variance))))
    est = StepEstimate(
        t=t,
        mean_x=inflated[0].mean,
        mean_y=inflated[1].mean,
        var_x=inflated[0].variance,
        var_y=inflated[1].variance,
        next_prior_x=inflated[0],
        next_prior_y=inflated[1],
        active_sensor_count=0,
        prior_variance=tuple(th.output_variance for th in state.theta),
        coasted=True,
        n_measurements=n_meas,
    )
    new_state = dataclasses.replace(
        state,
        windows=windows,
        last_estimate=(inflated[0].mean, inflated[1].mean),
        next_prior=tuple(inflated),
        step=t,
        coasted=state.coasted + 1,
    )
    return new_state, est


def _gate_all(state: TrackerState, incoming: Mapping[int, Sequence], windows, t: int):
    """Pseudo-measurement per reporting sensor plus the weights used."""
    cfg = state.config
    prev = state.last_estimate
    rows = (
        _feature(cfg, prev[0] if prev else None, t),
        _feature(cfg, prev[1] if prev else None, t),
    )
    gated: dict[int, tuple[float, float]] = {}
    weights: dict[int, list[float]] = {}
    pending = []
    for sid in sorted(incoming):
        cands = incoming[sid]
        if not cands:
            continue
        win = windows.get(sid)
        if state.theta is not None and win is not None and len(win) >= cfg.min_gating_entries:
            zx, zy, w = gate_measurements(cands, win, state.theta, rows)
            gated[sid] = (zx, zy)
            weights[sid] = w
        else:
            pending.append(sid)

    likelihood_profiles = list(weights.values())
    for sid in pending:
        values = _candidate_values(incoming[sid])
        k = len(values)
        profile = np.asarray(default_weights_for_new_sensor(likelihood_profiles, k))
        if state.next_prior is not None and likelihood_profiles:
            # rank candidates by distance to the tracker's prior for this step
            prior = state.next_prior
            d2 = sum((values[:, c] - prior[c].mean) ** 2 / prior[c].variance for c in COORDS)
            order = np.argsort(d2, kind="stable")
            w = np.empty(k)
            w[order] = profile
        else:
            w = np.full(k, 1.0 / k)
        z = w @ values
        gated[sid] = (float(z[0]), float(z[1]))
        weights[sid] = w.tolist()
    return gated, weights, rows


def _fit_theta(state: TrackerState, datasets_by_coord, t: int, pooled: bool):
    cfg = state.config
    iters = cfg.cold_iters if t <= cfg.window else cfg.warm_iters
    out = []
    for coord in COORDS:
        init = state.theta[coord]
        if pooled:
            live = [d for d in datasets_by_coord[coord] if len(d)]
            data = [Dataset(np.vstack([d.inputs for d in live]), np.concatenate([d.outputs for d in live]))]
            objective = "standard"
        else:
            data = datasets_by_coord[coord]
            objective = "factorized"
        # second start guards against the flat short-length-scale plateau that
        # a warm start cannot leave once it has drifted there
        fallback = _default_theta(cfg, np.concatenate([d.outputs for d in data]))
        out.append(
            optimize_hyperparameters(
                data, init, objective, max_iter=iters, learn_noise=cfg.learn_noise, extra_inits=(fallback,)
            )
        )
    return tuple(out)


def _predict_many(datasets: Sequence[Dataset], x_star, h: Hyperparameters) -> tuple[np.ndarray, np.ndarray]:
    """Latent-function predictions of several windows at one or two test inputs.

    ``x_star`` is ``(q, d)``; returns means and variances of shape ``(M, q)``.
    """
    x_star = np.atleast_2d(x_star)
    means = np.empty((len(datasets), len(x_star)))
    variances = np.empty_like(means)
    for i, d in enumerate(datasets):
        K = kernel_matrix(d.inputs, d.inputs, h)
        K[np.diag_indices_from(K)] += h.noise_variance
        L = cholesky_jitter(K, h.output_variance)
        ks = kernel_matrix(d.inputs, x_star, h)
        alpha = cho_solve((L, True), d.outputs, check_finite=False)
        v = np.linalg.solve(L, ks)
        means[i] = ks.T @ alpha
        variances[i] = np.maximum(h.output_variance - np.sum(v * v, axis=0), 0.0)
    return means, variances


def _variance_floor(h: Hyperparameters) -> float:
    return 1e-12 * h.output_variance


def _aggregate_at(cfg, means, variances, h: Hyperparameters):
    var = np.maximum(variances, _variance_floor(h))
    experts = assign_weights(means, var, cfg.method, h.output_variance)
    pred, degenerate = aggregate(experts, cfg.method, PriorMoments(h.output_variance))
    return pred, degenerate, experts


def _advance(state: TrackerState, incoming, t: int, pooled: bool):
    cfg = state.config
    if t != state.step + 1:
        raise ValueError(f"expected step {state.step + 1}, got {t}")
    oldest = t - cfg.window + 1
    windows = {sid: w.evicted(oldest) for sid, w in state.windows.items()}
    windows = {sid: w for sid, w in windows.items() if len(w)}
    n_meas = sum(len(v) for v in incoming.values())

    if n_meas == 0:
        if state.next_prior is None:
            return dataclasses.replace(state, windows=windows, step=t), None
        return _coast(state, t, windows, n_meas)

    if state.theta is None:
        all_vals = np.vstack([_candidate_values(v) for v in incoming.values() if v])
        state = dataclasses.replace(state, theta=_cold_theta(cfg, all_vals))

    gated, weights, rows = _gate_all(state, incoming, windows, t)
    for sid, (zx, zy) in gated.items():
        entry = WindowEntry(t, rows[0], rows[1], zx, zy)
        windows[sid] = windows.get(sid, SensorWindow(sid)).appended(entry)

    active = sorted(windows)
    datasets = [[windows[s].dataset(c) for s in active] for c in COORDS]
    theta = _fit_theta(state, datasets, t, pooled)

    results = []
    experts_now = {}
    degenerate = False
    for coord in COORDS:
        h = theta[coord]
        x_now = np.array(rows[coord])
        if pooled:
            data = [Dataset(np.vstack([d.inputs for d in datasets[coord]]),
                            np.concatenate([d.outputs for d in datasets[coord]]))]
        else:
            data = datasets[coord]
        means, variances = _predict_many(data, x_now[None, :], h)
        if pooled:
            now = Prediction(float(means[0, 0]), float(variances[0, 0]))
            experts_now[coord] = [ExpertPrediction(now.mean, max(now.variance, _variance_floor(h)))]
        else:
            now, deg, experts = _aggregate_at(cfg, means[:, 0], variances[:, 0], h)
            experts_now[coord] = experts
            degenerate |= deg
        results.append(now)

    next_prior = []
    for coord in COORDS:
        h = theta[coord]
        x_next = np.array(_feature(cfg, results[coord].mean, t + 1))
        if pooled:
            data = [Dataset(np.vstack([d.inputs for d in datasets[coord]]),
                            np.concatenate([d.outputs for d in datasets[coord]]))]
            means, variances = _predict_many(data, x_next[None, :], h)
            nxt = Prediction(float(means[0, 0]), max(float(variances[0, 0]), _variance_floor(h)))
        else:
            means, variances = _predict_many(datasets[coord], x_next[None, :], h)
            nxt, deg, _ = _aggregate_at(cfg, means[:, 0], variances[:, 0], h)
            degenerate |= deg
        next_prior.append(nxt)

    est = StepEstimate(
        t=t,
        mean_x=results[0].mean,
        mean_y=results[1].mean,
        var_x=results[0].variance,
        var_y=results[1].variance,
        next_prior_x=next_prior[0],
        next_prior_y=next_prior[1],
        active_sensor_count=1 if pooled else len(active),
        expert_predictions=experts_now,
        prior_variance=(theta[0].output_variance, theta[1].output_variance),
        degenerate=degenerate,
        gating_weights=weights,
        n_measurements=n_meas,
    )
    new_state = dataclasses.replace(
        state,
        windows=windows,
        theta=theta,
        last_estimate=(results[0].mean, results[1].mean),
        next_prior=tuple(next_prior),
        step=t,
        coasted=0,
    )
    return new_state, est


def step(state: TrackerState, incoming: Mapping[int, Sequence], t: int):
    """One distributed-tracker step; returns the new state and the estimate.

    The estimate is ``None`` only when nothing has been observed yet.
    """
    return _advance(state, incoming, t, pooled=False)


def centralized_step(state: TrackerState, incoming: Mapping[int, Sequence], t: int):
    """Same gating and windows, but one GP trained on the pooled windows."""
    return _advance(state, incoming, t, pooled=True)
