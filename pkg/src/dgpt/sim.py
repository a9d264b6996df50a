"""Simulated wireless sensor network: sensor layout, target trajectories and scans.

Random streams are derived from one master seed with
``numpy.random.SeedSequence([master_seed, STREAM_ID])``; the stream ids are
listed in :data:`STREAMS` so any single stream can be reproduced on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

STREAMS = {"trajectory": 0, "counts": 1, "noise": 2, "clutter": 3, "layout": 4}
SCENARIOS = ("S1", "S2", "S3", "S4")
TARGET, CLUTTER = "target", "clutter"


def stream(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), STREAMS[name]]))


@dataclass(frozen=True)
class Field:
    xmin: float = 0.0
    ymin: float = 0.0
    xmax: float = 1000.0
    ymax: float = 1000.0

    def contains(self, p, margin: float = 0.0) -> bool:
        x, y = p
        return (
            self.xmin + margin <= x <= self.xmax - margin
            and self.ymin + margin <= y <= self.ymax - margin
        )

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin


@dataclass(frozen=True)
class SensorNetwork:
    positions: np.ndarray  # (n, 2); sensor id is the row index
    sensing_radius: float = 50.0
    field: Field = Field()

    @property
    def ids(self) -> list[int]:
        return list(range(len(self.positions)))

    @property
    def sensing_area(self) -> float:
        return math.pi * self.sensing_radius**2


@dataclass(frozen=True)
class NetworkConfig:
    n_sensors: int = 250
    sensing_radius: float = 50.0
    field: Field = Field()
    layout: str = "lattice"
    seed: int = 0


def build_grid(config: NetworkConfig) -> SensorNetwork:
    """Near-square lattice (cell-centred, filled row by row) or seeded uniform draw."""
    n = config.n_sensors
    if n <= 0:
        raise ValueError("need at least one sensor")
    f = config.field
    if config.layout == "lattice":
        side = math.ceil(math.sqrt(n))
        spacing = max(f.width, f.height) / side
        rows = math.ceil(n / side)
        # centre the occupied rows vertically
        y0 = f.ymin + (f.height - rows * spacing) / 2 + spacing / 2
        x0 = f.xmin + (f.width - side * spacing) / 2 + spacing / 2
        idx = np.arange(n)
        pos = np.column_stack([x0 + (idx % side) * spacing, y0 + (idx // side) * spacing])
    elif config.layout == "random":
        rng = stream(config.seed, "layout")
        pos = np.column_stack(
            [rng.uniform(f.xmin, f.xmax, n), rng.uniform(f.ymin, f.ymax, n)]
        )
    else:
        raise ValueError(f"unknown layout {config.layout!r}")
    return SensorNetwork(pos, config.sensing_radius, f)


def active_sensors(network: SensorNetwork, position) -> list[int]:
    """Sensors whose closed sensing disc contains ``position``."""
    d2 = np.sum((network.positions - np.asarray(position, dtype=float)) ** 2, axis=1)
    return [int(i) for i in np.flatnonzero(d2 <= network.sensing_radius**2)]


# -- trajectories -------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryConfig:
    """Scenario geometry. Values are config data, not taken from any publication."""

    scenario: str = "S1"
    length: int = 100
    start: tuple[float, float] = (150.0, 200.0)
    speed: float = 10.0
    heading_deg: float = 0.0
    # S1
    waypoints: tuple[tuple[float, float], ...] = (
        (400.0, 250.0),
        (500.0, 500.0),
        (350.0, 700.0),
        (650.0, 800.0),
        (850.0, 600.0),
    )
    ncv_accel_std: float = 0.05
    # S2 / S3
    straight_duration: int = 10
    turn_rate_deg: float = 20.0
    turn_duration: int = 10
    # S4
    max_accel: float = 50.0
    p_no_accel: float = 0.4
    tau: float = 10.0
    max_speed: float = 15.0
    # escape handling
    margin: float = 0.0
    max_retries: int = 20


@dataclass
class Trajectory:
    scenario: str
    times: np.ndarray  # (T,)
    positions: np.ndarray  # (T, 2)
    velocities: np.ndarray  # (T, 2)
    accelerations: np.ndarray | None = None  # commanded, S4 only

    def __len__(self) -> int:
        return len(self.times)


class TrajectoryEscapeError(RuntimeError):
    pass


def _unit(deg: float) -> np.ndarray:
    r = math.radians(deg)
    return np.array([math.cos(r), math.sin(r)])


def _s1(cfg: TrajectoryConfig, rng, heading_deg) -> tuple:
    pos = np.array(cfg.start, dtype=float)
    wps = [np.asarray(w, dtype=float) for w in cfg.waypoints]
    leg = 0

    def aim(p):
        if leg < len(wps):
            d = wps[leg] - p
            return cfg.speed * d / np.linalg.norm(d)
        return vel

    vel = cfg.speed * _unit(heading_deg)
    vel = aim(pos)
    P, V = [pos.copy()], [vel.copy()]
    for _ in range(cfg.length - 1):
        acc = rng.normal(0.0, cfg.ncv_accel_std, 2)
        pos = pos + vel + 0.5 * acc
        vel = vel + acc
        # abrupt velocity change once the turning point is reached
        # (or once it is behind us, so process noise cannot skip a corner)
        to_wp = wps[leg] - pos if leg < len(wps) else None
        if to_wp is not None and (np.linalg.norm(to_wp) <= cfg.speed or to_wp @ vel <= 0):
            leg += 1
            if leg < len(wps):
                vel = aim(pos)
        P.append(pos.copy())
        V.append(vel.copy())
    return np.array(P), np.array(V), None


def _coordinated_turns(cfg: TrajectoryConfig, rng, heading_deg) -> tuple:
    pos = np.array(cfg.start, dtype=float)
    heading = math.radians(heading_deg)
    omega = math.radians(cfg.turn_rate_deg)
    P, V = [pos.copy()], [cfg.speed * np.array([math.cos(heading), math.sin(heading)])]
    segment, remaining, sign = "straight", cfg.straight_duration, 0.0
    for _ in range(cfg.length - 1):
        if remaining == 0:
            if segment == "straight":
                segment, remaining = "turn", cfg.turn_duration
                sign = 1.0 if rng.random() < 0.5 else -1.0
            else:
                segment, remaining = "straight", cfg.straight_duration
        if segment == "turn":
            w = sign * omega
            new_heading = heading + w
            pos = pos + cfg.speed / w * np.array(
                [math.sin(new_heading) - math.sin(heading), math.cos(heading) - math.cos(new_heading)]
            )
            heading = new_heading
        else:
            pos = pos + cfg.speed * np.array([math.cos(heading), math.sin(heading)])
        remaining -= 1
        P.append(pos.copy())
        V.append(cfg.speed * np.array([math.cos(heading), math.sin(heading)]))
    return np.array(P), np.array(V), None


def _singer_accel(cfg: TrajectoryConfig, rng) -> np.ndarray:
    if rng.random() < cfg.p_no_accel:
        return np.zeros(2)
    return rng.uniform(-cfg.max_accel, cfg.max_accel, 2)


def _singer(cfg: TrajectoryConfig, rng, heading_deg) -> tuple:
    """Singer manoeuvre process with a first-order time constant.

    Each step the commanded acceleration is redrawn from the Singer mixture
    (zero with probability ``p_no_accel``, else uniform in +-max_accel) with
    probability ``1 - exp(-1/tau)``, otherwise held. Speed is capped at
    ``max_speed``.
    """
    pos = np.array(cfg.start, dtype=float)
    vel = cfg.speed * _unit(heading_deg)
    keep = math.exp(-1.0 / cfg.tau)
    acc = _singer_accel(cfg, rng)
    P, V, A = [pos.copy()], [vel.copy()], [acc.copy()]
    for _ in range(cfg.length - 1):
        new_vel = vel + acc
        s = np.linalg.norm(new_vel)
        if s > cfg.max_speed:
            new_vel *= cfg.max_speed / s
        pos = pos + 0.5 * (vel + new_vel)
        vel = new_vel
        if rng.random() >= keep:
            acc = _singer_accel(cfg, rng)
        P.append(pos.copy())
        V.append(vel.copy())
        A.append(acc.copy())
    return np.array(P), np.array(V), np.array(A)


_GENERATORS = {"S1": _s1, "S2": _coordinated_turns, "S3": _coordinated_turns, "S4": _singer}


def generate_trajectory(
    cfg: TrajectoryConfig, seed: int, field: Field = Field()
) -> Trajectory:
    """Deterministic trajectory for ``cfg.scenario`` given ``seed``.

    An attempt that leaves the field is regenerated with the initial heading
    reflected (x, y, both) and then rotated, each retry using a fresh
    sub-stream; after ``max_retries`` a :class:`TrajectoryEscapeError` is raised.
    """
    if cfg.scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {cfg.scenario!r}")
    if cfg.length < 1:
        raise ValueError("trajectory length must be positive")
    gen = _GENERATORS[cfg.scenario]
    base = np.random.SeedSequence([int(seed), STREAMS["trajectory"]])
    h = cfg.heading_deg
    reflections = [h, 180.0 - h, -h, 180.0 + h]
    for attempt in range(cfg.max_retries + 1):
        rng = np.random.default_rng(base.spawn(attempt + 1)[-1])
        heading = reflections[attempt % 4] + 45.0 * (attempt // 4)
        P, V, A = gen(cfg, rng, heading)
        if all(field.contains(p, cfg.margin) for p in P):
            return Trajectory(cfg.scenario, np.arange(1, cfg.length + 1), P, V, A)
    raise TrajectoryEscapeError(
        f"{cfg.scenario} left the field in {cfg.max_retries + 1} attempts (seed {seed})"
    )


# -- measurements -------------------------------------------------------------


@dataclass(frozen=True)
class Measurement:
    sensor_id: int
    t: int
    value: np.ndarray = field(compare=False)
    origin: str = TARGET  # ground truth only; trackers must not read it


class MeasurementStreams:
    """The three per-run generators used for scans, derived from the run seed."""

    def __init__(self, seed: int):
        self.counts = stream(seed, "counts")
        self.noise = stream(seed, "noise")
        self.clutter = stream(seed, "clutter")


def zero_truncated_poisson(rng: np.random.Generator, lam: float) -> int:
    while True:
        k = int(rng.poisson(lam))
        if k > 0:
            return k


def uniform_disc(rng: np.random.Generator, radius: float) -> np.ndarray:
    while True:
        p = rng.uniform(-radius, radius, 2)
        if p @ p <= radius * radius:
            return p


def generate_measurements(
    network: SensorNetwork,
    position,
    t: int,
    sigma_z: float,
    clutter_rate: float,
    streams: MeasurementStreams,
    lambda_target: float = 1.0,
) -> list[Measurement]:
    """One scan: every sensor covering ``position`` reports target and clutter points."""
    if not sigma_z > 0:
        raise ValueError("sigma_z must be positive")
    if clutter_rate < 0:
        raise ValueError("clutter_rate must be non-negative")
    position = np.asarray(position, dtype=float)
    out: list[Measurement] = []
    for sid in active_sensors(network, position):
        n_target = zero_truncated_poisson(streams.counts, lambda_target)
        n_clutter = int(streams.counts.poisson(clutter_rate)) if clutter_rate > 0 else 0
        for _ in range(n_target):
            out.append(Measurement(sid, t, position + streams.noise.normal(0.0, sigma_z, 2), TARGET))
        centre = network.positions[sid]
        for _ in range(n_clutter):
            out.append(Measurement(sid, t, centre + uniform_disc(streams.clutter, network.sensing_radius), CLUTTER))
    return out


def group_by_sensor(measurements: Sequence[Measurement]) -> dict[int, list[Measurement]]:
    out: dict[int, list[Measurement]] = {}
    for m in measurements:
        out.setdefault(m.sensor_id, []).append(m)
    return out
