"""2D steering environment: polygon tracks, a kinematic car, raycast LIDAR and the reward.

Angles are radians, counter-clockwise positive. Beam k of the 60-beam scan points at
heading - pi/2 + k * pi/59.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InvalidPoseError, TrackError

logger = logging.getLogger(__name__)

NUM_BEAMS = 60

Pose = tuple[float, float, float]
Segment = tuple[tuple[float, float], tuple[float, float]]


def normalize_angle(angle: float) -> float:
    """Wrap into [-pi, pi)."""
    if -math.pi <= angle < math.pi:
        return angle
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def _segments_cross(p1, p2, q1, q2) -> bool:
    """Proper crossing of two segments; shared endpoints do not count."""
    d1 = _cross(q2[0] - q1[0], q2[1] - q1[1], p1[0] - q1[0], p1[1] - q1[1])
    d2 = _cross(q2[0] - q1[0], q2[1] - q1[1], p2[0] - q1[0], p2[1] - q1[1])
    d3 = _cross(p2[0] - p1[0], p2[1] - p1[1], q1[0] - p1[0], q1[1] - p1[1])
    d4 = _cross(p2[0] - p1[0], p2[1] - p1[1], q2[0] - p1[0], q2[1] - p1[1])
    return d1 * d2 < 0 and d3 * d4 < 0


def polygon_is_simple(polygon: np.ndarray) -> bool:
    count = len(polygon)
    for i in range(count):
        a1, a2 = polygon[i], polygon[(i + 1) % count]
        for j in range(i + 2, count):
            if i == 0 and j == count - 1:
                continue
            if _segments_cross(a1, a2, polygon[j], polygon[(j + 1) % count]):
                return False
    return True


def point_in_polygon(x: float, y: float, polygon: np.ndarray) -> bool:
    xs, ys = polygon[:, 0], polygon[:, 1]
    xn, yn = np.roll(xs, -1), np.roll(ys, -1)
    straddles = (ys > y) != (yn > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = xs + (y - ys) * (xn - xs) / (yn - ys)
    return bool(np.count_nonzero(straddles & (x < x_cross)) % 2)


@dataclass(frozen=True, eq=False)
class Track:
    boundary: np.ndarray
    obstacles: tuple[np.ndarray, ...] = ()
    spawns: tuple[Pose, ...] = ()
    scale_label: str = "standard"
    lap_line: Segment | None = None
    name: str = "track"

    def __post_init__(self):
        boundary = np.asarray(self.boundary, dtype=np.float64)
        obstacles = tuple(np.asarray(o, dtype=np.float64) for o in self.obstacles)
        object.__setattr__(self, "boundary", boundary)
        object.__setattr__(self, "obstacles", obstacles)
        object.__setattr__(
            self,
            "spawns",
            tuple((float(x), float(y), normalize_angle(float(h))) for x, y, h in self.spawns),
        )
        for label, polygon in [("boundary", boundary)] + [
            (f"obstacle {i}", o) for i, o in enumerate(obstacles)
        ]:
            if polygon.ndim != 2 or polygon.shape[1] != 2 or len(polygon) < 3:
                raise TrackError(f"{self.name}: {label} needs at least 3 (x, y) vertices")
            if not polygon_is_simple(polygon):
                raise TrackError(f"{self.name}: {label} is self-intersecting")
        for i, obstacle in enumerate(obstacles):
            if not all(point_in_polygon(x, y, boundary) for x, y in obstacle):
                raise TrackError(f"{self.name}: obstacle {i} is not inside the boundary")
        if not self.spawns:
            raise TrackError(f"{self.name}: at least one spawn pose is required")
        for x, y, _ in self.spawns:
            if not self.is_free(x, y):
                raise TrackError(f"{self.name}: spawn pose ({x}, {y}) is not in free space")

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Start points and end points of every wall segment, each (E, 2)."""
        starts, ends = [], []
        for polygon in (self.boundary, *self.obstacles):
            starts.append(polygon)
            ends.append(np.roll(polygon, -1, axis=0))
        return np.concatenate(starts), np.concatenate(ends)

    def is_free(self, x: float, y: float) -> bool:
        if not point_in_polygon(x, y, self.boundary):
            return False
        return not any(point_in_polygon(x, y, o) for o in self.obstacles)

    def scaled(self, factor: float, scale_label: str | None = None) -> Track:
        """The same geometry with every coordinate multiplied by `factor`."""
        if factor <= 0.0:
            raise TrackError("scale factor must be positive")
        lap = None
        if self.lap_line is not None:
            (ax, ay), (bx, by) = self.lap_line
            lap = ((ax * factor, ay * factor), (bx * factor, by * factor))
        return Track(
            boundary=self.boundary * factor,
            obstacles=tuple(o * factor for o in self.obstacles),
            spawns=tuple((x * factor, y * factor, h) for x, y, h in self.spawns),
            scale_label=scale_label or self.scale_label,
            lap_line=lap,
            name=self.name,
        )

    def nearest_spawn(self, x: float, y: float) -> Pose:
        return min(self.spawns, key=lambda s: (s[0] - x) ** 2 + (s[1] - y) ** 2)


@dataclass(frozen=True)
class CarState:
    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(self.heading))


@dataclass(frozen=True)
class RewardParams:
    base_reward: float = 8.0
    collision_penalty: float = 60.0
    safe_distance: float = 1.1
    exponent_offset: float = 7.0
    fraction: float = 0.2

    def __post_init__(self):
        for name in ("base_reward", "collision_penalty", "safe_distance", "exponent_offset"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"reward.{name}", "must be positive")
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError("reward.fraction", "must lie in (0, 1)")


@dataclass(frozen=True)
class VehicleParams:
    """Car and sensor constants in standard-scale units."""

    speed: float = 1.0
    wheelbase: float = 0.5
    max_steer: float = 0.5
    dt: float = 0.25
    max_range: float = 12.0
    lidar_noise: float = 0.0

    def __post_init__(self):
        for name in ("speed", "wheelbase", "max_steer", "dt", "max_range"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"vehicle.{name}", "must be positive")
        if self.lidar_noise < 0.0:
            raise ConfigError("vehicle.lidar_noise", "must not be negative")

    def scaled(self, factor: float) -> VehicleParams:
        """Lengths multiplied by `factor`; angles and time untouched."""
        return replace(
            self,
            speed=self.speed * factor,
            wheelbase=self.wheelbase * factor,
            max_range=self.max_range * factor,
        )


def beam_angles(heading: float, num_beams: int = NUM_BEAMS) -> np.ndarray:
    return heading - math.pi / 2.0 + np.arange(num_beams) * (math.pi / (num_beams - 1))


def cast_lidar(
    state: CarState,
    track: Track,
    max_range: float,
    num_beams: int = NUM_BEAMS,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    if not track.is_free(state.x, state.y):
        raise InvalidPoseError(f"pose ({state.x:.3f}, {state.y:.3f}) is outside free space")

    angles = beam_angles(state.heading, num_beams)
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    starts, ends = track.edges
    wx = starts[:, 0] - state.x
    wy = starts[:, 1] - state.y
    ex = ends[:, 0] - starts[:, 0]
    ey = ends[:, 1] - starts[:, 1]

    denom = dx * ey - dy * ex
    parallel = np.abs(denom) < 1e-12
    safe = np.where(parallel, 1.0, denom)
    t = (wx * ey - wy * ex) / safe
    u = (wx * dy - wy * dx) / safe
    hit = ~parallel & (t > 0.0) & (u >= 0.0) & (u <= 1.0)
    distances = np.where(hit, t, np.inf).min(axis=1)
    distances = np.minimum(distances, max_range)

    if noise > 0.0:
        if rng is None:
            raise ConfigError("vehicle.lidar_noise", "noisy LIDAR needs a random generator")
        distances = distances * (1.0 + noise * rng.standard_normal(num_beams))
        distances = np.clip(distances, 1e-6 * max_range, max_range)
    return distances


def _fraction_count(fraction: float, n: int) -> int:
    # the epsilon absorbs representation error such as 0.2 * 60 = 12.000000000000002
    return math.floor(fraction * n + 1e-9)


def detect_collision(obs: np.ndarray, d: float) -> bool:
    return bool(np.min(obs) < d)


def compute_reward(next_obs: np.ndarray, params: RewardParams) -> float:
    """r = base - penalty * [min < d] - 2 ** (offset - m_d), m_d = mean of the k smallest."""
    obs = np.asarray(next_obs, dtype=np.float64)
    k = _fraction_count(params.fraction, obs.size)
    if k == 0:
        raise ConfigError(
            "reward.fraction",
            f"fraction {params.fraction} selects no beam out of {obs.size}",
        )
    m_d = float(np.sort(obs)[:k].mean())
    penalty = params.collision_penalty if detect_collision(obs, params.safe_distance) else 0.0
    return params.base_reward - penalty - 2.0 ** (params.exponent_offset - m_d)


def kinematic_advance(state: CarState, steer: float, wheelbase: float, dt: float) -> CarState:
    heading = state.heading + (state.speed / wheelbase) * math.tan(steer) * dt
    return CarState(
        x=state.x + state.speed * dt * math.cos(heading),
        y=state.y + state.speed * dt * math.sin(heading),
        heading=heading,
        speed=state.speed,
    )


def _first_wall_hit(track: Track, x0: float, y0: float, x1: float, y1: float) -> float | None:
    """Fraction of the move (x0, y0) -> (x1, y1) at which it first meets a wall."""
    starts, ends = track.edges
    mx, my = x1 - x0, y1 - y0
    ex = ends[:, 0] - starts[:, 0]
    ey = ends[:, 1] - starts[:, 1]
    wx = starts[:, 0] - x0
    wy = starts[:, 1] - y0
    denom = mx * ey - my * ex
    parallel = np.abs(denom) < 1e-15
    safe = np.where(parallel, 1.0, denom)
    s = (wx * ey - wy * ex) / safe
    u = (wx * my - wy * mx) / safe
    hit = ~parallel & (s >= 0.0) & (s <= 1.0) & (u >= 0.0) & (u <= 1.0)
    if not hit.any():
        return None
    return float(s[hit].min())


class StepResult(NamedTuple):
    state: CarState
    observation: np.ndarray
    reward: float
    collided: bool
    min_distance: float


@dataclass
class CarEnv:
    """One car on one track. Single owner, not thread-safe.

    `distance_scale` converts native LIDAR returns into standard meters before the
    reward and the collision test are evaluated; it is 1 for the standard environment.
    """

    track: Track
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    reward: RewardParams = field(default_factory=RewardParams)
    distance_scale: float = 1.0
    state: CarState | None = None
    observation: np.ndarray | None = None
    clamped_steps: int = 0
    respawns: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(0)

    def _scan(self, state: CarState) -> np.ndarray:
        return cast_lidar(
            state,
            self.track,
            self.vehicle.max_range,
            noise=self.vehicle.lidar_noise,
            rng=self._rng,
        )

    def reset(self, rng_seed: int | None = None) -> tuple[CarState, np.ndarray]:
        """Place the car on a seeded-random spawn pose."""
        self._rng = np.random.default_rng(rng_seed)
        x, y, heading = self.track.spawns[int(self._rng.integers(len(self.track.spawns)))]
        self.state = CarState(x, y, heading, self.vehicle.speed)
        self.observation = self._scan(self.state)
        return self.state, self.observation

    def place(self, pose: Pose) -> np.ndarray:
        x, y, heading = pose
        self.state = CarState(x, y, heading, self.vehicle.speed)
        self.observation = self._scan(self.state)
        return self.observation

    def step(self, steer: float) -> StepResult:
        if self.state is None:
            raise InvalidPoseError("reset() must be called before step()")
        limit = self.vehicle.max_steer
        if abs(steer) > limit:
            self.clamped_steps += 1
            logger.debug("steering %.4f clamped to +-%.4f", steer, limit)
            steer = math.copysign(limit, steer)

        moved = kinematic_advance(self.state, steer, self.vehicle.wheelbase, self.vehicle.dt)
        forced = False
        hit = _first_wall_hit(self.track, self.state.x, self.state.y, moved.x, moved.y)
        if hit is not None:
            back_off = max(hit - 1e-3, 0.0)
            moved = replace(
                moved,
                x=self.state.x + back_off * (moved.x - self.state.x),
                y=self.state.y + back_off * (moved.y - self.state.y),
            )
            forced = True

        observation = self._scan(moved)
        standard = observation * self.distance_scale
        reward = compute_reward(standard, self.reward)
        collided = forced or detect_collision(standard, self.reward.safe_distance)
        if forced and not detect_collision(standard, self.reward.safe_distance):
            reward -= self.reward.collision_penalty

        if collided:
            self.respawns += 1
            self.state = CarState(*self.track.nearest_spawn(moved.x, moved.y), self.vehicle.speed)
            self.observation = self._scan(self.state)
        else:
            self.state = moved
            self.observation = observation
        return StepResult(self.state, observation, reward, collided, float(standard.min()))
