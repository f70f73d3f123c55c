"""Relative performance between training stages, and held-out lap evaluation."""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ddpg_agent import ACTION_EPSILON, AgentModel, StepRecord, act
from .env_sim import CarEnv
from .errors import ConfigError, DegenerateRunError, InsufficientDataError, TrackError
from .federation import RoundLog
from .transfer import TransferProfile, transfer_action, transfer_observation

logger = logging.getLogger(__name__)

STEPS_PER_CYCLE_BUDGET = 10_000


@dataclass(frozen=True)
class StageConfig:
    length: int = 2500
    warmup: int = 1

    def __post_init__(self):
        if self.length <= 0:
            raise ConfigError("stages.length", "must be positive")
        if self.warmup < 0:
            raise ConfigError("stages.warmup", "must not be negative")

    @property
    def required_steps(self) -> int:
        return (self.warmup + 2) * self.length

    def window(self, stage: int) -> tuple[int, int]:
        """Step range [start, end) of stage 1 (I) or 2 (II)."""
        start = (self.warmup + stage - 1) * self.length
        return start, start + self.length


def _rewards(step_log: Sequence[StepRecord] | Sequence[float] | np.ndarray) -> np.ndarray:
    if len(step_log) and isinstance(step_log[0], StepRecord):
        return np.array([record.reward for record in step_log], dtype=np.float64)
    return np.asarray(step_log, dtype=np.float64)


def relative_performance(r_1: float, r_2: float, r_max: float, r_min: float) -> float:
    if r_max <= r_min:
        raise DegenerateRunError(f"reward range is empty (max {r_max}, min {r_min})")
    return (r_2 - r_1) / (r_max - r_min)


def stage_series(
    step_log, stages: StageConfig
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Stage I and stage II rewards plus the reward range of the whole run."""
    rewards = _rewards(step_log)
    if rewards.size < stages.required_steps:
        raise InsufficientDataError(
            f"need {stages.required_steps} steps for {stages.warmup} warmup and two "
            f"stages of {stages.length}, got {rewards.size}"
        )
    (a, b), (c, d) = stages.window(1), stages.window(2)
    return rewards[a:b], rewards[c:d], float(rewards.max()), float(rewards.min())


def relative_performance_series(
    stage_1: np.ndarray, stage_2: np.ndarray, r_max: float, r_min: float
) -> np.ndarray:
    """Elementwise relative performance; all zeros for a run whose reward never changed."""
    if r_max == r_min:
        return np.zeros_like(stage_1)
    return (stage_2 - stage_1) / (r_max - r_min)


def cumulative_rp(rp: Iterable[float]) -> np.ndarray:
    return np.cumsum(np.asarray(list(rp), dtype=np.float64))


@dataclass(frozen=True)
class StageSummary:
    stage_1_mean_reward: float
    stage_2_mean_reward: float
    stage_1_collisions: int
    stage_2_collisions: int
    rp_sum: float

    CSV_COLUMNS = (
        "agent",
        "stage1_mean_reward",
        "stage2_mean_reward",
        "stage1_collisions",
        "stage2_collisions",
        "rp_sum",
    )


def summarize_stages(step_log: Sequence[StepRecord], stages: StageConfig) -> StageSummary:
    stage_1, stage_2, r_max, r_min = stage_series(step_log, stages)
    collided = np.array([record.collided for record in step_log], dtype=bool)
    (a, b), (c, d) = stages.window(1), stages.window(2)
    rp = relative_performance_series(stage_1, stage_2, r_max, r_min)
    return StageSummary(
        stage_1_mean_reward=float(stage_1.mean()),
        stage_2_mean_reward=float(stage_2.mean()),
        stage_1_collisions=int(collided[a:b].sum()),
        stage_2_collisions=int(collided[c:d].sum()),
        rp_sum=float(rp.sum()),
    )


@dataclass(frozen=True)
class EvalReport:
    avg_dist: float
    coll_no: int
    cycles: int
    steps: int = 0
    timed_out: bool = False

    def __post_init__(self):
        if self.coll_no < 0:
            raise ValueError("coll_no must not be negative")

    def dominates(self, other: EvalReport) -> bool:
        """Farther from walls and fewer collisions, strictly better in at least one."""
        no_worse = self.avg_dist >= other.avg_dist and self.coll_no <= other.coll_no
        better = self.avg_dist > other.avg_dist or self.coll_no < other.coll_no
        return no_worse and better

    def improvement_over(self, baseline: EvalReport) -> tuple[float, float | None]:
        """Percent gain in avg_dist and percent drop in coll_no relative to `baseline`.

        The collision drop is None when the baseline never collided and this run did.
        """
        if baseline.avg_dist <= 0.0:
            raise DegenerateRunError("baseline average distance must be positive")
        dist_gain = 100.0 * (self.avg_dist - baseline.avg_dist) / baseline.avg_dist
        if baseline.coll_no == 0:
            drop = 0.0 if self.coll_no == 0 else None
        else:
            drop = 100.0 * (baseline.coll_no - self.coll_no) / baseline.coll_no
        return dist_gain, drop


Policy = Callable[[np.ndarray], float]


def _side(segment, x: float, y: float) -> float:
    (ax, ay), (bx, by) = segment
    return (bx - ax) * (y - ay) - (by - ay) * (x - ax)


def crosses_lap_line(segment, x0: float, y0: float, x1: float, y1: float) -> bool:
    """True when the move goes from the right of the directed lap segment to its left."""
    before, after = _side(segment, x0, y0), _side(segment, x1, y1)
    if not (before < 0.0 <= after):
        return False
    # the crossing point must fall on the segment itself, not its extension
    (ax, ay), (bx, by) = segment
    t = before / (before - after)
    px, py = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
    ex, ey = bx - ax, by - ay
    u = ((px - ax) * ex + (py - ay) * ey) / (ex * ex + ey * ey)
    return 0.0 <= u <= 1.0


def evaluate_policy(
    model: AgentModel | Policy,
    env: CarEnv,
    profile: TransferProfile,
    cycles: int,
    seed: int | None = 0,
    steps_per_cycle: int = STEPS_PER_CYCLE_BUDGET,
) -> EvalReport:
    """Drive without exploration noise until `cycles` laps are completed.

    `model` is an AgentModel or any callable from a standard-scale observation to a
    standardized action. A run that exhausts `cycles * steps_per_cycle` steps is
    reported with `timed_out` set and the data gathered so far.
    """
    if cycles <= 0:
        raise ConfigError("evaluation.cycles", "must be positive")
    lap_line = env.track.lap_line
    if lap_line is None:
        raise TrackError(f"track {env.track.name!r} has no lap line")

    if isinstance(model, AgentModel):
        agent = model

        def policy(obs: np.ndarray) -> float:
            return act(agent, obs, None, explore=False)
    else:
        policy = model

    env.reset(seed)
    respawns_before = env.respawns
    budget = cycles * steps_per_cycle
    laps = steps = 0
    min_distances = []
    while laps < cycles and steps < budget:
        before = env.state
        obs = transfer_observation(env.observation, profile)
        action = float(np.clip(policy(obs), -1.0 + ACTION_EPSILON, 1.0 - ACTION_EPSILON))
        result = env.step(transfer_action(action, profile))
        steps += 1
        min_distances.append(result.min_distance)
        if not result.collided and crosses_lap_line(
            lap_line, before.x, before.y, result.state.x, result.state.y
        ):
            laps += 1

    timed_out = laps < cycles
    if timed_out:
        logger.warning("evaluation stopped after %d steps with %d of %d laps", steps, laps, cycles)
    return EvalReport(
        avg_dist=float(np.mean(min_distances)),
        coll_no=env.respawns - respawns_before,
        cycles=laps,
        steps=steps,
        timed_out=timed_out,
    )


def write_step_log(path: Path, records: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(StepRecord.CSV_COLUMNS)
        w.writerows(record.as_row() for record in records)


def write_rp_curve(path: Path, step_log: Sequence[StepRecord], stages: StageConfig) -> np.ndarray:
    """rp_curve.csv indexed by the stage II step; returns the rp series."""
    stage_1, stage_2, r_max, r_min = stage_series(step_log, stages)
    rp = relative_performance_series(stage_1, stage_2, r_max, r_min)
    cumsum = cumulative_rp(rp)
    start, _ = stages.window(2)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "rp", "cumsum"])
        w.writerows([start + i, repr(float(v)), repr(float(s))] for i, (v, s) in enumerate(zip(rp, cumsum)))
    return rp


def write_eval_reports(path: Path, rows: Iterable[tuple[str, int, EvalReport]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario", "agent", "avg_dist", "coll_no"])
        w.writerows([scenario, agent, repr(r.avg_dist), r.coll_no] for scenario, agent, r in rows)


def write_stage_summaries(path: Path, summaries: dict[int, StageSummary]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(StageSummary.CSV_COLUMNS)
        for agent_id, s in sorted(summaries.items()):
            w.writerow(
                [
                    agent_id,
                    repr(s.stage_1_mean_reward),
                    repr(s.stage_2_mean_reward),
                    s.stage_1_collisions,
                    s.stage_2_collisions,
                    repr(s.rp_sum),
                ]
            )


def write_server_log(path: Path, history: Sequence[RoundLog]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RoundLog.CSV_COLUMNS)
        w.writerows(entry.as_row() for entry in history)
