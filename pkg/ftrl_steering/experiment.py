"""Scenario construction and the orchestration of pretraining, training and evaluation."""

from __future__ import annotations

import csv
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import AgentSpec, ExperimentConfig, Scenario
from .ddpg_agent import AgentModel, AgentRunner, StepRecord, run_agent_loop
from .env_sim import CarEnv
from .errors import AgentAbortedError, ConfigError, NumericError, PretrainDivergedError
from .federation import (
    ClockMode,
    FederationServer,
    InProcessFederationClient,
    RoundLog,
)
from .metrics import (
    EvalReport,
    StageSummary,
    evaluate_policy,
    summarize_stages,
    write_eval_reports,
    write_rp_curve,
    write_server_log,
    write_stage_summaries,
    write_step_log,
)
from .nn_core import ModelParams
from .protocol import read_checkpoint, write_checkpoint
from .service import FederationService, HttpFederationClient
from .tracks import load_track
from .transfer import STANDARD_LABEL, validate_federation_profiles

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.bin"


def build_environment(spec: AgentSpec, config: ExperimentConfig, track: str | None = None) -> CarEnv:
    """The agent's native environment: standard geometry and car lengths scaled by 1/beta.

    Track files hold standard-scale geometry; the native label comes from the agent's profile.
    """
    profile = spec.profile
    factor = 1.0 / spec.beta
    name = track or spec.track
    standard = load_track(name)
    if standard.scale_label != STANDARD_LABEL:
        raise ConfigError(
            "track", f"{name}: geometry must be given at {STANDARD_LABEL!r} scale, not {standard.scale_label!r}"
        )
    native = standard.scaled(factor, scale_label=profile.scale_label)
    return CarEnv(
        track=native,
        vehicle=config.vehicle.scaled(factor),
        reward=config.reward,
        distance_scale=spec.beta,
    )


def pretrain_spec(config: ExperimentConfig) -> AgentSpec:
    return AgentSpec(
        track=config.pretrain.track if config.pretrain else config.agents[0].track,
        standard=True,
        beta=1.0,
        max_action=config.vehicle.max_steer,
    )


def run_pretrain(config: ExperimentConfig) -> dict[str, ModelParams]:
    """Train one agent on the pretraining track; its networks become every agent's start."""
    seed = config.seed
    model = AgentModel.create(config.ddpg, seed)
    steps = config.pretrain.steps if config.pretrain else 0
    if steps == 0:
        return model.networks()

    spec = pretrain_spec(config)
    runner = AgentRunner(
        0, model, build_environment(spec, config), spec.profile, noise=config.noise, seed=seed
    )
    logger.info("pretraining on %s for %d steps", spec.track, steps)
    for step in range(steps):
        try:
            runner.step()
        except NumericError as e:
            raise PretrainDivergedError(str(e), seed, step) from e
        if not model.actor.is_finite() or not model.critic.is_finite():
            raise PretrainDivergedError("parameters became non-finite", seed, step)
    if runner.last_losses is not None:
        logger.info("pretraining finished, critic loss %.4g", runner.last_losses[0])
    return model.networks()


class LockstepScheduler:
    """Interleaves agents and the server on one virtual clock.

    Each tick, every agent takes one step in ascending id order (syncing when due),
    then the server federates if its cycle has elapsed.
    """

    def __init__(self, runners: list[AgentRunner], server: FederationServer | None = None):
        self.runners = sorted(runners, key=lambda r: r.agent_id)
        self.server = server
        self.tick = 0
        self.logs: dict[int, list[StepRecord]] = {r.agent_id: [] for r in self.runners}

    def run(self, ticks: int) -> dict[int, list[StepRecord]]:
        for _ in range(ticks):
            self.tick += 1
            for runner in self.runners:
                self.logs[runner.agent_id].extend(runner.run(1))
            if self.server is not None:
                self.server.tick(float(self.tick))
        return self.logs


@dataclass
class ExperimentResult:
    output_dir: Path
    logs: dict[int, list[StepRecord]]
    summaries: dict[int, StageSummary] = field(default_factory=dict)
    reports: dict[int, EvalReport] = field(default_factory=dict)
    server_log: list[RoundLog] = field(default_factory=list)
    rp: dict[int, np.ndarray] = field(default_factory=dict)


def build_runners(
    config: ExperimentConfig,
    start: dict[str, ModelParams] | None,
    client_for,
    sync_cycle: float,
) -> list[AgentRunner]:
    runners = []
    for agent_id, spec in enumerate(config.agents):
        seed = config.agent_seed(agent_id)
        model = AgentModel.create(config.ddpg, seed)
        if start is not None:
            model.load_networks(start)
        runners.append(
            AgentRunner(
                agent_id,
                model,
                build_environment(spec, config),
                spec.profile,
                client=client_for(agent_id),
                sync_cycle=sync_cycle,
                clock_mode=config.federation.clock_mode,
                noise=config.noise,
                seed=seed,
            )
        )
    return runners


def _train_virtual(config, runners, server) -> dict[int, list[StepRecord]]:
    scheduler = LockstepScheduler(runners, server)
    try:
        return scheduler.run(config.total_steps)
    except AgentAbortedError:
        _write_logs(config.output_dir, scheduler.logs)
        raise


def _train_wall(config, runners) -> dict[int, list[StepRecord]]:
    stop = threading.Event()
    with ThreadPoolExecutor(max_workers=len(runners), thread_name_prefix="ftrl-agent") as pool:
        futures = {
            r.agent_id: pool.submit(run_agent_loop, r, config.total_steps, True, stop) for r in runners
        }
    try:
        return {agent_id: future.result() for agent_id, future in futures.items()}
    except AgentAbortedError:
        _write_logs(config.output_dir, {r.agent_id: r.records for r in runners})
        raise


def _write_logs(output_dir: Path, logs: dict[int, list[StepRecord]]) -> None:
    for agent_id, records in logs.items():
        agent_dir = output_dir / f"agent_{agent_id}"
        agent_dir.mkdir(parents=True, exist_ok=True)
        write_step_log(agent_dir / "steps.csv", records)


def run_experiment(
    config: ExperimentConfig,
    start: dict[str, ModelParams] | None = None,
    evaluate: bool = True,
) -> ExperimentResult:
    """Train every agent of the scenario, then write logs, rp curves and evaluation reports.

    `start` overrides pretraining with a given set of starting networks.
    """
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    if config.scenario is Scenario.FTRL_SIM:
        validate_federation_profiles([spec.profile for spec in config.agents])
    if start is None and config.pretrain is not None:
        start = run_pretrain(config)

    wall = config.federation.clock_mode is ClockMode.WALL
    dt = config.vehicle.dt
    server = service = None
    http_clients: list[HttpFederationClient] = []
    if config.scenario.federated:
        if wall:
            # cycles are configured in steps; the wall clock counts seconds
            fed = replace(
                config.federation,
                federation_cycle=config.federation.federation_cycle * dt,
                sync_cycle=config.federation.sync_cycle * dt,
            )
            service = FederationService(fed).start()
            server = service.server

            def client_for(agent_id):
                client = HttpFederationClient(service.address)
                http_clients.append(client)
                return client
        else:
            server = FederationServer(config.federation)
            loopback = InProcessFederationClient(server)

            def client_for(agent_id):
                return loopback
    else:

        def client_for(agent_id):
            return None

    sync_cycle = config.federation.sync_cycle * (dt if wall else 1.0)
    try:
        runners = build_runners(config, start, client_for, sync_cycle)
        logger.info(
            "running %s with %d agents for %d steps (%s clock)",
            config.scenario,
            len(runners),
            config.total_steps,
            config.federation.clock_mode,
        )
        logs = _train_wall(config, runners) if wall else _train_virtual(config, runners, server)
    except AgentAbortedError as e:
        (output_dir / "FAILED").write_text(f"{e}\n")
        raise
    finally:
        for client in http_clients:
            client.close()
        if service is not None:
            service.stop()

    result = ExperimentResult(output_dir, logs)
    _write_logs(output_dir, logs)
    for runner in runners:
        agent_dir = output_dir / f"agent_{runner.agent_id}"
        write_checkpoint(agent_dir / CHECKPOINT_NAME, runner.model.networks())
        result.rp[runner.agent_id] = write_rp_curve(
            agent_dir / "rp_curve.csv", logs[runner.agent_id], config.stages
        )
        result.summaries[runner.agent_id] = summarize_stages(logs[runner.agent_id], config.stages)
    write_stage_summaries(output_dir / "stage_summary.csv", result.summaries)

    if server is not None:
        result.server_log = list(server.history)
        write_server_log(output_dir / "server_log.csv", result.server_log)

    if evaluate:
        for runner in runners:
            result.reports[runner.agent_id] = evaluate_agent(config, runner.agent_id, runner.model)
        write_eval_reports(
            output_dir / "eval_report.csv",
            [(str(config.scenario), agent_id, r) for agent_id, r in result.reports.items()],
        )
    logger.info("results written to %s", output_dir)
    return result


def evaluate_agent(config: ExperimentConfig, agent_id: int, model: AgentModel) -> EvalReport:
    """Evaluate on the agent's native version of the held-out track."""
    spec = config.agents[agent_id]
    env = build_environment(spec, config, track=config.evaluation.track)
    report = evaluate_policy(
        model, env, spec.profile, config.evaluation.cycles, seed=config.agent_seed(agent_id)
    )
    logger.info(
        "agent %d: avg_dist %.3f, %d collisions over %d laps",
        agent_id,
        report.avg_dist,
        report.coll_no,
        report.cycles,
    )
    return report


def evaluate_checkpoint(config: ExperimentConfig, path: Path) -> dict[int, EvalReport]:
    """Evaluate one saved model in every agent's environment and write eval_report.csv."""
    networks = read_checkpoint(path)
    reports = {}
    for agent_id in range(len(config.agents)):
        model = AgentModel.create(config.ddpg, config.seed)
        model.load_networks(networks)
        reports[agent_id] = evaluate_agent(config, agent_id, model)
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    write_eval_reports(
        Path(config.output_dir) / "eval_report.csv",
        [(str(config.scenario), agent_id, r) for agent_id, r in reports.items()],
    )
    return reports


def scenario_variants(config: ExperimentConfig) -> dict[Scenario, ExperimentConfig]:
    """Solo, federated and simulator-federated versions of one configuration.

    The configured non-standard agents drive all three; the simulator variant swaps
    the first of them for the standard environment (the configured one or one on the
    pretraining track).
    """
    cars = tuple(spec for spec in config.agents if not spec.standard)
    if len(cars) < 2:
        raise ConfigError("agents", "comparison needs at least 2 agents with beta != 1")
    standard = next((spec for spec in config.agents if spec.standard), None)
    if standard is None:
        standard = replace(pretrain_spec(config), max_action=cars[0].max_action)
    return {
        Scenario.SOLO: replace(config, scenario=Scenario.SOLO, agents=cars),
        Scenario.FTRL: replace(config, scenario=Scenario.FTRL, agents=cars),
        Scenario.FTRL_SIM: replace(config, scenario=Scenario.FTRL_SIM, agents=(standard, *cars[1:])),
    }


@dataclass(frozen=True)
class ComparisonRow:
    scenario: Scenario
    seed: int
    agent: int
    stage2_collisions: int
    rp_sum: float


def compare_scenarios(
    config: ExperimentConfig, seeds: list[int], evaluate: bool = True
) -> list[ComparisonRow]:
    """Run every scenario variant per seed from a shared pretrained start.

    Writes comparison.csv and, when evaluating, eval_improvement.csv against solo.
    """
    output_dir = Path(config.output_dir)
    rows: list[ComparisonRow] = []
    reports: dict[Scenario, dict[int, list[EvalReport]]] = {}
    for seed in seeds:
        seeded = replace(config, seed=seed)
        start = run_pretrain(seeded)
        for scenario, variant in scenario_variants(seeded).items():
            run_dir = output_dir / str(scenario) / f"seed_{seed}"
            result = run_experiment(replace(variant, output_dir=run_dir), start=start, evaluate=evaluate)
            for agent_id, summary in result.summaries.items():
                rows.append(
                    ComparisonRow(scenario, seed, agent_id, summary.stage_2_collisions, summary.rp_sum)
                )
            for agent_id, report in result.reports.items():
                reports.setdefault(scenario, {}).setdefault(agent_id, []).append(report)

    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / "comparison.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario", "seed", "agent", "stage2_collisions", "rp_sum"])
        w.writerows([str(r.scenario), r.seed, r.agent, r.stage2_collisions, repr(r.rp_sum)] for r in rows)

    if evaluate:
        write_improvements(output_dir / "eval_improvement.csv", reports)
    for scenario in Scenario:
        counts = [r.stage2_collisions for r in rows if r.scenario is scenario]
        if counts:
            logger.info("%s: mean stage II collisions %.2f", scenario, float(np.mean(counts)))
    return rows


def _pooled(reports: list[EvalReport]) -> EvalReport:
    return EvalReport(
        avg_dist=float(np.mean([r.avg_dist for r in reports])),
        coll_no=sum(r.coll_no for r in reports),
        cycles=sum(r.cycles for r in reports),
        steps=sum(r.steps for r in reports),
        timed_out=any(r.timed_out for r in reports),
    )


def write_improvements(path: Path, reports: dict[Scenario, dict[int, list[EvalReport]]]) -> None:
    baseline = reports.get(Scenario.SOLO, {})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario", "agent", "avg_dist_gain_pct", "coll_no_drop_pct"])
        for scenario in (Scenario.FTRL, Scenario.FTRL_SIM):
            for agent_id, agent_reports in sorted(reports.get(scenario, {}).items()):
                if agent_id not in baseline:
                    continue
                gain, drop = _pooled(agent_reports).improvement_over(_pooled(baseline[agent_id]))
                w.writerow([str(scenario), agent_id, repr(gain), "" if drop is None else repr(drop)])
