"""Experiment configuration: TOML validated by marshmallow schemas into frozen dataclasses.

    scenario = "ftrl"            # solo | ftrl | ftrl_sim
    output_dir = "out"
    seed = 0
    total_steps = 7500

    [ddpg]        gamma, tau, actor_lr, critic_lr, buffer_capacity, batch_size, hidden_sizes, train_gate
    [reward]      base_reward, collision_penalty, safe_distance, exponent_offset, fraction
    [federation]  federation_cycle, sync_cycle, clock_mode, server_addr
    [noise]       theta, sigma, mu, dt
    [vehicle]     speed, wheelbase, max_steer, dt, max_range, lidar_noise
    [stages]      length, warmup
    [pretrain]    track, steps             (optional)
    [evaluation]  track, cycles

    [[agents]]    track, standard, beta, max_action, seed
"""

from __future__ import annotations

import tomllib
from dataclasses import dataclass, field, replace
from enum import StrEnum
from pathlib import Path

from marshmallow import (
    RAISE,
    Schema,
    ValidationError,
    fields,
    post_load,
    validate,
    validates_schema,
)

from .ddpg_agent import NoiseParams
from .env_sim import RewardParams, VehicleParams
from .errors import ConfigError
from .federation import ClockMode, FederationConfig
from .metrics import StageConfig
from .nn_core import DdpgHyperparams, TrainGate
from .transfer import STANDARD_LABEL, TransferProfile

DEFAULT_BETA = 6.67
DEFAULT_TRACK = "builtin:corridor"


class Scenario(StrEnum):
    SOLO = "solo"
    FTRL = "ftrl"
    FTRL_SIM = "ftrl_sim"

    @property
    def federated(self) -> bool:
        return self is not Scenario.SOLO


@dataclass(frozen=True)
class AgentSpec:
    track: str = DEFAULT_TRACK
    standard: bool = False
    beta: float = DEFAULT_BETA
    max_action: float = 0.5
    seed: int | None = None

    @property
    def profile(self) -> TransferProfile:
        label = STANDARD_LABEL if self.beta == 1.0 else f"beta={self.beta:g}"
        return TransferProfile(label, self.beta, self.max_action, is_standard=self.standard)


@dataclass(frozen=True)
class PretrainConfig:
    track: str = "builtin:loop"
    steps: int = 2000


@dataclass(frozen=True)
class EvaluationConfig:
    track: str = "builtin:test_race"
    cycles: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario
    agents: tuple[AgentSpec, ...]
    output_dir: Path = Path("out")
    seed: int = 0
    total_steps: int = 7500
    ddpg: DdpgHyperparams = field(default_factory=DdpgHyperparams)
    reward: RewardParams = field(default_factory=RewardParams)
    federation: FederationConfig = field(default_factory=FederationConfig)
    noise: NoiseParams = field(default_factory=NoiseParams)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    stages: StageConfig = field(default_factory=StageConfig)
    pretrain: PretrainConfig | None = None
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def agent_seed(self, agent_id: int) -> int:
        spec = self.agents[agent_id]
        return spec.seed if spec.seed is not None else self.seed * 1000 + agent_id

    def with_overrides(
        self,
        seed: int | None = None,
        output_dir: Path | None = None,
        clock_mode: ClockMode | None = None,
        scenario: Scenario | None = None,
    ) -> ExperimentConfig:
        config = self
        if seed is not None:
            config = replace(config, seed=seed)
        if output_dir is not None:
            config = replace(config, output_dir=Path(output_dir))
        if clock_mode is not None:
            config = replace(config, federation=replace(config.federation, clock_mode=clock_mode))
        if scenario is not None:
            config = replace(config, scenario=scenario)
        return config


class _Section(Schema):
    class Meta:
        unknown = RAISE


positive = validate.Range(min=0, min_inclusive=False)


class DdpgSchema(_Section):
    gamma = fields.Float(load_default=0.99)
    tau = fields.Float(load_default=0.02)
    actor_lr = fields.Float(load_default=1e-4)
    critic_lr = fields.Float(load_default=1e-4)
    buffer_capacity = fields.Integer(load_default=2500)
    batch_size = fields.Integer(load_default=32)
    hidden_sizes = fields.List(fields.Integer(validate=validate.Range(min=1)), load_default=[128, 128, 128])
    train_gate = fields.Enum(TrainGate, by_value=True, load_default=TrainGate.BATCH)

    @post_load
    def make(self, data, **kwargs):
        return DdpgHyperparams(**{**data, "hidden_sizes": tuple(data["hidden_sizes"])})


class RewardSchema(_Section):
    base_reward = fields.Float(load_default=8.0)
    collision_penalty = fields.Float(load_default=60.0)
    safe_distance = fields.Float(load_default=1.1)
    exponent_offset = fields.Float(load_default=7.0)
    fraction = fields.Float(load_default=0.2)

    @post_load
    def make(self, data, **kwargs):
        return RewardParams(**data)


class FederationSchema(_Section):
    federation_cycle = fields.Float(load_default=480.0, validate=positive)
    sync_cycle = fields.Float(load_default=720.0, validate=positive)
    clock_mode = fields.Enum(ClockMode, by_value=True, load_default=ClockMode.VIRTUAL)
    server_addr = fields.String(load_default="127.0.0.1:8765")

    @post_load
    def make(self, data, **kwargs):
        return FederationConfig(**data)


class NoiseSchema(_Section):
    theta = fields.Float(load_default=0.15, validate=validate.Range(min=0))
    sigma = fields.Float(load_default=0.2, validate=validate.Range(min=0))
    mu = fields.Float(load_default=0.0)
    dt = fields.Float(load_default=1.0, validate=positive)

    @post_load
    def make(self, data, **kwargs):
        return NoiseParams(**data)


class VehicleSchema(_Section):
    speed = fields.Float(load_default=1.0)
    wheelbase = fields.Float(load_default=0.5)
    max_steer = fields.Float(load_default=0.5)
    dt = fields.Float(load_default=0.25)
    max_range = fields.Float(load_default=12.0)
    lidar_noise = fields.Float(load_default=0.0)

    @post_load
    def make(self, data, **kwargs):
        return VehicleParams(**data)


class StagesSchema(_Section):
    length = fields.Integer(load_default=2500, validate=validate.Range(min=1))
    warmup = fields.Integer(load_default=1, validate=validate.Range(min=0))

    @post_load
    def make(self, data, **kwargs):
        return StageConfig(**data)


class PretrainSchema(_Section):
    track = fields.String(load_default="builtin:loop")
    steps = fields.Integer(load_default=2000, validate=validate.Range(min=0))

    @post_load
    def make(self, data, **kwargs):
        return PretrainConfig(**data)


class EvaluationSchema(_Section):
    track = fields.String(load_default="builtin:test_race")
    cycles = fields.Integer(load_default=50, validate=validate.Range(min=1))

    @post_load
    def make(self, data, **kwargs):
        return EvaluationConfig(**data)


class AgentSchema(_Section):
    track = fields.String(load_default=DEFAULT_TRACK)
    standard = fields.Boolean(load_default=False)
    beta = fields.Float(validate=positive)
    max_action = fields.Float(load_default=0.5, validate=positive)
    seed = fields.Integer(load_default=None, allow_none=True)

    @validates_schema
    def check_standard(self, data, **kwargs):
        if data.get("standard") and data.get("beta", 1.0) != 1.0:
            raise ValidationError("the standard environment must have beta = 1", "beta")

    @post_load
    def make(self, data, **kwargs):
        beta = data.pop("beta", 1.0 if data["standard"] else DEFAULT_BETA)
        return AgentSpec(beta=beta, **data)


class ExperimentSchema(_Section):
    scenario = fields.Enum(Scenario, by_value=True, required=True)
    output_dir = fields.String(load_default="out")
    seed = fields.Integer(load_default=0)
    total_steps = fields.Integer(load_default=7500, validate=validate.Range(min=1))
    ddpg = fields.Nested(DdpgSchema, load_default=lambda: DdpgSchema().load({}))
    reward = fields.Nested(RewardSchema, load_default=lambda: RewardSchema().load({}))
    federation = fields.Nested(FederationSchema, load_default=lambda: FederationSchema().load({}))
    noise = fields.Nested(NoiseSchema, load_default=lambda: NoiseSchema().load({}))
    vehicle = fields.Nested(VehicleSchema, load_default=lambda: VehicleSchema().load({}))
    stages = fields.Nested(StagesSchema, load_default=lambda: StagesSchema().load({}))
    pretrain = fields.Nested(PretrainSchema, load_default=None)
    evaluation = fields.Nested(EvaluationSchema, load_default=lambda: EvaluationSchema().load({}))
    agents = fields.List(fields.Nested(AgentSchema), required=True, validate=validate.Length(min=1))

    @validates_schema
    def check_scenario(self, data, **kwargs):
        scenario, agents = data.get("scenario"), data.get("agents")
        if scenario is None or agents is None:
            return
        if scenario.federated and len(agents) < 2:
            raise ValidationError(f"{scenario} needs at least 2 agents, got {len(agents)}", "agents")
        if scenario is Scenario.FTRL_SIM:
            standard = [a for a in agents if a.standard and a.beta == 1.0]
            if len(standard) != 1:
                raise ValidationError(
                    f"ftrl_sim needs exactly one standard agent with beta = 1, found {len(standard)}",
                    "agents",
                )
            if not any(a.beta != 1.0 for a in agents):
                raise ValidationError("ftrl_sim needs at least one agent with beta != 1", "agents")
        if len([a for a in agents if a.standard]) > 1:
            raise ValidationError("at most one agent may be the standard environment", "agents")
        stages = data.get("stages")
        total = data.get("total_steps")
        if stages is not None and total is not None and total < stages.required_steps:
            raise ValidationError(
                f"must cover the warmup and two stages ({stages.required_steps} steps)", "total_steps"
            )

    @post_load
    def make(self, data, **kwargs):
        return ExperimentConfig(
            **{**data, "output_dir": Path(data["output_dir"]), "agents": tuple(data["agents"])}
        )


def _first_error(messages, path=()) -> tuple[str, str]:
    if isinstance(messages, dict):
        key = sorted(messages, key=str)[0]
        # whole-schema errors carry no field of their own
        sub = () if key == "_schema" else (str(key),)
        return _first_error(messages[key], path + sub)
    if isinstance(messages, list) and messages:
        return _first_error(messages[0], path)
    return ".".join(path), str(messages)


def load_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentSchema().load(data)
    except ValidationError as e:
        field_path, message = _first_error(e.messages)
        raise ConfigError(field_path, message) from e


def parse_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as e:
        raise ConfigError("", f"cannot read config '{path}': {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("", f"{path}: {e}") from e
    return load_config(data)
