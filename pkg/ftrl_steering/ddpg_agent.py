"""A single DDPG learner and the per-agent training loop.

The loop follows the usual federated-transfer order for one time step: read the
native observation, move it to the standard scale, act, scale the action back to the
native steering range, step the environment, record the transition, adopt the
federation model when the sync cycle has elapsed, then train locally.
"""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import federation
from .env_sim import NUM_BEAMS, CarEnv
from .errors import AgentAbortedError, FederationUnavailableError, NumericError, ShapeError
from .nn_core import (
    Activation,
    AdamState,
    DdpgHyperparams,
    MlpSpec,
    ModelParams,
    TrainGate,
    adam_init,
    adam_step,
    init_params,
    mlp_backward,
    mlp_forward,
    soft_update,
)
from .transfer import TransferProfile, transfer_action, transfer_observation
from .utils.random import derive_seeds

logger = logging.getLogger(__name__)

ACTION_EPSILON = 1e-6
NETWORK_ROLES = ("actor", "critic", "target_actor", "target_critic")


@dataclass(frozen=True, eq=False)
class Experience:
    obs: np.ndarray
    action: float
    reward: float
    next_obs: np.ndarray
    bootstrap_cut: bool = False


class ReplayBuffer:
    """Bounded FIFO of transitions stored in preallocated arrays."""

    def __init__(self, capacity: int = 2500, obs_dim: int = NUM_BEAMS, seed: int | None = None):
        if capacity < 1:
            raise ShapeError("replay capacity must be positive")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self._rng = np.random.default_rng(seed)
        self._obs = np.zeros((capacity, obs_dim))
        self._actions = np.zeros(capacity)
        self._rewards = np.zeros(capacity)
        self._next_obs = np.zeros((capacity, obs_dim))
        self._cuts = np.zeros(capacity, dtype=bool)
        self._pos = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def record(self, experience: Experience) -> None:
        i = self._pos
        self._obs[i] = experience.obs
        self._actions[i] = experience.action
        self._rewards[i] = experience.reward
        self._next_obs[i] = experience.next_obs
        self._cuts[i] = experience.bootstrap_cut
        self._pos = (self._pos + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _experience(self, i: int) -> Experience:
        return Experience(
            self._obs[i].copy(),
            float(self._actions[i]),
            float(self._rewards[i]),
            self._next_obs[i].copy(),
            bool(self._cuts[i]),
        )

    def __iter__(self) -> Iterator[Experience]:
        """Oldest first."""
        start = (self._pos - self._size) % self.capacity
        for offset in range(self._size):
            yield self._experience((start + offset) % self.capacity)

    def is_full(self) -> bool:
        return self._size == self.capacity

    def sample(self, batch_size: int) -> list[Experience] | None:
        """Uniform sample without replacement, or None while fewer than batch_size are stored."""
        if self._size < batch_size:
            return None
        indices = self._rng.choice(self._size, size=batch_size, replace=False)
        start = (self._pos - self._size) % self.capacity
        return [self._experience(int((start + i) % self.capacity)) for i in indices]


def record(buffer: ReplayBuffer, experience: Experience) -> None:
    buffer.record(experience)


@dataclass(frozen=True)
class NoiseParams:
    theta: float = 0.15
    sigma: float = 0.2
    mu: float = 0.0
    dt: float = 1.0


@dataclass
class NoiseState:
    """Ornstein-Uhlenbeck process x' = x + theta (mu - x) dt + sigma sqrt(dt) N(0, 1)."""

    value: float = 0.0
    theta: float = 0.15
    sigma: float = 0.2
    mu: float = 0.0
    dt: float = 1.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def from_params(cls, params: NoiseParams, seed: int | None) -> NoiseState:
        return cls(
            value=params.mu,
            theta=params.theta,
            sigma=params.sigma,
            mu=params.mu,
            dt=params.dt,
            rng=np.random.default_rng(seed),
        )

    def advance(self) -> float:
        self.value = (
            self.value
            + self.theta * (self.mu - self.value) * self.dt
            + self.sigma * np.sqrt(self.dt) * self.rng.standard_normal()
        )
        if not np.isfinite(self.value):
            raise NumericError("exploration noise became non-finite")
        return self.value


def actor_spec(hidden_sizes: tuple[int, ...], obs_dim: int = NUM_BEAMS) -> MlpSpec:
    return MlpSpec((obs_dim, *hidden_sizes, 1), output_activation=Activation.TANH)


def critic_spec(hidden_sizes: tuple[int, ...], obs_dim: int = NUM_BEAMS) -> MlpSpec:
    # the action joins the observation at the first layer
    return MlpSpec((obs_dim + 1, *hidden_sizes, 1), output_activation=Activation.LINEAR)


@dataclass
class AgentModel:
    actor_spec: MlpSpec
    critic_spec: MlpSpec
    actor: ModelParams
    critic: ModelParams
    target_actor: ModelParams
    target_critic: ModelParams
    actor_opt: AdamState
    critic_opt: AdamState
    hyperparams: DdpgHyperparams

    @classmethod
    def create(
        cls, hyperparams: DdpgHyperparams, seed: int | None, obs_dim: int = NUM_BEAMS
    ) -> AgentModel:
        rng = np.random.default_rng(seed)
        a_spec = actor_spec(hyperparams.hidden_sizes, obs_dim)
        c_spec = critic_spec(hyperparams.hidden_sizes, obs_dim)
        actor = init_params(a_spec, rng)
        critic = init_params(c_spec, rng)
        return cls(
            actor_spec=a_spec,
            critic_spec=c_spec,
            actor=actor,
            critic=critic,
            target_actor=actor.copy(),
            target_critic=critic.copy(),
            actor_opt=adam_init(actor, hyperparams.actor_lr),
            critic_opt=adam_init(critic, hyperparams.critic_lr),
            hyperparams=hyperparams,
        )

    def networks(self) -> dict[str, ModelParams]:
        return {role: getattr(self, role) for role in NETWORK_ROLES}

    def load_networks(self, networks: dict[str, ModelParams]) -> None:
        """Overwrite all four networks; optimizer moments stay local."""
        for role in NETWORK_ROLES:
            incoming = networks[role]
            getattr(self, role).require_same_shape(incoming)
        for role in NETWORK_ROLES:
            setattr(self, role, networks[role].copy())


def policy_action(model: AgentModel, obs: np.ndarray) -> float:
    output, _ = mlp_forward(model.actor, model.actor_spec, obs)
    action = float(output[0])
    if not np.isfinite(action):
        raise NumericError("actor produced a non-finite action")
    return action


def act(model: AgentModel, obs: np.ndarray, noise: NoiseState | None, explore: bool) -> float:
    action = policy_action(model, obs)
    if explore and noise is not None:
        action += noise.advance()
    return float(np.clip(action, -1.0 + ACTION_EPSILON, 1.0 - ACTION_EPSILON))


class Batch(NamedTuple):
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    cuts: np.ndarray


def stack_batch(batch: list[Experience]) -> Batch:
    return Batch(
        np.stack([e.obs for e in batch]),
        np.array([e.action for e in batch], dtype=np.float64),
        np.array([e.reward for e in batch], dtype=np.float64),
        np.stack([e.next_obs for e in batch]),
        np.array([e.bootstrap_cut for e in batch], dtype=bool),
    )


def td_targets(model: AgentModel, batch: Batch) -> np.ndarray:
    """y = r + gamma * Q'(s', mu'(s')), without the bootstrap term across a cut."""
    next_actions, _ = mlp_forward(model.target_actor, model.actor_spec, batch.next_obs)
    next_q, _ = mlp_forward(
        model.target_critic, model.critic_spec, np.hstack([batch.next_obs, next_actions])
    )
    bootstrap = np.where(batch.cuts, 0.0, model.hyperparams.gamma * next_q[:, 0])
    return batch.rewards + bootstrap


ActionGradient = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def critic_action_gradient(model: AgentModel) -> ActionGradient:
    def gradient(obs: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q, cache = mlp_forward(model.critic, model.critic_spec, np.hstack([obs, actions[:, None]]))
        _, input_grad = mlp_backward(model.critic, cache, np.ones_like(q))
        return input_grad[:, -1], q[:, 0]

    return gradient


def actor_update(model: AgentModel, obs: np.ndarray, action_gradient: ActionGradient) -> float:
    """One deterministic policy gradient step ascending mean Q(s, mu(s)); returns that mean."""
    actions, cache = mlp_forward(model.actor, model.actor_spec, obs)
    dq_da, q = action_gradient(obs, actions[:, 0])
    size = obs.shape[0]
    grads, _ = mlp_backward(model.actor, cache, (-dq_da / size)[:, None])
    model.actor, model.actor_opt = adam_step(model.actor, grads, model.actor_opt)
    return float(q.mean())


def train_step(model: AgentModel, batch: list[Experience]) -> tuple[float, float]:
    hp = model.hyperparams
    if len(batch) != hp.batch_size:
        raise ShapeError(f"expected a batch of {hp.batch_size}, got {len(batch)}")
    arrays = stack_batch(batch)
    targets = td_targets(model, arrays)

    q, cache = mlp_forward(
        model.critic, model.critic_spec, np.hstack([arrays.obs, arrays.actions[:, None]])
    )
    error = q[:, 0] - targets
    critic_loss = float(np.mean(error**2))
    if not np.isfinite(critic_loss):
        raise NumericError(
            f"non-finite critic loss on a batch of {len(batch)}: "
            f"rewards in [{arrays.rewards.min():.3g}, {arrays.rewards.max():.3g}], "
            f"{int(arrays.cuts.sum())} cut transitions"
        )
    grads, _ = mlp_backward(model.critic, cache, (2.0 / len(batch)) * error[:, None])
    model.critic, model.critic_opt = adam_step(model.critic, grads, model.critic_opt)

    actor_objective = actor_update(model, arrays.obs, critic_action_gradient(model))

    model.target_actor = soft_update(model.target_actor, model.actor, hp.tau)
    model.target_critic = soft_update(model.target_critic, model.critic, hp.tau)
    return critic_loss, actor_objective


@dataclass(frozen=True)
class StepRecord:
    step: int
    sim_time_s: float
    reward: float
    collided: bool
    min_dist: float
    synced: int | None = None

    CSV_COLUMNS = ("step", "sim_time_s", "reward", "collided", "min_dist", "synced")

    def as_row(self) -> list:
        return [
            self.step,
            repr(self.sim_time_s),
            repr(self.reward),
            int(self.collided),
            repr(self.min_dist),
            "" if self.synced is None else self.synced,
        ]


class AgentRunner:
    """Owns one agent, its environment and its replay buffer for the lifetime of a run."""

    def __init__(
        self,
        agent_id: int,
        model: AgentModel,
        env: CarEnv,
        profile: TransferProfile,
        client: federation.FederationClient | None = None,
        sync_cycle: float = 720,
        clock_mode: federation.ClockMode = federation.ClockMode.VIRTUAL,
        noise: NoiseParams | None = None,
        seed: int | None = None,
        explore: bool = True,
        train: bool = True,
    ):
        if env.track.scale_label != profile.scale_label:
            raise ShapeError(
                f"agent {agent_id}: track scale {env.track.scale_label!r} does not match "
                f"transfer profile {profile.scale_label!r}"
            )
        self.agent_id = agent_id
        self.model = model
        self.env = env
        self.profile = profile
        self.client = client
        env_seed, noise_seed, buffer_seed = derive_seeds(seed, 3)
        self.sync = federation.SyncState(sync_cycle, clock_mode)
        self.noise = NoiseState.from_params(noise or NoiseParams(), noise_seed)
        self.buffer = ReplayBuffer(
            model.hyperparams.buffer_capacity, model.actor_spec.input_size, buffer_seed
        )
        self.explore = explore
        self.train = train
        self.steps_done = 0
        self.records: list[StepRecord] = []
        self.last_losses: tuple[float, float] | None = None
        self.env.reset(env_seed)

    def _train_ready(self) -> bool:
        hp = self.model.hyperparams
        if hp.train_gate is TrainGate.FULL:
            return self.buffer.is_full()
        return len(self.buffer) >= hp.batch_size

    def step(self) -> StepRecord:
        step = self.steps_done
        obs = transfer_observation(self.env.observation, self.profile)
        action = act(self.model, obs, self.noise, self.explore)
        result = self.env.step(transfer_action(action, self.profile))
        next_obs = transfer_observation(result.observation, self.profile)
        self.buffer.record(Experience(obs, action, result.reward, next_obs, result.collided))
        self.steps_done += 1

        synced = None
        if self.client is not None and self.sync.due(self.steps_done):
            try:
                synced = federation.client_sync(self.agent_id, self.model, self.client, self.sync)
            except FederationUnavailableError as e:
                logger.warning("agent %d: federation unavailable, training locally: %s", self.agent_id, e)
            self.sync.mark(self.steps_done)

        if self.train and self._train_ready():
            self.last_losses = train_step(self.model, self.buffer.sample(self.model.hyperparams.batch_size))

        return StepRecord(
            step=step,
            sim_time_s=step * self.env.vehicle.dt,
            reward=result.reward,
            collided=result.collided,
            min_dist=result.min_distance,
            synced=synced,
        )

    def run(self, steps: int) -> list[StepRecord]:
        records = []
        for _ in range(steps):
            try:
                record = self.step()
            except Exception as e:
                logger.exception("agent %d failed at step %d", self.agent_id, self.steps_done)
                raise AgentAbortedError(self.agent_id, self.steps_done, e) from e
            records.append(record)
            self.records.append(record)
        return records


def run_agent_loop(
    runner: AgentRunner, steps: int, pace: bool = False, stop: threading.Event | None = None
) -> list[StepRecord]:
    """Drive one agent for `steps` time steps; `pace` sleeps to real time for wall-clock runs.

    A set `stop` ends a paced loop early. An aborting agent sets it for the others.
    """
    if not pace:
        return runner.run(steps)
    dt = runner.env.vehicle.dt
    records = []
    next_tick = time.monotonic()
    try:
        for _ in range(steps):
            if stop is not None and stop.is_set():
                logger.info("agent %d stopped after %d steps", runner.agent_id, runner.steps_done)
                break
            records.extend(runner.run(1))
            next_tick += dt
            delay = next_tick - time.monotonic()
            if delay > 0:
                if stop is not None:
                    stop.wait(delay)
                else:
                    time.sleep(delay)
    except AgentAbortedError:
        if stop is not None:
            stop.set()
        raise
    return records
