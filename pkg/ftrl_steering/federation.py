"""Federated averaging server and the agent-side sync step.

The server keeps the most recent upload of every agent and, once per federation
cycle, replaces its snapshot with the parameter-wise mean of those uploads. Agents
push their networks and pull the snapshot once per sync cycle, adopting it only
when it is newer than the one they hold.
"""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Protocol

from .errors import AggregationError, ConfigError, ProtocolError
from .nn_core import DenseLayer, ModelParams
from .protocol import (
    MessageKind,
    ModelEnvelope,
    NetworkRole,
    decode_envelope,
    decode_networks,
    encode_envelope,
    encode_networks,
)

logger = logging.getLogger(__name__)

REQUIRED_ROLES = tuple(role.key for role in NetworkRole)


class ClockMode(StrEnum):
    VIRTUAL = "virtual"
    WALL = "wall"


@dataclass(frozen=True)
class FederationConfig:
    federation_cycle: float = 480
    sync_cycle: float = 720
    clock_mode: ClockMode = ClockMode.VIRTUAL
    server_addr: str = "127.0.0.1:8765"

    def __post_init__(self):
        if self.federation_cycle <= 0:
            raise ConfigError("federation.federation_cycle", "must be positive")
        if self.sync_cycle <= 0:
            raise ConfigError("federation.sync_cycle", "must be positive")


@dataclass(frozen=True, eq=False)
class FederationSnapshot:
    round: int
    networks: dict[str, ModelParams] = field(default_factory=dict)
    created_at: float | None = None
    participants: tuple[int, ...] = ()

    @property
    def is_empty(self) -> bool:
        return not self.networks


def fedavg(models: Sequence[ModelParams], agent_ids: Sequence[int] | None = None) -> ModelParams:
    """Parameter-wise mean of same-shaped models.

    Models are folded in ascending agent-id order with a running mean, so averaging
    N identical models returns them exactly and the result does not depend on the
    order the models were passed in.
    """
    if not models:
        raise AggregationError("no models to aggregate")
    ids = list(range(len(models))) if agent_ids is None else list(agent_ids)
    if len(ids) != len(models):
        raise AggregationError(f"{len(models)} models but {len(ids)} agent ids")
    if len(set(ids)) != len(ids):
        raise AggregationError("duplicate agent ids")

    order = sorted(range(len(models)), key=lambda i: ids[i])
    reference = models[order[0]]
    for i in order[1:]:
        if models[i].shapes != reference.shapes:
            raise AggregationError(
                f"agent {ids[i]} uploaded shapes {models[i].shapes}, "
                f"expected {reference.shapes}",
                agent_id=ids[i],
            )

    weights = [layer.weight.copy() for layer in reference.layers]
    biases = [layer.bias.copy() for layer in reference.layers]
    for count, i in enumerate(order[1:], start=2):
        for n, layer in enumerate(models[i].layers):
            weights[n] += (layer.weight - weights[n]) / count
            biases[n] += (layer.bias - biases[n]) / count

    result = ModelParams(tuple(DenseLayer(w, b) for w, b in zip(weights, biases)))
    if not result.is_finite():
        raise AggregationError("aggregate contains non-finite values")
    return result


def _require_roles(agent_id: int, networks: dict[str, ModelParams]) -> None:
    missing = [role for role in REQUIRED_ROLES if role not in networks]
    if missing:
        raise AggregationError(f"agent {agent_id} upload is missing {missing}", agent_id=agent_id)


@dataclass(frozen=True)
class RoundLog:
    round: int
    at: float
    participants: tuple[int, ...]

    CSV_COLUMNS = ("round", "step", "participants")

    def as_row(self) -> list:
        return [self.round, repr(self.at), " ".join(str(i) for i in self.participants)]


class FederationServer:
    """Holds the latest upload per agent and the current federation snapshot.

    All public methods are safe to call from several threads.
    """

    def __init__(self, config: FederationConfig | None = None):
        self.config = config or FederationConfig()
        self._lock = threading.Lock()
        self._uploads: dict[int, dict[str, ModelParams]] = {}
        self._snapshot = FederationSnapshot(round=0)
        self._last_federation: float | None = None
        self.history: list[RoundLog] = []

    def start_clock(self, now: float) -> None:
        with self._lock:
            self._last_federation = now

    def receive(self, agent_id: int, networks: dict[str, ModelParams]) -> None:
        _require_roles(agent_id, networks)
        with self._lock:
            previous = self._uploads.get(agent_id)
            if previous is not None:
                for role in REQUIRED_ROLES:
                    if previous[role].shapes != networks[role].shapes:
                        raise AggregationError(
                            f"agent {agent_id} changed the shape of its {role} network",
                            agent_id=agent_id,
                        )
            self._uploads[agent_id] = {role: networks[role] for role in REQUIRED_ROLES}
        logger.debug("received upload from agent %d", agent_id)

    def latest_snapshot(self) -> FederationSnapshot:
        with self._lock:
            return self._snapshot

    @property
    def round(self) -> int:
        return self.latest_snapshot().round

    def federate(self, now: float) -> FederationSnapshot | None:
        """Aggregate every agent that has uploaded at least once; skip when none has."""
        with self._lock:
            participants = tuple(sorted(self._uploads))
            if not participants:
                logger.info("federation at %s skipped: no uploads yet", now)
                return None
            networks = {
                role: fedavg([self._uploads[i][role] for i in participants], participants)
                for role in REQUIRED_ROLES
            }
            snapshot = FederationSnapshot(
                round=self._snapshot.round + 1,
                networks=networks,
                created_at=now,
                participants=participants,
            )
            self._snapshot = snapshot
            self.history.append(RoundLog(snapshot.round, now, participants))
        logger.info(
            "federation round %d at %s over agents %s", snapshot.round, now, list(participants)
        )
        return snapshot

    def tick(self, now: float) -> FederationSnapshot | None:
        """Federate when at least one federation cycle has elapsed since the last one."""
        with self._lock:
            if self._last_federation is None:
                self._last_federation = 0.0 if self.config.clock_mode is ClockMode.VIRTUAL else now
            if now - self._last_federation < self.config.federation_cycle:
                return None
            self._last_federation = now
        return self.federate(now)

    def status(self) -> dict:
        with self._lock:
            return {
                "round": self._snapshot.round,
                "agents": sorted(self._uploads),
                "participants": list(self._snapshot.participants),
                "created_at": self._snapshot.created_at,
                "federation_cycle": self.config.federation_cycle,
                "clock_mode": str(self.config.clock_mode),
            }

    def handle_frame(self, frame: bytes) -> bytes:
        """Answer one request frame; failures come back as ERROR frames."""
        try:
            request = decode_envelope(frame)
            if request.kind is MessageKind.PUSH_MODEL:
                self.receive(request.agent_id, decode_networks(request.payload))
                reply = ModelEnvelope(MessageKind.ACK, request.agent_id, self.round)
            elif request.kind is MessageKind.PULL_REQUEST:
                snapshot = self.latest_snapshot()
                payload = b"" if snapshot.is_empty else encode_networks(snapshot.networks)
                reply = ModelEnvelope(MessageKind.SNAPSHOT, request.agent_id, snapshot.round, payload)
            else:
                reply = ModelEnvelope.error(
                    f"server does not accept {request.kind.name} frames", request.agent_id
                )
        except (ProtocolError, AggregationError) as e:
            logger.warning("rejected frame: %s", e)
            reply = ModelEnvelope.error(str(e))
        return encode_envelope(reply)


def snapshot_from_envelope(envelope: ModelEnvelope) -> FederationSnapshot:
    if envelope.kind is MessageKind.ERROR:
        raise ProtocolError(f"server error: {envelope.error_message}")
    if envelope.kind is not MessageKind.SNAPSHOT:
        raise ProtocolError(f"expected a SNAPSHOT frame, got {envelope.kind.name}")
    return FederationSnapshot(round=envelope.round, networks=decode_networks(envelope.payload))


def push_frame(agent_id: int, networks: dict[str, ModelParams]) -> bytes:
    return encode_envelope(ModelEnvelope(MessageKind.PUSH_MODEL, agent_id, 0, encode_networks(networks)))


def pull_frame(agent_id: int) -> bytes:
    return encode_envelope(ModelEnvelope(MessageKind.PULL_REQUEST, agent_id))


def check_ack(reply: bytes) -> ModelEnvelope:
    envelope = decode_envelope(reply)
    if envelope.kind is MessageKind.ERROR:
        raise ProtocolError(f"server error: {envelope.error_message}")
    if envelope.kind is not MessageKind.ACK:
        raise ProtocolError(f"expected an ACK frame, got {envelope.kind.name}")
    return envelope


class FederationClient(Protocol):
    def exchange(self, agent_id: int, networks: dict[str, ModelParams]) -> FederationSnapshot:
        """Push this agent's networks, then pull the latest snapshot."""
        ...


class InProcessFederationClient:
    """Talks to a server in the same process through the encoded frames."""

    def __init__(self, server: FederationServer):
        self.server = server

    def exchange(self, agent_id: int, networks: dict[str, ModelParams]) -> FederationSnapshot:
        check_ack(self.server.handle_frame(push_frame(agent_id, networks)))
        reply = decode_envelope(self.server.handle_frame(pull_frame(agent_id)))
        return snapshot_from_envelope(reply)


@dataclass
class SyncState:
    """Tracks when an agent last synchronized and which round it holds."""

    cycle: float
    clock_mode: ClockMode = ClockMode.VIRTUAL
    held_round: int = 0
    last_mark: float = field(default=0.0)

    def __post_init__(self):
        if self.cycle <= 0:
            raise ConfigError("federation.sync_cycle", "must be positive")
        if self.clock_mode is ClockMode.WALL:
            self.last_mark = time.monotonic()

    def _now(self, steps_done: int) -> float:
        return time.monotonic() if self.clock_mode is ClockMode.WALL else float(steps_done)

    def due(self, steps_done: int) -> bool:
        return self._now(steps_done) - self.last_mark >= self.cycle

    def mark(self, steps_done: int) -> None:
        self.last_mark = self._now(steps_done)


def client_sync(agent_id: int, model, client: FederationClient, sync: SyncState) -> int:
    """Push, pull and adopt a strictly newer snapshot; returns the round now held.

    Calling it twice with no new federation in between leaves the model untouched.
    """
    snapshot = client.exchange(agent_id, model.networks())
    if snapshot.is_empty or snapshot.round <= sync.held_round:
        return sync.held_round
    model.load_networks(snapshot.networks)
    logger.debug("agent %d adopted federation round %d", agent_id, snapshot.round)
    sync.held_round = snapshot.round
    return sync.held_round

