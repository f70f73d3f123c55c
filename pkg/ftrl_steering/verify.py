"""Self-checks behind `ftrl verify`: each compares an operation against an independent oracle."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .ddpg_agent import AgentModel, Experience, train_step
from .env_sim import NUM_BEAMS, RewardParams, compute_reward
from .errors import ProtocolError
from .federation import FederationServer, InProcessFederationClient, SyncState, client_sync, fedavg
from .nn_core import (
    Activation,
    DdpgHyperparams,
    DenseLayer,
    MlpSpec,
    ModelParams,
    flatten,
    init_params,
    mlp_backward,
    mlp_forward,
    unflatten,
)
from .protocol import (
    HEADER_SIZE,
    LENGTH_OFFSET,
    MessageKind,
    ModelEnvelope,
    decode_envelope,
    decode_networks,
    encode_envelope,
    encode_networks,
)
from .transfer import TransferProfile, transfer_action, transfer_observation

logger = logging.getLogger(__name__)

# header bytes a decoder can validate: magic, version, kind and payload length
CHECKED_HEADER_BYTES = (*range(0, 6), *range(LENGTH_OFFSET, HEADER_SIZE))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_reward_oracle(rng: np.random.Generator, samples: int = 10_000) -> CheckResult:
    params = RewardParams()
    k = math.floor(params.fraction * NUM_BEAMS + 1e-9)
    worst = 0.0
    for _ in range(samples):
        obs = rng.uniform(0.05, 12.0, size=NUM_BEAMS)
        ordered = sorted(float(v) for v in obs)
        m_d = sum(ordered[:k]) / k
        collided = ordered[0] < params.safe_distance
        expected = (
            params.base_reward
            - (params.collision_penalty if collided else 0.0)
            - 2.0 ** (params.exponent_offset - m_d)
        )
        worst = max(worst, abs(compute_reward(obs, params) - expected))
    return CheckResult("reward_oracle", worst <= 1e-12, f"max abs error {worst:.3g} over {samples} observations")


def _random_small_spec(rng: np.random.Generator, max_params: int = 64) -> MlpSpec:
    outputs = (Activation.TANH, Activation.LINEAR)
    while True:
        sizes = tuple(int(v) for v in rng.integers(1, 6, size=int(rng.integers(2, 5))))
        spec = MlpSpec(sizes, output_activation=outputs[int(rng.integers(2))])
        if spec.param_count <= max_params:
            return spec


def check_gradients(rng: np.random.Generator, networks: int = 50, h: float = 1e-6) -> CheckResult:
    worst = 0.0
    for _ in range(networks):
        spec = _random_small_spec(rng)
        params = init_params(spec, rng)
        x = rng.normal(size=(3, spec.input_size))
        weights = rng.normal(size=(3, spec.output_size))

        def loss(vector: np.ndarray) -> float:
            out, _ = mlp_forward(unflatten(vector, spec), spec, x)
            return float(np.sum(out * weights))

        _, cache = mlp_forward(params, spec, x)
        grads, _ = mlp_backward(params, cache, weights)
        analytic = flatten(grads)
        theta = flatten(params)
        numeric = np.empty_like(theta)
        for i in range(theta.size):
            step = np.zeros_like(theta)
            step[i] = h
            numeric[i] = (loss(theta + step) - loss(theta - step)) / (2 * h)
        # per entry; magnitudes below 1e-3 are measured against 1e-3
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
    return CheckResult("gradient_check", worst <= 1e-5, f"max relative error {worst:.3g} over {networks} networks")


def _random_params(rng: np.random.Generator, shapes: list[tuple[int, int]]) -> ModelParams:
    return ModelParams(
        tuple(DenseLayer(rng.normal(size=(o, i)), rng.normal(size=o)) for o, i in shapes)
    )


def check_fedavg_oracle(rng: np.random.Generator, sets: int = 100) -> CheckResult:
    worst = 0.0
    identity_ok = True
    for n in range(sets):
        count = (1, 2, 3, 5)[n % 4]
        shapes = [(int(rng.integers(1, 6)), int(rng.integers(1, 6))) for _ in range(int(rng.integers(1, 4)))]
        models = [_random_params(rng, shapes) for _ in range(count)]
        averaged = fedavg(models)
        for index, layer in enumerate(averaged.layers):
            w = np.mean([m.layers[index].weight for m in models], axis=0)
            b = np.mean([m.layers[index].bias for m in models], axis=0)
            worst = max(worst, float(np.abs(layer.weight - w).max()), float(np.abs(layer.bias - b).max()))
        identity_ok &= fedavg([models[0]] * count).bitwise_equal(models[0])
    passed = worst <= 1e-12 and identity_ok
    return CheckResult(
        "fedavg_oracle", passed, f"max abs error {worst:.3g}; identical models exact: {identity_ok}"
    )


def check_transfer(rng: np.random.Generator, samples: int = 1000) -> CheckResult:
    profile = TransferProfile("rc", 6.67, 0.5)
    inverse = profile.inverse()
    round_trip = odd = True
    for _ in range(samples):
        obs = rng.uniform(0.01, 12.0, size=NUM_BEAMS)
        back = transfer_observation(transfer_observation(obs, profile), inverse)
        round_trip &= bool(np.allclose(back, obs, rtol=1e-12, atol=0.0))
        a = float(rng.uniform(-0.999, 0.999))
        odd &= transfer_action(-a, profile) == -transfer_action(a, profile)
    example = transfer_observation(np.ones(NUM_BEAMS), profile)
    example_ok = bool(np.all(example == 6.67))
    passed = round_trip and odd and example_ok
    return CheckResult(
        "transfer_invariants",
        passed,
        f"round trip {round_trip}, odd action map {odd}, beta=6.67 example {example_ok}",
    )


def _random_envelope(rng: np.random.Generator) -> ModelEnvelope:
    kind = MessageKind(int(rng.integers(len(MessageKind))))
    agent_id, round_ = int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32))
    if kind in (MessageKind.PUSH_MODEL, MessageKind.SNAPSHOT):
        shapes = [(int(rng.integers(1, 5)), int(rng.integers(1, 5))) for _ in range(2)]
        networks = {
            role: _random_params(rng, shapes)
            for role in ("actor", "critic", "target_actor", "target_critic")
        }
        payload = encode_networks(networks)
    elif kind is MessageKind.ERROR:
        payload = f"error {int(rng.integers(1000))}".encode()
    else:
        payload = b""
    return ModelEnvelope(kind, agent_id, round_, payload)


def check_protocol(rng: np.random.Generator, envelopes: int = 1000) -> CheckResult:
    round_trip = True
    undetected = 0
    for _ in range(envelopes):
        envelope = _random_envelope(rng)
        frame = encode_envelope(envelope)
        decoded = decode_envelope(frame)
        round_trip &= decoded == envelope and encode_envelope(decoded) == frame
        if envelope.payload and envelope.kind in (MessageKind.PUSH_MODEL, MessageKind.SNAPSHOT):
            round_trip &= encode_networks(decode_networks(decoded.payload)) == envelope.payload
        for offset in CHECKED_HEADER_BYTES:
            corrupted = bytearray(frame)
            corrupted[offset] ^= 0xFF
            try:
                decode_envelope(bytes(corrupted))
            except ProtocolError:
                continue
            undetected += 1
    passed = round_trip and undetected == 0
    return CheckResult(
        "protocol", passed, f"round trip {round_trip}, undetected header corruptions {undetected}"
    )


def check_staleness(rng: np.random.Generator) -> CheckResult:
    """Local training between a federation and the next sync is overwritten by that sync."""
    hyperparams = DdpgHyperparams(hidden_sizes=(8,), batch_size=4, buffer_capacity=16)
    server = FederationServer()
    client = InProcessFederationClient(server)
    agents = [AgentModel.create(hyperparams, seed) for seed in (1, 2)]
    syncs = [SyncState(1.0) for _ in agents]

    # t0: both agents upload
    for agent_id, (model, sync) in enumerate(zip(agents, syncs)):
        client_sync(agent_id, model, client, sync)
    snapshot = server.federate(1.0)

    # (t_fed, t1): agent 0 keeps training locally
    batch = [
        Experience(rng.uniform(0.5, 12.0, NUM_BEAMS), 0.1, -1.0, rng.uniform(0.5, 12.0, NUM_BEAMS))
        for _ in range(hyperparams.batch_size)
    ]
    for _ in range(5):
        train_step(agents[0], batch)
    drifted = not agents[0].actor.bitwise_equal(snapshot.networks["actor"])

    # t1: sync brings back the t_fed snapshot
    held = client_sync(0, agents[0], client, syncs[0])
    restored = all(
        agents[0].networks()[role].bitwise_equal(params) for role, params in snapshot.networks.items()
    )
    passed = drifted and restored and held == snapshot.round
    return CheckResult(
        "staleness_replay", passed, f"local drift {drifted}, snapshot restored {restored}, round {held}"
    )


def check_single_transition(rng: np.random.Generator, steps: int = 2000) -> CheckResult:
    hyperparams = DdpgHyperparams()
    model = AgentModel.create(hyperparams, int(rng.integers(2**31)))
    obs = np.full(NUM_BEAMS, 2.0)
    transition = Experience(obs, 0.0, 0.5, obs, bootstrap_cut=True)
    batch = [transition] * hyperparams.batch_size
    loss = math.inf
    for step in range(1, steps + 1):
        loss, _ = train_step(model, batch)
        if loss < 1e-3:
            return CheckResult("single_transition", True, f"critic loss {loss:.3g} after {step} steps")
    return CheckResult("single_transition", False, f"critic loss {loss:.3g} after {steps} steps")


CHECKS: dict[str, Callable[[np.random.Generator], CheckResult]] = {
    "reward_oracle": check_reward_oracle,
    "gradient_check": check_gradients,
    "fedavg_oracle": check_fedavg_oracle,
    "transfer_invariants": check_transfer,
    "protocol": check_protocol,
    "staleness_replay": check_staleness,
    "single_transition": check_single_transition,
}


def run_checks(names: list[str] | None = None, seed: int = 0) -> list[CheckResult]:
    results = []
    for name in names or list(CHECKS):
        result = CHECKS[name](np.random.default_rng(seed))
        logger.info("%s: %s (%s)", name, "ok" if result.passed else "FAILED", result.detail)
        results.append(result)
    return results
