import numpy as np
import pytest

from ftrl_steering.ddpg_agent import AgentModel, Experience, train_step
from ftrl_steering.env_sim import NUM_BEAMS
from ftrl_steering.errors import AggregationError, ConfigError, ProtocolError
from ftrl_steering.federation import (
    REQUIRED_ROLES,
    ClockMode,
    FederationConfig,
    FederationServer,
    InProcessFederationClient,
    SyncState,
    check_ack,
    client_sync,
    fedavg,
    pull_frame,
    push_frame,
)
from ftrl_steering.nn_core import DdpgHyperparams, DenseLayer, MlpSpec, ModelParams, init_params
from ftrl_steering.protocol import MessageKind, ModelEnvelope, decode_envelope, encode_envelope


def vector_model(*values):
    return ModelParams((DenseLayer(np.array([values[:-1]], float), np.array([values[-1]], float)),))


def networks_of(params):
    return {role: params for role in REQUIRED_ROLES}


def test_fedavg_single_model_is_identity(rng):
    model = init_params(MlpSpec((3, 4, 1)), rng)
    assert fedavg([model]).bitwise_equal(model)


def test_fedavg_midpoint():
    averaged = fedavg([vector_model(1, 2), vector_model(3, 4)])
    assert averaged.layers[0].weight.tolist() == [[2.0]]
    assert averaged.layers[0].bias.tolist() == [3.0]


def test_fedavg_matches_elementwise_mean(rng):
    spec = MlpSpec((4, 5, 2))
    models = [init_params(spec, rng) for _ in range(5)]
    averaged = fedavg(models)
    for n, layer in enumerate(averaged.layers):
        assert np.allclose(layer.weight, np.mean([m.layers[n].weight for m in models], axis=0), rtol=0, atol=1e-12)
        assert np.allclose(layer.bias, np.mean([m.layers[n].bias for m in models], axis=0), rtol=0, atol=1e-12)


def test_fedavg_identical_models_exact(rng):
    model = init_params(MlpSpec((3, 2)), rng)
    assert fedavg([model] * 4).bitwise_equal(model)


def test_fedavg_is_permutation_invariant_by_agent_id(rng):
    spec = MlpSpec((3, 3, 1))
    models = [init_params(spec, rng) for _ in range(4)]
    forward = fedavg(models, [0, 1, 2, 3])
    backward = fedavg(models[::-1], [3, 2, 1, 0])
    assert forward.bitwise_equal(backward)


def test_fedavg_names_mismatched_agent(rng):
    models = [init_params(MlpSpec((3, 2)), rng), init_params(MlpSpec((3, 1)), rng)]
    with pytest.raises(AggregationError, match="agent 7") as info:
        fedavg(models, [4, 7])
    assert info.value.agent_id == 7


@pytest.mark.parametrize(
    "models, ids",
    [([], None), ([vector_model(1, 2)], [0, 1])],
)
def test_fedavg_rejects_bad_input(models, ids):
    with pytest.raises(AggregationError):
        fedavg(models, ids)


def test_config_validation():
    with pytest.raises(ConfigError, match="federation_cycle"):
        FederationConfig(federation_cycle=0)
    with pytest.raises(ConfigError, match="sync_cycle"):
        SyncState(0)


def test_server_averages_three_pushes(server):
    for agent_id, value in enumerate((1.0, 2.0, 6.0)):
        server.receive(agent_id, networks_of(vector_model(value, value)))
    snapshot = server.federate(480)
    assert snapshot.round == 1
    assert snapshot.participants == (0, 1, 2)
    for role in REQUIRED_ROLES:
        assert snapshot.networks[role].layers[0].weight.tolist() == [[3.0]]
    assert server.latest_snapshot() is snapshot
    assert [entry.round for entry in server.history] == [1]


def test_server_without_pushes_skips(server):
    assert server.federate(480) is None
    assert server.round == 0
    assert server.latest_snapshot().is_empty
    reply = decode_envelope(server.handle_frame(pull_frame(0)))
    assert reply.kind is MessageKind.SNAPSHOT
    assert (reply.round, reply.payload) == (0, b"")


def test_server_keeps_only_latest_push(server):
    server.receive(0, networks_of(vector_model(1, 1)))
    server.receive(0, networks_of(vector_model(5, 5)))
    server.receive(1, networks_of(vector_model(3, 3)))
    snapshot = server.federate(1)
    assert snapshot.networks["actor"].layers[0].weight.tolist() == [[4.0]]


def test_server_rejects_shape_change(server, rng):
    server.receive(0, networks_of(init_params(MlpSpec((3, 2)), rng)))
    with pytest.raises(AggregationError, match="changed the shape"):
        server.receive(0, networks_of(init_params(MlpSpec((3, 3)), rng)))


def test_server_rejects_missing_role(server):
    with pytest.raises(AggregationError, match="missing"):
        server.receive(0, {"actor": vector_model(1, 1)})


def test_virtual_tick_schedule(server):
    server.receive(0, networks_of(vector_model(1, 1)))
    fired = [now for now in range(1, 2000) if server.tick(float(now)) is not None]
    assert fired == [480, 960, 1440, 1920]
    assert server.round == 4


def test_wall_tick_starts_from_first_tick():
    server = FederationServer(FederationConfig(federation_cycle=2.0, clock_mode=ClockMode.WALL))
    server.receive(0, networks_of(vector_model(1, 1)))
    assert server.tick(100.0) is None
    assert server.tick(101.5) is None
    assert server.tick(102.0).round == 1


def test_handle_frame_push_acks_current_round(server):
    server.receive(1, networks_of(vector_model(2, 2)))
    server.federate(1)
    ack = check_ack(server.handle_frame(push_frame(3, networks_of(vector_model(1, 1)))))
    assert (ack.agent_id, ack.round) == (3, 1)
    assert server.status()["agents"] == [1, 3]


def test_handle_frame_rejects_garbage_and_unexpected_kinds(server):
    reply = decode_envelope(server.handle_frame(b"not a frame at all, clearly"))
    assert reply.kind is MessageKind.ERROR
    assert "bad magic" in reply.error_message
    reply = decode_envelope(server.handle_frame(encode_envelope(ModelEnvelope(MessageKind.ACK, 5))))
    assert reply.kind is MessageKind.ERROR
    assert "ACK" in reply.error_message


def test_check_ack_raises_on_error_frame():
    with pytest.raises(ProtocolError, match="server error: nope"):
        check_ack(encode_envelope(ModelEnvelope.error("nope")))


def test_sync_state_virtual_cycle():
    sync = SyncState(720)
    assert not sync.due(719)
    assert sync.due(720)
    sync.mark(720)
    assert not sync.due(1000)
    assert sync.due(1440)


@pytest.fixture()
def tiny_hyperparams():
    return DdpgHyperparams(hidden_sizes=(8,), batch_size=4, buffer_capacity=16)


def test_client_sync_adopts_snapshot(server, tiny_hyperparams):
    client = InProcessFederationClient(server)
    models = [AgentModel.create(tiny_hyperparams, seed) for seed in (1, 2, 3)]
    syncs = [SyncState(720) for _ in models]
    for agent_id, model in enumerate(models):
        assert client_sync(agent_id, model, client, syncs[agent_id]) == 0
    for _ in range(3):
        snapshot = server.federate(1)
    assert snapshot.round == 3
    assert client_sync(0, models[0], client, syncs[0]) == 3
    for role, params in snapshot.networks.items():
        assert models[0].networks()[role].bitwise_equal(params)


def test_client_sync_twice_without_federation_is_noop(server, tiny_hyperparams, rng):
    client = InProcessFederationClient(server)
    model = AgentModel.create(tiny_hyperparams, 1)
    sync = SyncState(720)
    client_sync(0, model, client, sync)
    server.federate(1)
    client_sync(0, model, client, sync)
    batch = [
        Experience(rng.uniform(1, 12, NUM_BEAMS), 0.2, 1.0, rng.uniform(1, 12, NUM_BEAMS))
        for _ in range(4)
    ]
    train_step(model, batch)
    trained = model.actor.copy()
    assert client_sync(0, model, client, sync) == 1
    assert model.actor.bitwise_equal(trained)


def test_staleness_discards_training_after_federation(server, tiny_hyperparams, rng):
    client = InProcessFederationClient(server)
    models = [AgentModel.create(tiny_hyperparams, seed) for seed in (1, 2)]
    syncs = [SyncState(720) for _ in models]
    # t0: sync
    for agent_id, model in enumerate(models):
        client_sync(agent_id, model, client, syncs[agent_id])
    # t_fed: federation
    snapshot = server.federate(480)
    # between t_fed and t1 agent 0 trains locally
    batch = [
        Experience(rng.uniform(1, 12, NUM_BEAMS), -0.3, -2.0, rng.uniform(1, 12, NUM_BEAMS))
        for _ in range(4)
    ]
    for _ in range(3):
        train_step(models[0], batch)
    assert not models[0].actor.bitwise_equal(snapshot.networks["actor"])
    # t1: sync overwrites the local progress
    client_sync(0, models[0], client, syncs[0])
    assert models[0].actor.bitwise_equal(snapshot.networks["actor"])
    assert models[0].critic.bitwise_equal(snapshot.networks["critic"])


def test_client_never_adopts_older_round(server, tiny_hyperparams):
    client = InProcessFederationClient(server)
    model = AgentModel.create(tiny_hyperparams, 1)
    sync = SyncState(720, held_round=5)
    server.receive(1, model.networks())
    server.federate(1)
    before = model.actor.copy()
    assert client_sync(0, model, client, sync) == 5
    assert model.actor.bitwise_equal(before)
