import numpy as np

from ftrl_steering.federation import REQUIRED_ROLES, pull_frame, push_frame
from ftrl_steering.nn_core import DenseLayer, ModelParams
from ftrl_steering.protocol import MessageKind, ModelEnvelope, decode_envelope, decode_networks, encode_envelope

OCTET = "application/octet-stream"


def networks(value):
    params = ModelParams((DenseLayer(np.full((1, 2), value), np.array([value])),))
    return {role: params for role in REQUIRED_ROLES}


def test_push_acks(client):
    response = client.post("/federation/v1/push", data=push_frame(3, networks(1.0)), content_type=OCTET)
    assert response.status_code == 200
    assert response.mimetype == OCTET
    ack = decode_envelope(response.data)
    assert (ack.kind, ack.agent_id, ack.round) == (MessageKind.ACK, 3, 0)


def test_pull_before_any_federation(client):
    response = client.post("/federation/v1/pull", data=pull_frame(0), content_type=OCTET)
    assert response.status_code == 200
    snapshot = decode_envelope(response.data)
    assert snapshot.kind is MessageKind.SNAPSHOT
    assert (snapshot.round, snapshot.payload) == (0, b"")


def test_push_federate_pull(client, server):
    for agent_id, value in enumerate((1.0, 3.0)):
        client.post("/federation/v1/push", data=push_frame(agent_id, networks(value)), content_type=OCTET)
    server.tick(480.0)
    response = client.post("/federation/v1/pull", data=pull_frame(1), content_type=OCTET)
    snapshot = decode_envelope(response.data)
    assert snapshot.round == 1
    pulled = decode_networks(snapshot.payload)
    assert pulled["actor"].layers[0].weight.tolist() == [[2.0, 2.0]]


def test_bad_frame_gets_error_frame(client):
    response = client.post("/federation/v1/push", data=b"\x00" * 30, content_type=OCTET)
    assert response.status_code == 400
    error = decode_envelope(response.data)
    assert error.kind is MessageKind.ERROR
    assert "bad magic" in error.error_message


def test_shape_change_is_rejected(client):
    client.post("/federation/v1/push", data=push_frame(0, networks(1.0)), content_type=OCTET)
    wider = {
        role: ModelParams((DenseLayer(np.ones((1, 3)), np.ones(1)),)) for role in REQUIRED_ROLES
    }
    response = client.post("/federation/v1/push", data=push_frame(0, wider), content_type=OCTET)
    assert response.status_code == 400
    assert "changed the shape" in decode_envelope(response.data).error_message


def test_status(client, server):
    client.post("/federation/v1/push", data=push_frame(2, networks(1.0)), content_type=OCTET)
    server.federate(480.0)
    response = client.get("/federation/v1/status")
    assert response.status_code == 200
    assert response.json == {
        "round": 1,
        "agents": [2],
        "participants": [2],
        "created_at": 480.0,
        "federation_cycle": 480.0,
        "clock_mode": "virtual",
    }


def test_openapi_document(client):
    response = client.get("/federation/v1/docs/openapi.json")
    assert response.status_code == 200
    assert response.json["info"]["title"] == "Federation API"
    assert "/federation/v1/status" in response.json["paths"]


def test_server_only_accepts_push_and_pull(client):
    ack = encode_envelope(ModelEnvelope(MessageKind.ACK, 1, 0))
    response = client.post("/federation/v1/pull", data=ack, content_type=OCTET)
    assert response.status_code == 400
    assert decode_envelope(response.data).error_message == "server does not accept ACK frames"
