import struct

import numpy as np
import pytest

from ftrl_steering.errors import ProtocolError
from ftrl_steering.nn_core import DenseLayer, MlpSpec, ModelParams, flatten, init_params
from ftrl_steering.protocol import (
    HEADER_SIZE,
    LENGTH_OFFSET,
    MessageKind,
    ModelEnvelope,
    NetworkRole,
    decode_envelope,
    decode_networks,
    encode_envelope,
    encode_networks,
    read_checkpoint,
    write_checkpoint,
)

ROLES = ("actor", "critic", "target_actor", "target_critic")


def random_networks(rng, sizes=(3, 4, 1)):
    spec = MlpSpec(sizes)
    return {role: init_params(spec, rng) for role in ROLES}


def test_ack_frame_is_header_only():
    envelope = ModelEnvelope(MessageKind.ACK, agent_id=2, round=7)
    frame = encode_envelope(envelope)
    assert len(frame) == HEADER_SIZE == 22
    assert frame[:4] == b"FTRL"
    assert frame[4] == 1
    assert frame[5] == MessageKind.ACK
    assert struct.unpack_from("<IIQ", frame, 6) == (2, 7, 0)
    assert decode_envelope(frame) == envelope


def test_single_layer_payload_layout():
    params = ModelParams((DenseLayer(np.array([[2.0]]), np.array([1.0])),))
    payload = encode_networks({"actor": params})
    # role u8, layer count u16, rows u32, cols u32, then weight and bias
    assert payload[:3] == struct.pack("<BH", NetworkRole.ACTOR, 1)
    assert payload[3:11] == struct.pack("<II", 1, 1)
    assert payload[11:] == struct.pack("<dd", 2.0, 1.0)


def test_networks_are_encoded_in_role_order(rng):
    networks = random_networks(rng)
    shuffled = {role: networks[role] for role in reversed(ROLES)}
    assert encode_networks(shuffled) == encode_networks(networks)
    assert list(decode_networks(encode_networks(shuffled))) == list(ROLES)


def test_snapshot_round_trip_matches_flatten_order(rng):
    networks = random_networks(rng)
    frame = encode_envelope(ModelEnvelope(MessageKind.SNAPSHOT, 0, 3, encode_networks(networks)))
    decoded = decode_networks(decode_envelope(frame).payload)
    for role in ROLES:
        assert decoded[role].bitwise_equal(networks[role])
        assert np.array_equal(flatten(decoded[role]), flatten(networks[role]))


@pytest.mark.parametrize(
    "offset, match",
    [(0, "bad magic"), (4, "unsupported protocol version"), (5, "unknown message kind")],
)
def test_corrupted_header_reports_offset(offset, match):
    frame = bytearray(encode_envelope(ModelEnvelope(MessageKind.ACK, 1, 1)))
    frame[offset] ^= 0xFF
    with pytest.raises(ProtocolError, match=match) as info:
        decode_envelope(bytes(frame))
    assert info.value.offset == offset


@pytest.mark.parametrize("offset", range(LENGTH_OFFSET, HEADER_SIZE))
def test_corrupted_length_is_detected(offset):
    frame = bytearray(encode_envelope(ModelEnvelope.error("boom")))
    frame[offset] ^= 0x01
    with pytest.raises(ProtocolError) as info:
        decode_envelope(bytes(frame))
    assert info.value.offset == LENGTH_OFFSET


def test_short_frame():
    with pytest.raises(ProtocolError, match="header") as info:
        decode_envelope(b"FTRL")
    assert info.value.offset == 4


def test_truncated_payload_reports_absolute_offset(rng):
    payload = encode_networks({"actor": random_networks(rng)["actor"]})
    cut = payload[:-8]
    with pytest.raises(ProtocolError, match="truncated layer values") as info:
        decode_networks(cut, base_offset=HEADER_SIZE)
    # the last layer's values start right after its 8-byte layer header
    assert info.value.offset == HEADER_SIZE + len(payload) - (4 + 1) * 8


def test_push_frame_with_bad_payload_is_rejected():
    payload = struct.pack("<BH", 9, 0)
    frame = encode_envelope(ModelEnvelope(MessageKind.PUSH_MODEL, 0, 0, payload))
    with pytest.raises(ProtocolError, match="unknown network role 9") as info:
        decode_envelope(frame)
    assert info.value.offset == HEADER_SIZE


def test_duplicate_role_is_rejected():
    block = struct.pack("<BH", NetworkRole.CRITIC, 0)
    with pytest.raises(ProtocolError, match="duplicate"):
        decode_networks(block + block)


def test_error_envelope_message():
    decoded = decode_envelope(encode_envelope(ModelEnvelope.error("agent 4 changed shape")))
    assert decoded.kind is MessageKind.ERROR
    assert decoded.error_message == "agent 4 changed shape"


def test_checkpoint_round_trip(tmp_path, rng):
    networks = random_networks(rng)
    path = tmp_path / "model.bin"
    write_checkpoint(path, networks)
    loaded = read_checkpoint(path)
    assert all(loaded[role].bitwise_equal(networks[role]) for role in ROLES)
