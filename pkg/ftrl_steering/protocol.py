"""Binary model-exchange frames.

Header (22 bytes, little-endian):

    magic "FTRL" | version u8 | kind u8 | agent id u32 | round u32 | payload length u64

Model payloads hold one block per network:

    role u8 | layer count u16 | per layer: rows u32, cols u32, rows*cols f64 (row-major), rows f64 bias

The same payload block, written to disk on its own, is the checkpoint format.
"""

import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ProtocolError
from .nn_core import DenseLayer, ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"FTRL"
VERSION = 1
HEADER = struct.Struct("<4sBBIIQ")
HEADER_SIZE = HEADER.size
LENGTH_OFFSET = 14

_BLOCK = struct.Struct("<BH")
_LAYER = struct.Struct("<II")
_FLOAT = np.dtype("<f8")


class MessageKind(IntEnum):
    PUSH_MODEL = 0
    PULL_REQUEST = 1
    SNAPSHOT = 2
    ACK = 3
    ERROR = 4


class NetworkRole(IntEnum):
    ACTOR = 0
    CRITIC = 1
    TARGET_ACTOR = 2
    TARGET_CRITIC = 3

    @property
    def key(self) -> str:
        return self.name.lower()


ROLE_BY_KEY = {role.key: role for role in NetworkRole}


@dataclass(frozen=True)
class ModelEnvelope:
    kind: MessageKind
    agent_id: int = 0
    round: int = 0
    payload: bytes = b""
    version: int = VERSION

    @classmethod
    def error(cls, message: str, agent_id: int = 0, round: int = 0) -> "ModelEnvelope":
        return cls(MessageKind.ERROR, agent_id, round, message.encode("utf-8"))

    @property
    def error_message(self) -> str:
        return self.payload.decode("utf-8", errors="replace")


def encode_networks(networks: dict[str, ModelParams]) -> bytes:
    """Blocks in role-tag order regardless of dict order."""
    parts = []
    for key in sorted(networks, key=lambda k: ROLE_BY_KEY[k]):
        params = networks[key]
        parts.append(_BLOCK.pack(ROLE_BY_KEY[key], len(params.layers)))
        for weight, bias in params.layers:
            rows, cols = weight.shape
            parts.append(_LAYER.pack(rows, cols))
            parts.append(np.ascontiguousarray(weight, dtype=_FLOAT).tobytes())
            parts.append(np.ascontiguousarray(bias, dtype=_FLOAT).tobytes())
    return b"".join(parts)


def _take(data: bytes, offset: int, size: int, what: str, base: int) -> None:
    if offset + size > len(data):
        raise ProtocolError(f"truncated {what}", base + offset)


def decode_networks(payload: bytes, base_offset: int = 0) -> dict[str, ModelParams]:
    networks: dict[str, ModelParams] = {}
    offset = 0
    while offset < len(payload):
        _take(payload, offset, _BLOCK.size, "network block header", base_offset)
        tag, layer_count = _BLOCK.unpack_from(payload, offset)
        try:
            role = NetworkRole(tag)
        except ValueError:
            raise ProtocolError(f"unknown network role {tag}", base_offset + offset) from None
        if role.key in networks:
            raise ProtocolError(f"duplicate network role {role.key}", base_offset + offset)
        offset += _BLOCK.size

        layers = []
        for _ in range(layer_count):
            _take(payload, offset, _LAYER.size, "layer header", base_offset)
            rows, cols = _LAYER.unpack_from(payload, offset)
            offset += _LAYER.size
            count = rows * cols + rows
            _take(payload, offset, count * _FLOAT.itemsize, "layer values", base_offset)
            values = np.frombuffer(payload, dtype=_FLOAT, count=count, offset=offset)
            offset += count * _FLOAT.itemsize
            weight = values[: rows * cols].reshape(rows, cols).astype(np.float64)
            bias = values[rows * cols :].astype(np.float64)
            layers.append(DenseLayer(weight, bias))
        networks[role.key] = ModelParams(tuple(layers))
    return networks


def encode_envelope(envelope: ModelEnvelope) -> bytes:
    header = HEADER.pack(
        MAGIC,
        envelope.version,
        int(envelope.kind),
        envelope.agent_id,
        envelope.round,
        len(envelope.payload),
    )
    return header + envelope.payload


def decode_envelope(data: bytes) -> ModelEnvelope:
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise ProtocolError(f"frame shorter than the {HEADER_SIZE}-byte header", len(data))
    magic, version, kind, agent_id, round_, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}", 4)
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}", 5) from None
    if length != len(data) - HEADER_SIZE:
        raise ProtocolError(
            f"declared payload length {length} but {len(data) - HEADER_SIZE} bytes follow",
            LENGTH_OFFSET,
        )
    payload = data[HEADER_SIZE:]
    if kind in (MessageKind.PUSH_MODEL, MessageKind.SNAPSHOT):
        decode_networks(payload, HEADER_SIZE)
    return ModelEnvelope(kind, agent_id, round_, payload, version)


def write_checkpoint(path: str | Path, networks: dict[str, ModelParams]) -> None:
    Path(path).write_bytes(encode_networks(networks))
    logger.info("wrote checkpoint %s", path)


def read_checkpoint(path: str | Path) -> dict[str, ModelParams]:
    return decode_networks(Path(path).read_bytes())
