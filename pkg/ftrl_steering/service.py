"""Running the federation server over HTTP for wall-clock experiments."""

from __future__ import annotations

import logging
import os
import threading
import time

import requests
from werkzeug.serving import make_server

from .app import create_app
from .errors import ConfigError, FederationUnavailableError
from .federation import (
    FederationConfig,
    FederationServer,
    FederationSnapshot,
    check_ack,
    pull_frame,
    push_frame,
    snapshot_from_envelope,
)
from .nn_core import ModelParams
from .protocol import decode_envelope

logger = logging.getLogger(__name__)

SERVER_ADDR_ENV = "FTRL_SERVER_ADDR"


def resolve_server_addr(configured: str | None = None) -> tuple[str, int]:
    """`FTRL_SERVER_ADDR` wins over the configured `host:port`."""
    addr = os.getenv(SERVER_ADDR_ENV) or configured
    if not addr:
        raise ConfigError("federation.server_addr", f"set {SERVER_ADDR_ENV} or configure an address")
    host, sep, port = addr.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ConfigError("federation.server_addr", f"expected host:port, got {addr!r}")
    return host, int(port)


class HttpFederationClient:
    """Exchanges frames with a federation service over a `requests.Session`."""

    def __init__(
        self,
        server_addr: str | None = None,
        *,
        timeout: float = 10.0,
        session: requests.Session | None = None,
    ) -> None:
        host, port = resolve_server_addr(server_addr)
        self.base_url = f"http://{host}:{port}/federation/v1"
        self.timeout = timeout
        self._s = session or requests.Session()
        self._s.headers.update({"Content-Type": "application/octet-stream"})

    def _post(self, path: str, frame: bytes) -> bytes:
        try:
            r = self._s.post(f"{self.base_url}/{path}", data=frame, timeout=self.timeout)
        except requests.RequestException as e:
            raise FederationUnavailableError(f"{self.base_url}/{path}: {e}") from e
        # error frames come back with 400 and are decoded by the caller
        if r.status_code >= 500:
            raise FederationUnavailableError(f"{self.base_url}/{path}: HTTP {r.status_code}")
        return r.content

    def exchange(self, agent_id: int, networks: dict[str, ModelParams]) -> FederationSnapshot:
        check_ack(self._post("push", push_frame(agent_id, networks)))
        reply = decode_envelope(self._post("pull", pull_frame(agent_id)))
        return snapshot_from_envelope(reply)

    def close(self) -> None:
        self._s.close()


class AggregationTimer:
    """Ticks a FederationServer with the wall clock from a background thread."""

    def __init__(self, server: FederationServer, poll_interval: float = 0.05):
        self.server = server
        self.poll_interval = poll_interval
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _run(self) -> None:
        while not self._stop.wait(self.poll_interval):
            self.server.tick(time.monotonic())

    def start(self) -> AggregationTimer:
        self.server.start_clock(time.monotonic())
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="ftrl-federation-timer", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


class FederationService:
    """An HTTP server thread plus an aggregation timer around one FederationServer."""

    def __init__(self, config: FederationConfig, poll_interval: float = 0.05):
        self.config = config
        self.server = FederationServer(config)
        self.timer = AggregationTimer(self.server, poll_interval)
        self.host, self.port = resolve_server_addr(config.server_addr)
        self._http = None
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> FederationService:
        app = create_app(server=self.server)
        self._http = make_server(self.host, self.port, app, threaded=True)
        # port 0 asks the OS for a free port
        self.port = self._http.server_port
        self._thread = threading.Thread(target=self._http.serve_forever, name="ftrl-http", daemon=True)
        self._thread.start()
        self.timer.start()
        logger.info(
            "federation service on %s, federating every %ss", self.address, self.config.federation_cycle
        )
        return self

    def stop(self) -> None:
        self.timer.stop()
        if self._http is not None:
            self._http.shutdown()
            self._http.server_close()
            self._http = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        logger.info("federation service stopped after round %d", self.server.round)

    def __enter__(self) -> FederationService:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def run_server(config: FederationConfig) -> None:
    """Serve until interrupted."""
    service = FederationService(config).start()
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        logger.info("interrupted")
    finally:
        service.stop()
