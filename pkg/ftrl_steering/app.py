from collections import namedtuple
from tomllib import load as tomlload

from flask import Flask, Response
from werkzeug import exceptions

from .api import register_apis
from .api.federation.v1.blueprint import SERVER_EXTENSION
from .errors import ProtocolError
from .federation import ClockMode, FederationConfig, FederationServer
from .protocol import ModelEnvelope, encode_envelope


def error_response(message: str, status: int) -> Response:
    return Response(
        encode_envelope(ModelEnvelope.error(message)),
        status=status,
        mimetype="application/octet-stream",
    )


def create_app(config_filename="config.toml", config_override={}, server=None):
    """Build the federation service.

    Config is read from:
    * a TOML file next to this module, `config.toml` or the name given in `config_filename`
    * the mapping passed as `config_override`
    * a Python config file named by the environment variable `FTRL_APP_CONFIG_FILE`

    `server` lets a caller share one `FederationServer` between the HTTP surface and an
    aggregation timer; otherwise one is built from the `FEDERATION_*` config keys.
    """
    app = Flask(__name__)

    app.config.from_file(config_filename, load=tomlload, text=False, silent=True)
    app.config.from_object(namedtuple("Config", config_override)(**config_override))
    app.config.from_envvar("FTRL_APP_CONFIG_FILE", silent=True)

    # Wire clients always get a decodable frame back, even for routing failures.
    @app.errorhandler(ProtocolError)
    def protocol_error(e):
        app.logger.warning("protocol error: %s", e)
        return error_response(str(e), 400)

    @app.errorhandler(exceptions.NotFound)
    def not_found(e):
        return error_response("not found", 404)

    @app.errorhandler(exceptions.MethodNotAllowed)
    def method_not_allowed(e):
        return error_response("method not allowed", 405)

    @app.errorhandler(exceptions.InternalServerError)
    def server_error(e):
        return error_response("internal server error", 500)

    if server is None:
        server = FederationServer(
            FederationConfig(
                federation_cycle=app.config.get("FEDERATION_CYCLE", 480),
                sync_cycle=app.config.get("FEDERATION_SYNC_CYCLE", 720),
                clock_mode=ClockMode(app.config.get("FEDERATION_CLOCK_MODE", "wall")),
                server_addr=app.config.get("FEDERATION_SERVER_ADDR", "127.0.0.1:8765"),
            )
        )
    app.extensions[SERVER_EXTENSION] = server

    register_apis(app)

    return app
