from pathlib import PurePath
from textwrap import dedent

from flask import Flask, Response, current_app, request
from flask.views import MethodView
from flask_smorest import Api, Blueprint
from marshmallow import Schema, fields

from ftrl_steering.federation import FederationServer
from ftrl_steering.protocol import MessageKind, decode_envelope

SERVER_EXTENSION = "ftrl_federation"

api_title = "Federation API"
# By default, we set the api prefix and version number from the path.
api_prefix = PurePath(__file__).parent.parent.name.replace("_", "-").lower()
api_version = PurePath(__file__).parent.name.replace("_", "-").lower()

blp = Blueprint(
    api_prefix,
    api_prefix,
    url_prefix=f"/{api_prefix}/{api_version}",
    description=dedent("""

        # Federation API

        Model exchange between driving agents and the federated averaging server.

        `push` and `pull` take and return binary frames (`application/octet-stream`):
        a 22-byte header (`FTRL`, version, kind, agent id, round, payload length)
        followed by the serialized actor, critic and target networks.

        * `POST push` stores the agent's latest networks and answers with an `ack`
          frame carrying the current round.
        * `POST pull` answers with a `snapshot` frame. Round 0 with an empty payload
          means no federation has happened yet.

        `status` is plain JSON and meant for people.
    """),
)


def federation_server() -> FederationServer:
    return current_app.extensions[SERVER_EXTENSION]


def frame_response(frame: bytes) -> Response:
    status = 400 if decode_envelope(frame).kind is MessageKind.ERROR else 200
    return Response(frame, status=status, mimetype="application/octet-stream")


@blp.route("/push")
class Push(MethodView):
    def post(self):
        """Upload an agent's four networks.

        # POST Push

        ## Body
        A `push_model` frame.

        ## Returns
        An `ack` frame, or an `error` frame with status 400.
        """
        reply = federation_server().handle_frame(request.get_data())
        current_app.logger.debug("push from %s", request.remote_addr)
        return frame_response(reply)


@blp.route("/pull")
class Pull(MethodView):
    def post(self):
        """Download the latest federation snapshot.

        # POST Pull

        ## Body
        A `pull_request` frame.

        ## Returns
        A `snapshot` frame, or an `error` frame with status 400.
        """
        return frame_response(federation_server().handle_frame(request.get_data()))


class StatusSchema(Schema):
    round = fields.Integer()
    agents = fields.List(fields.Integer())
    participants = fields.List(fields.Integer())
    created_at = fields.Float(allow_none=True)
    federation_cycle = fields.Float()
    clock_mode = fields.String()


@blp.route("/status")
class Status(MethodView):
    @blp.response(
        200,
        StatusSchema,
        example={
            "round": 3,
            "agents": [0, 1, 2],
            "participants": [0, 1, 2],
            "created_at": 1440.0,
            "federation_cycle": 480.0,
            "clock_mode": "virtual",
        },
    )
    def get(self):
        """Current round and the agents that have uploaded.

        * `agents` every agent id with a stored upload
        * `participants` the agents averaged into the current round
        """
        return federation_server().status()


def register_api(app: Flask):
    config_prefix = f"{api_prefix}_{api_version.replace('.', '-')}_"
    api_config = {
        "api_version": api_version,
        "openapi_version": "3.1.1",
        "api_title": api_title,
        "openapi_url_prefix": f"/{api_prefix}/{api_version}/docs/",
        "openapi_swagger_ui_path": "",
        "openapi_json_path": "openapi.json",
        "openapi_swagger_ui_version": "5.18.2",
        "openapi_swagger_ui_url": "https://cdn.jsdelivr.net/npm/swagger-ui-dist@5.18.2/",
    }
    prefixed_config = {
        f"{config_prefix}{key}".upper(): val for key, val in api_config.items()
    }

    app.config.update(prefixed_config)
    api = Api(
        app,
        config_prefix=config_prefix,
    )
    api.register_blueprint(blp)
