import math
import sys
from pathlib import Path

import numpy as np
import pytest
from flask import Flask

sys.path.append(str(Path(__file__).absolute().parent.parent))
from ftrl_steering import create_app
from ftrl_steering.env_sim import Track
from ftrl_steering.federation import ClockMode, FederationConfig, FederationServer
from ftrl_steering.nn_core import DdpgHyperparams

RING_OUTER = 7.0
RING_INNER = 3.0
RING_SIDES = 64


def regular_polygon(radius: float, sides: int = RING_SIDES) -> list[tuple[float, float]]:
    return [
        (radius * math.cos(2 * math.pi * k / sides), radius * math.sin(2 * math.pi * k / sides))
        for k in range(sides)
    ]


@pytest.fixture()
def server():
    return FederationServer(FederationConfig(federation_cycle=480, clock_mode=ClockMode.VIRTUAL))


@pytest.fixture()
def app(server):
    app = create_app(server=server)
    app.config.update(
        {
            "TESTING": True,
        }
    )

    yield app


@pytest.fixture()
def client(app: Flask):
    return app.test_client()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def box_track():
    """An empty 20 x 10 room."""
    return Track(
        boundary=[(0, 0), (20, 0), (20, 10), (0, 10)],
        spawns=((10.0, 5.0, 0.0),),
        name="box",
    )


@pytest.fixture()
def ring_track():
    """A 64-gon annulus driven counter-clockwise, lap line on the positive x axis."""
    step = 1.0 * 0.25 / 5.0
    return Track(
        boundary=regular_polygon(RING_OUTER),
        obstacles=(regular_polygon(RING_INNER),),
        spawns=((5.0, 0.0, math.pi / 2 - step / 2),),
        lap_line=((RING_INNER, 0.0), (RING_OUTER, 0.0)),
        name="ring",
    )


@pytest.fixture()
def small_hyperparams():
    return DdpgHyperparams(hidden_sizes=(16, 16), batch_size=8, buffer_capacity=64)
