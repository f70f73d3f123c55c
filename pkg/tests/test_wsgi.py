from flask import Flask

from ftrl_steering.wsgi import app, timer


def test_wsgi():
    assert isinstance(app, Flask)
    assert app.name == "ftrl_steering.app"
    timer.stop()
