from flask import Flask

from .federation import register_api


def register_apis(app: Flask):
    register_api(app)
