from .v1 import register_api as register_api
