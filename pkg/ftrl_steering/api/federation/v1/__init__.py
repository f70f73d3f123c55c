from .blueprint import register_api as register_api
