from os import environ

wsgi_app = "ftrl_steering.wsgi:app"
bind = environ.get("FTRL_SERVER_ADDR", "0.0.0.0:8765")
# the federation state lives in process memory, so more workers would split it
workers = 1
threads = int(environ.get("GUNICORN_THREADS", 4))
