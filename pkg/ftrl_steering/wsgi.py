from . import create_app
from .api.federation.v1.blueprint import SERVER_EXTENSION
from .service import AggregationTimer

app = create_app()
# gunicorn serves the HTTP side; federation rounds come from this timer
timer = AggregationTimer(app.extensions[SERVER_EXTENSION]).start()
