"""Track files.

One record per line, `#` starts a comment:

    boundary: x1,y1 x2,y2 ...
    obstacle: x1,y1 x2,y2 ...
    spawn: x,y,heading
    scale: <label>
    lap: x1,y1 x2,y2

A lap counts when the car crosses the lap segment from its right-hand side to its
left-hand side. Names of the form `builtin:<name>` refer to the packaged tracks.
"""

from importlib import resources
from pathlib import Path

from .env_sim import Track
from .errors import TrackError

BUILTIN_PREFIX = "builtin:"


def builtin_names() -> list[str]:
    return sorted(
        entry.name.removesuffix(".track")
        for entry in resources.files("ftrl_steering.track_data").iterdir()
        if entry.name.endswith(".track")
    )


def _points(text: str, line_number: int) -> list[tuple[float, float]]:
    points = []
    for token in text.split():
        try:
            x, y = (float(v) for v in token.split(","))
        except ValueError:
            raise TrackError(f"line {line_number}: bad point {token!r}") from None
        points.append((x, y))
    return points


def parse_track(text: str, name: str = "track") -> Track:
    boundary = None
    obstacles, spawns = [], []
    scale_label = "standard"
    lap = None

    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise TrackError(f"line {line_number}: expected '<record>: <values>'")
        key, value = key.strip().lower(), value.strip()

        if key == "boundary":
            if boundary is not None:
                raise TrackError(f"line {line_number}: duplicate boundary")
            boundary = _points(value, line_number)
        elif key == "obstacle":
            obstacles.append(_points(value, line_number))
        elif key == "spawn":
            try:
                x, y, heading = (float(v) for v in value.split(","))
            except ValueError:
                raise TrackError(f"line {line_number}: spawn needs x,y,heading") from None
            spawns.append((x, y, heading))
        elif key == "scale":
            scale_label = value
        elif key == "lap":
            segment = _points(value, line_number)
            if len(segment) != 2:
                raise TrackError(f"line {line_number}: lap needs exactly two points")
            lap = (segment[0], segment[1])
        else:
            raise TrackError(f"line {line_number}: unknown record {key!r}")

    if boundary is None:
        raise TrackError(f"{name}: no boundary record")
    return Track(
        boundary=boundary,
        obstacles=tuple(obstacles),
        spawns=tuple(spawns),
        scale_label=scale_label,
        lap_line=lap,
        name=name,
    )


def load_track(path_or_name: str | Path) -> Track:
    source = str(path_or_name)
    if source.startswith(BUILTIN_PREFIX):
        name = source.removeprefix(BUILTIN_PREFIX)
        entry = resources.files("ftrl_steering.track_data") / f"{name}.track"
        if not entry.is_file():
            raise TrackError(
                f"unknown builtin track {name!r}; choose from {builtin_names()}"
            )
        return parse_track(entry.read_text(encoding="utf-8"), name=name)

    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise TrackError(f"cannot read track file '{path}': {e}") from e
    return parse_track(text, name=path.stem)
