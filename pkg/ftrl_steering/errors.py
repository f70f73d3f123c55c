class FtrlError(Exception):
    """Base class for every error raised by ftrl_steering."""


class ShapeError(FtrlError, ValueError):
    pass


class NumericError(FtrlError, ArithmeticError):
    pass


class ConfigError(FtrlError, ValueError):
    """A configuration value failed validation.

    `field_path` is the dotted location of the offending value, e.g. `agents.1.beta`.
    """

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        self.message = message
        super().__init__(f"{field_path}: {message}" if field_path else message)


class TrackError(FtrlError, ValueError):
    pass


class InvalidPoseError(FtrlError, ValueError):
    pass


class ProtocolError(FtrlError, ValueError):
    """A wire frame could not be decoded. `offset` is the byte where decoding stopped."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


class AggregationError(FtrlError, ValueError):
    def __init__(self, message: str, agent_id: int | None = None):
        self.agent_id = agent_id
        super().__init__(message)


class InsufficientDataError(FtrlError, ValueError):
    pass


class DegenerateRunError(FtrlError, ValueError):
    pass


class FederationUnavailableError(FtrlError, ConnectionError):
    pass


class PretrainDivergedError(FtrlError, RuntimeError):
    def __init__(self, message: str, seed: int, step: int):
        self.seed = seed
        self.step = step
        super().__init__(f"{message} (seed={seed}, step={step})")


class AgentAbortedError(FtrlError, RuntimeError):
    def __init__(self, agent_id: int, step: int, cause: BaseException):
        self.agent_id = agent_id
        self.step = step
        super().__init__(f"agent {agent_id} aborted at step {step}: {cause}")
