"""Online transfer between an environment's native scale and the standard environment.

Observations are multiplied by the scale ratio beta (native units to standard meters);
standardized actions in (-1, 1) are multiplied by the environment's steering range.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

STANDARD_LABEL = "standard"


@dataclass(frozen=True)
class TransferProfile:
    scale_label: str
    beta: float
    max_action: float
    is_standard: bool = False

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ConfigError("beta", "must be positive")
        if self.max_action <= 0.0:
            raise ConfigError("max_action", "must be positive")
        if self.is_standard and self.beta != 1.0:
            raise ConfigError("beta", "the standard environment must have beta = 1")

    @property
    def needs_observation_transfer(self) -> bool:
        return self.beta != 1.0

    def inverse(self) -> "TransferProfile":
        return TransferProfile(f"{self.scale_label}^-1", 1.0 / self.beta, 1.0 / self.max_action)


def transfer_observation(native_obs: np.ndarray, profile: TransferProfile) -> np.ndarray:
    obs = np.asarray(native_obs, dtype=np.float64)
    if not (obs > 0.0).all():
        raise ConfigError("observation", "LIDAR distances must be positive")
    if not profile.needs_observation_transfer:
        return obs
    return profile.beta * obs


def transfer_action(standard_action: float, profile: TransferProfile) -> float:
    if not abs(standard_action) < 1.0:
        raise ConfigError(
            "action", f"standardized action must lie in (-1, 1), got {standard_action}"
        )
    return float(standard_action) * profile.max_action


def validate_federation_profiles(profiles: list[TransferProfile]) -> None:
    """Exactly one standard profile, and it has beta = 1."""
    standard = [p for p in profiles if p.is_standard]
    if len(standard) != 1:
        raise ConfigError(
            "agents", f"exactly one standard environment is required, found {len(standard)}"
        )
