import numpy as np


def derive_seeds(seed: int | None, count: int) -> list[int]:
    """Independent child seeds, so one agent seed can drive several random streams."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]
