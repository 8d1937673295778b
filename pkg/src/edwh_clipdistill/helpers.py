import contextlib
import os
import typing

import numpy as np
import torch

from .constants import DETERMINISTIC_ENV

if typing.TYPE_CHECKING:
    from .config import Settings


def is_deterministic(settings: typing.Optional["Settings"] = None) -> bool:
    """
    Deterministic mode is on when the settings say so, or when $CLIPDISTILL_DETERMINISTIC is truthy.
    """
    if settings is not None and settings.clipdistill_deterministic:
        return True
    return os.environ.get(DETERMINISTIC_ENV, "").strip().lower() in {"1", "true", "yes", "on"}


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True, num_threads: int = 0) -> typing.Generator[bool, None, None]:
    """
    Context manager for bitwise-reproducible CPU execution: deterministic kernels and a single thread.

    Restores the previous torch settings afterwards.
    With `enabled=False` only `num_threads` (if > 0) is applied.
    """
    previous_threads = torch.get_num_threads()
    previous_algorithms = torch.are_deterministic_algorithms_enabled()

    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    elif num_threads > 0:
        torch.set_num_threads(num_threads)

    try:
        yield enabled
    finally:
        torch.set_num_threads(previous_threads)
        torch.use_deterministic_algorithms(previous_algorithms)


def numpy_rng(*seed_parts: int) -> np.random.Generator:
    """
    Independent numpy generator for a tuple of (seed, index, ...) values.
    """
    return np.random.default_rng([int(part) for part in seed_parts])


def torch_generator(*seed_parts: int) -> torch.Generator:
    """
    CPU torch generator seeded from (seed, step, ...) values.
    """
    seed = int(numpy_rng(*seed_parts).integers(0, 2**62))
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator
