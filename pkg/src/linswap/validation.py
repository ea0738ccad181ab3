"""Input validation helpers shared by the trainers and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import BadConfig, NotConverted, UnknownId
from .model import Model


def check_token_array(ids, vocab_size: int = 258, name: str = "tokens") -> np.ndarray:
    """Coerce to a 1-D uint32 id array and bound-check against the vocabulary."""
    arr = np.asarray(ids)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise BadConfig(f"{name} is empty")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise UnknownId(f"{name} must be integer token ids")
        arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise UnknownId(f"{name} ids outside [0, {vocab_size})")
    return arr.astype(np.uint32)


def check_converted(model: Model) -> Model:
    if not model.converted:
        raise NotConverted("this operation needs a converted (hybrid) model")
    return model


def check_positive(name: str, value, strict: bool = True):
    if value is None or (value <= 0 if strict else value < 0):
        raise BadConfig(f"{name} must be {'positive' if strict else 'non-negative'}, got {value}")
    return value


def check_choice(name: str, value, choices) -> str:
    if value not in choices:
        raise BadConfig(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value
