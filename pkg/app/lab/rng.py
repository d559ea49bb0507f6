"""Seed splitting and hashing helpers.

All randomness in a run flows from one 64-bit seed. A child stream is
identified by a purpose string and an integer index; the stream only
depends on (seed, purpose, index), never on execution order, so ensemble
members can be computed by any worker in any order.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np

SEED_MAX = 2**64 - 1


def purpose_key(purpose: str) -> int:
    """Stable 64-bit key for a purpose string."""
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    if not 0 <= int(seed) <= SEED_MAX:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(purpose_key(purpose), int(index)))
    return np.random.Generator(np.random.PCG64(sequence))


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)


def digest_of(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, "model_dump"):
        return value.model_dump(mode="json")
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
