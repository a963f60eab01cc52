"""Small shared helpers: RNG streams, thread cap, deterministic JSON."""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

# Distinct sub-stream tags so that consuming one stream (e.g. truncation
# draws) never perturbs another (e.g. dropout masks).
STREAM_INIT = 1
STREAM_BATCH = 2
STREAM_DROPOUT = 3
STREAM_TRUNCATE = 4
STREAM_POLICY_T = 5
STREAM_GRADCHECK = 6


def rng_stream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    """A deterministic generator derived from (seed, tag, *extra)."""
    return np.random.default_rng([int(seed), int(tag), *[int(e) for e in extra]])


def thread_count() -> int:
    """Parallelism cap from REINA_LAB_THREADS (default 1 for determinism)."""
    raw = os.environ.get("REINA_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def dump_json(obj: Any, path: str) -> None:
    """Write JSON with a fixed layout so identical objects give identical bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
