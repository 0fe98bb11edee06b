# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Utility functions for the FADE simulator.
Helpers for logging, seeded random streams and parameter digests.
"""

import hashlib
import logging
import sys
import zlib
from typing import Iterable, Mapping, Optional

import numpy as np
import pandas as pd


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    """
    Set up logging configuration for the simulator.

    Timestamps only ever reach the log handlers, never the metrics files.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Path to log file, or None for console only
    """
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )
    return logging.getLogger("fade_sim")


def stream_seed(master_seed: int, name: str, *indices: int) -> np.random.SeedSequence:
    """
    Derive an independent seed for a named random stream.

    The stream name is hashed with CRC-32 so the mapping is stable across
    processes and Python versions.

    Args:
        master_seed: Experiment master seed
        name: Stream name, e.g. "shard", "init", "plan", "attack", "batch"
        indices: Extra integers that index the stream (round, client, ...)

    Returns:
        SeedSequence for numpy generators
    """
    key = [int(master_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(i) & 0xFFFFFFFF for i in indices)
    return np.random.SeedSequence(key)


def stream(master_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a numpy Generator for the named stream."""
    return np.random.default_rng(stream_seed(master_seed, name, *indices))


def stream_int(master_seed: int, name: str, *indices: int) -> int:
    """Return a 31-bit integer seed for libraries that take `random_state`."""
    return int(stream_seed(master_seed, name, *indices).generate_state(1)[0] & 0x7FFFFFFF)


def params_digest(params: Mapping[str, np.ndarray], names: Iterable[str]) -> str:
    """
    Digest of the named parameter arrays (name, shape and raw bytes).

    Used to tag derived data with the parameters that produced it.
    """
    h = hashlib.blake2b(digest_size=16)
    for name in names:
        array = np.ascontiguousarray(params[name])
        h.update(name.encode("utf-8"))
        h.update(str(array.shape).encode("ascii"))
        h.update(array.tobytes())
    return h.hexdigest()


def smooth(values: Iterable[float], window: int) -> np.ndarray:
    """
    Trailing moving average that ignores NaN entries.

    Args:
        values: Series to smooth (NaN marks missing points)
        window: Window length (>= 1)

    Returns:
        Array of the same length; NaN where the window holds no data
    """
    series = pd.Series(list(values), dtype="float64")
    return series.rolling(window, min_periods=1).mean().to_numpy()
