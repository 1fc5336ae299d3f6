"""Counter-based random streams.

Every stream is a Philox generator keyed by a tuple of non-negative integers,
e.g. ``(seed, step_index)``. Draws within a stream are sequential, so the
draw index is the Philox counter. Results never depend on the order in which
streams are created or consumed.
"""

from __future__ import annotations

import zlib

import numpy as np

# Purposes other than the background flow get their own key space through the
# SeedSequence spawn key, so e.g. a warm-up stream keyed (seed, 1) can never
# alias the flow stream of step 1. Plain keys are also padded with zeros by
# SeedSequence, which is why purposes are not just appended to the key.


def stream(*key: int, purpose: str | None = None) -> np.random.Generator:
    """Generator for the given key tuple, optionally in a named purpose space."""
    spawn = (zlib.crc32(purpose.encode()),) if purpose else ()
    seq = np.random.SeedSequence([int(k) for k in key], spawn_key=spawn)
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(*key: int) -> int:
    """A 63-bit integer seed derived deterministically from ``key``."""
    state = np.random.SeedSequence([int(k) for k in key]).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))
