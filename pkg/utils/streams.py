from __future__ import annotations

import numpy as np

# Stream purposes, used as the first spawn-key component so that different
# consumers of one user seed never share a stream.
SIMULATION = 1
INITIAL_STATES = 2
RESTARTS = 3
SAMPLING = 4
MONOTONICITY = 5
INITIAL_FLOW = 6
LAYOUT = 7


def stream(seed: int, purpose: int, *counter: int) -> np.random.Generator:
    """
    Counter-based generator for (seed, purpose, counter...).

    Philox is a counter-based bit generator; keying it through SeedSequence
    with an explicit spawn key gives a stream that depends only on those
    integers, not on how many other streams were drawn before it.
    """
    seq = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(purpose, *counter))
    return np.random.Generator(np.random.Philox(seq))
