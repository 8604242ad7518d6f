"""Small synthetic sequence tasks for the stop-level model.

Every stop vector is [position context, load/35, one-hot load bin]; the
decoder sees the target stop's context with the load columns zeroed.
"""

import numpy as np

from tlf.domain import STOP_BIN_MIDPOINTS

N_PAST = 5
WIDTH = 7
PATTERN = np.array([0, 1, 2, 3, 4, 4, 3, 2, 1, 0])


def _vectors(bins, positions):
    out = np.zeros(bins.shape + (WIDTH,))
    out[..., 0] = positions
    out[..., 1] = STOP_BIN_MIDPOINTS[bins] / 35.0
    np.put_along_axis(out[..., 2:], bins[..., None], 1.0, axis=-1)
    return out


def copy_task(n, seed):
    """Target is the bin of the most recent observed stop."""
    rng = np.random.default_rng(seed)
    bins = rng.integers(0, 5, (n, N_PAST))
    enc = _vectors(bins, np.zeros_like(bins, dtype=float))
    dec = np.zeros((n, WIDTH))
    return enc, dec, bins[:, -1]


def shifted_task(n, seed):
    """A rise-and-fall bin profile along the route, started at a random offset.

    Returns (enc, dec, y, last observed bin).
    """
    rng = np.random.default_rng(seed)
    offset = rng.integers(0, len(PATTERN), n)
    pos = (offset[:, None] + np.arange(N_PAST + 1)[None, :]) % len(PATTERN)
    bins = PATTERN[pos]
    ctx = pos / len(PATTERN)
    enc = _vectors(bins[:, :N_PAST], ctx[:, :N_PAST])
    dec = np.zeros((n, WIDTH))
    dec[:, 0] = ctx[:, N_PAST]
    return enc, dec, bins[:, N_PAST], bins[:, N_PAST - 1]
