"""Stability metrics computed from distance-to-target traces."""
from __future__ import annotations

import numpy as np

DEFAULT_EPISODE_LENGTH = 200
DEFAULT_WINDOW = 100


def converged_region(distances, episode_length=DEFAULT_EPISODE_LENGTH, window=DEFAULT_WINDOW, with_flag=False):
    """Range (max - min) of the distance over the last ``window`` steps.

    Shorter traces use whatever tail is available; ``with_flag=True``
    returns ``(value, complete)`` where ``complete`` is False in that case.
    """
    d = np.asarray(distances, dtype=float)
    if d.ndim != 1 or len(d) == 0:
        raise ValueError("distances must be a non-empty 1-D sequence")
    if window < 1 or window > episode_length:
        raise ValueError(f"window {window} must lie in [1, {episode_length}]")
    complete = len(d) >= episode_length
    tail = d[-window:]
    value = float(tail.max() - tail.min())
    return (value, complete) if with_flag else value


def batch_converged_region(distances, lengths=None, window=DEFAULT_WINDOW):
    """Converged region per column of a ``(T, B)`` distance array.

    Episodes cut short (``lengths < T``) use their own tail up to their end.
    """
    d = np.asarray(distances, dtype=float)
    T, B = d.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    out = np.empty(B)
    for i in range(B):
        out[i] = converged_region(d[:lengths[i], i], T, min(window, T))
    return out


def quantiles(values):
    v = np.asarray(values, dtype=float)
    p25, med, p75 = np.percentile(v, [25, 50, 75])
    return {"p25": float(p25), "median": float(med), "p75": float(p75)}
