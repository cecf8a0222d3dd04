"""Deterministic random streams.

Every stream is a Philox generator keyed by ``(seed, *labels)`` through
``SeedSequence``, so draws depend only on the labels and never on how work is
scheduled across workers.
"""

import numpy as np


def stream(seed, *labels):
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(v) for v in labels))
    return np.random.Generator(np.random.Philox(ss))


def gaussian_increments(seed, labels, n_paths, n_steps, dt, antithetic=False):
    """Brownian increments of shape ``(n_paths, n_steps, 3)`` with variance ``dt``.

    With ``antithetic`` the second half of the paths is the negation of the
    first half (``n_paths`` must then be even).
    """
    if antithetic:
        if n_paths % 2:
            raise ValueError("antithetic sampling needs an even path count")
        half = stream(seed, *labels).standard_normal((n_paths // 2, n_steps, 3))
        z = np.concatenate([half, -half], axis=0)
    else:
        z = stream(seed, *labels).standard_normal((n_paths, n_steps, 3))
    return z * np.sqrt(dt)


def pair_means(samples, antithetic):
    """Collapse antithetic partners (path i and i + n/2) into independent samples."""
    if not antithetic:
        return samples
    h = samples.shape[0] // 2
    return 0.5 * (samples[:h] + samples[h:])


def mean_and_stderr(samples, antithetic=False):
    """Sample mean over axis 0 and its standard error."""
    s = pair_means(np.asarray(samples), antithetic)
    n = s.shape[0]
    mean = s.mean(axis=0)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, s.std(axis=0, ddof=1) / np.sqrt(n)
