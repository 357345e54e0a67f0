"""Counter-based Gaussian noise.

Every latent/emission noise value is a pure function of
(seed, stream, layer, batch index, time index, component index), so
sampling does not depend on batch layout, chunking, or evaluation order.
The generator is a splitmix64 hash fed into a Box-Muller transform.
"""

import numpy as np

# Stream tags keep the posterior, prior, and emission draws independent.
POSTERIOR_STREAM = 0
PRIOR_STREAM = 1
EMISSION_STREAM = 2

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_BASE = np.uint64(0x243F6A8885A308D3)
_DECOR = np.uint64(0xD6E8FEB86659FD93)
_INV53 = 1.0 / float(1 << 53)


def _splitmix(x):
    # uint64 wraparound is the point; silence numpy's overflow warnings.
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


def _fold(state, value):
    with np.errstate(over="ignore"):
        mixed = state ^ (np.asarray(value, dtype=np.uint64) * _GOLDEN)
    return _splitmix(mixed)


def fold_seed(seed, tag):
    """Derive a sub-seed from (seed, tag); stable across runs and platforms."""
    return int(_fold(_fold(_BASE, np.uint64(seed & 0xFFFFFFFFFFFFFFFF)), np.uint64(tag)))


def gaussian_field(seed, stream, layer, n_batch, n_time, n_dim,
                   batch_offset=0, time_offset=0):
    """Standard-normal noise of shape [n_batch, n_time, n_dim].

    Entry (b, t, j) depends only on
    (seed, stream, layer, b + batch_offset, t + time_offset, j).
    """
    state = _fold(_fold(_fold(_BASE, np.uint64(seed & 0xFFFFFFFFFFFFFFFF)),
                        np.uint64(stream)), np.uint64(layer))
    b_idx = (np.arange(n_batch, dtype=np.uint64) + np.uint64(batch_offset)).reshape(-1, 1, 1)
    t_idx = (np.arange(n_time, dtype=np.uint64) + np.uint64(time_offset)).reshape(1, -1, 1)
    j_idx = np.arange(n_dim, dtype=np.uint64).reshape(1, 1, -1)
    h = _fold(_fold(_fold(state, b_idx), t_idx), j_idx)
    h2 = _splitmix(h ^ _DECOR)
    # (0,1) open uniforms from the high 53 bits of each hash.
    u1 = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) * _INV53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
