"""Dataset framing, synthetic generators, normalization, and the .swn format.

Sequences live in memory as float64 ``SequenceBatch`` objects; on disk the
.swn container stores float32, so generators quantize their output to
float32 precision to keep write/read round trips exact.
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyError, FormatError

_MAGIC = b"SWN1"

# Ground-truth parameters of the bimodal random-walk task. The next-step
# law given history is a two-component Gaussian mixture, so the exact
# likelihood and the best unimodal fit are both available in closed form.
BIMODAL_STEP = 0.5
BIMODAL_PERSIST = 0.9
BIMODAL_NOISE_STD = 0.1

# Stroke-toy generator parameters.
STROKE_MEAN_LEN = 12.0
STROKE_SPEED_RANGE = (0.5, 1.5)
STROKE_CURVATURE_STD = 0.15
STROKE_HEADING_JITTER = 0.05
STROKE_LIFT_JUMP_STD = 2.0


def _quantize_f32(arr):
    return arr.astype(np.float32).astype(np.float64)


@dataclass
class SequenceBatch:
    """B sequences of at most T_max frames of frame_dim reals, plus lengths.

    Frames beyond each sequence's length are zero padding.
    """

    frames: np.ndarray  # [B, T_max, frame_dim] float64
    lengths: list

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ConfigError(f"frames must be [B,T,d], got shape {self.frames.shape}")
        self.lengths = [int(n) for n in self.lengths]
        if len(self.lengths) != self.frames.shape[0]:
            raise ConfigError("lengths do not match the batch extent")
        t_max = self.frames.shape[1]
        for i, n in enumerate(self.lengths):
            if n < 0 or n > t_max:
                raise ConfigError(f"sequence {i} has invalid length {n} for T_max={t_max}")
            if n < t_max and np.any(self.frames[i, n:] != 0.0):
                raise ConfigError(f"sequence {i} has nonzero padding beyond its length")
        if not np.isfinite(self.frames).all():
            raise ConfigError("frames contain non-finite values")

    @property
    def batch_size(self):
        return self.frames.shape[0]

    @property
    def max_len(self):
        return self.frames.shape[1]

    @property
    def frame_dim(self):
        return self.frames.shape[2]

    def mask(self):
        """[B, T_max] float64 validity mask."""
        t_idx = np.arange(self.max_len)
        return (t_idx[None, :] < np.asarray(self.lengths)[:, None]).astype(np.float64)

    def select(self, indices):
        indices = list(indices)
        return SequenceBatch(self.frames[indices].copy(), [self.lengths[i] for i in indices])

    def segments(self, segment_len):
        """Split every sequence into consecutive segments; drop remainders."""
        if segment_len < 1:
            raise ConfigError(f"segment length must be >= 1, got {segment_len}")
        if segment_len > self.max_len:
            raise ConfigError(f"segment length {segment_len} exceeds T_max={self.max_len}")
        pieces = []
        for i, n in enumerate(self.lengths):
            for start in range(0, n - segment_len + 1, segment_len):
                pieces.append(self.frames[i, start:start + segment_len])
        if not pieces:
            return SequenceBatch(np.zeros((0, segment_len, self.frame_dim)), [])
        stacked = np.stack(pieces)
        return SequenceBatch(stacked, [segment_len] * len(pieces))


def frame_signal(samples, frame_size):
    """Chop a 1-D signal into consecutive non-overlapping frames.

    The trailing remainder shorter than one frame is dropped; a signal
    with no complete frame raises EmptyError.
    """
    if frame_size < 1:
        raise ConfigError(f"frame size must be >= 1, got {frame_size}")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    n_frames = samples.size // frame_size
    if n_frames == 0:
        raise EmptyError(f"{samples.size} samples yield no complete frame of size {frame_size}")
    return samples[: n_frames * frame_size].reshape(n_frames, frame_size).copy()


# ---------------------------------------------------------------------------
# synthetic tasks


def gen_bimodal_walk(n, t_len, seed):
    """Random walk whose increments follow a persistent two-mode mixture.

    x_t = x_{t-1} + s_t * 0.5 + noise, with the sign s_t keeping its
    previous value with probability 0.9 and Gaussian noise of std 0.1.
    """
    if n < 0 or t_len < 1:
        raise ConfigError(f"need n >= 0 and T >= 1, got n={n}, T={t_len}")
    rng = np.random.default_rng(seed)
    first = rng.integers(0, 2, size=n) * 2 - 1
    flips = np.where(rng.random((n, t_len)) < 1.0 - BIMODAL_PERSIST, -1.0, 1.0)
    flips[:, 0] = 1.0
    signs = first[:, None] * np.cumprod(flips, axis=1)
    noise = rng.normal(0.0, BIMODAL_NOISE_STD, size=(n, t_len))
    walk = np.cumsum(BIMODAL_STEP * signs + noise, axis=1)
    frames = _quantize_f32(walk[:, :, None])
    return SequenceBatch(frames, [t_len] * n)


def bimodal_exact_loglik(batch):
    """Per-sequence log-likelihood under the true bimodal generator.

    Forward recursion over the hidden sign chain; returns [B] floats.
    """
    x = batch.frames[:, :, 0]
    n, t_len = x.shape
    var = BIMODAL_NOISE_STD ** 2
    log_stay = math.log(BIMODAL_PERSIST)
    log_flip = math.log(1.0 - BIMODAL_PERSIST)
    norm = -0.5 * math.log(2.0 * math.pi * var)

    def emit(delta, sign):
        return norm - (delta - sign * BIMODAL_STEP) ** 2 / (2.0 * var)

    prev = np.zeros(n)
    log_a_pos = np.full(n, math.log(0.5))
    log_a_neg = np.full(n, math.log(0.5))
    total = np.zeros(n)
    for t in range(t_len):
        delta = x[:, t] - prev
        if t == 0:
            log_a_pos = log_a_pos + emit(delta, 1.0)
            log_a_neg = log_a_neg + emit(delta, -1.0)
        else:
            new_pos = np.logaddexp(log_a_pos + log_stay, log_a_neg + log_flip) + emit(delta, 1.0)
            new_neg = np.logaddexp(log_a_neg + log_stay, log_a_pos + log_flip) + emit(delta, -1.0)
            log_a_pos, log_a_neg = new_pos, new_neg
        # Renormalize to keep the recursion stable on long sequences.
        shift = np.logaddexp(log_a_pos, log_a_neg)
        total += shift
        log_a_pos -= shift
        log_a_neg -= shift
        prev = x[:, t]
    # Mask beyond lengths: recompute per sequence if lengths vary.
    if any(m != t_len for m in batch.lengths):
        out = np.empty(n)
        for i, m in enumerate(batch.lengths):
            sub = SequenceBatch(batch.frames[i:i + 1, :m].copy(), [m])
            out[i] = bimodal_exact_loglik(sub)[0]
        return out
    return total


def _best_unimodal_moments():
    # Moment-matched Gaussian for the +/-0.5 increment mixture given the
    # previous sign: mean offset 0.4, variance 0.1 (noise + mode spread).
    p, step, var = BIMODAL_PERSIST, BIMODAL_STEP, BIMODAL_NOISE_STD ** 2
    mean_off = (2.0 * p - 1.0) * step
    spread = p * (step - mean_off) ** 2 + (1.0 - p) * (step + mean_off) ** 2
    return mean_off, var + spread


def bimodal_best_unimodal_ll(t_len):
    """Expected per-sequence log-likelihood of the best history-conditioned
    unimodal Gaussian predictor (the ceiling for a Gaussian-output model
    with no latent variables)."""
    step, var = BIMODAL_STEP, BIMODAL_NOISE_STD ** 2
    first_var = var + step ** 2  # symmetric two-mode first increment
    first = -0.5 * math.log(2.0 * math.pi * first_var) - 0.5
    _, later_var = _best_unimodal_moments()
    later = -0.5 * math.log(2.0 * math.pi * later_var) - 0.5
    return first + (t_len - 1) * later


def bimodal_best_unimodal_ll_on(batch):
    """Evaluate the best unimodal-Gaussian predictor on observed sequences.

    Uses the true mixture parameters; the previous mode is recovered from
    the sign of the previous increment. Returns [B] floats.
    """
    x = batch.frames[:, :, 0]
    step, var = BIMODAL_STEP, BIMODAL_NOISE_STD ** 2
    first_var = var + step ** 2
    mean_off, later_var = _best_unimodal_moments()
    deltas = np.diff(x, axis=1, prepend=0.0)
    prev_sign = np.sign(deltas[:, :-1])
    prev_sign[prev_sign == 0.0] = 1.0
    ll_first = -0.5 * math.log(2.0 * math.pi * first_var) - x[:, 0] ** 2 / (2.0 * first_var)
    resid = deltas[:, 1:] - mean_off * prev_sign
    ll_later = -0.5 * math.log(2.0 * math.pi * later_var) - resid ** 2 / (2.0 * later_var)
    mask = batch.mask()
    return ll_first * mask[:, 0] + (ll_later * mask[:, 1:]).sum(axis=1)


def gen_stroke_toy(n, t_len, seed):
    """Synthetic pen trajectories: (dx, dy, pen) frames.

    Within a stroke the heading follows a fixed curvature plus jitter and
    the pen channel is 0.0; strokes end with geometric length (mean
    STROKE_MEAN_LEN), emitting a single pen=1.0 lift frame whose offsets
    jump to the next stroke start.
    """
    if n < 0 or t_len < 1:
        raise ConfigError(f"need n >= 0 and T >= 1, got n={n}, T={t_len}")
    rng = np.random.default_rng(seed)
    p_end = 1.0 / STROKE_MEAN_LEN
    lo, hi = STROKE_SPEED_RANGE
    frames = np.zeros((n, t_len, 3))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    speed = rng.uniform(lo, hi, size=n)
    curv = rng.normal(0.0, STROKE_CURVATURE_STD, size=n)
    lifting = np.zeros(n, dtype=bool)
    for t in range(t_len):
        jump = rng.normal(0.0, STROKE_LIFT_JUMP_STD, size=(n, 2))
        new_theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
        new_speed = rng.uniform(lo, hi, size=n)
        new_curv = rng.normal(0.0, STROKE_CURVATURE_STD, size=n)
        jitter = rng.normal(0.0, STROKE_HEADING_JITTER, size=n)
        end_draw = rng.random(n)

        up = lifting
        frames[up, t, 0] = jump[up, 0]
        frames[up, t, 1] = jump[up, 1]
        frames[up, t, 2] = 1.0
        theta = np.where(up, new_theta, theta + curv + jitter)
        speed = np.where(up, new_speed, speed)
        curv = np.where(up, new_curv, curv)

        down = ~up
        frames[down, t, 0] = speed[down] * np.cos(theta[down])
        frames[down, t, 1] = speed[down] * np.sin(theta[down])
        lifting = down & (end_draw < p_end)
    frames[:, :, :2] = _quantize_f32(frames[:, :, :2])
    return SequenceBatch(frames, [t_len] * n)


# ---------------------------------------------------------------------------
# .swn container


def write_swn(path, batch):
    """Binary container: magic, u32 count, then per sequence u32 T, u32 d,
    T*d little-endian float32 values row-major."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", batch.batch_size))
        for i in range(batch.batch_size):
            n = batch.lengths[i]
            vals = batch.frames[i, :n].astype("<f4")
            fh.write(struct.pack("<II", n, batch.frame_dim))
            fh.write(vals.tobytes())


def read_swn(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    off = 4
    if len(blob) < off + 4:
        raise FormatError("truncated sequence count", offset=off)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    seqs = []
    dims = None
    for i in range(count):
        if len(blob) < off + 8:
            raise FormatError(f"truncated header of sequence {i}", offset=off)
        t_len, d = struct.unpack_from("<II", blob, off)
        off += 8
        if d < 1 or t_len > (1 << 31) or d > (1 << 31):
            raise FormatError(f"invalid extents T={t_len}, d={d} for sequence {i}", offset=off - 8)
        if dims is None:
            dims = d
        elif d != dims:
            raise FormatError(f"sequence {i} frame dim {d} != {dims}", offset=off - 4)
        nbytes = t_len * d * 4
        if len(blob) < off + nbytes:
            raise FormatError(f"truncated values of sequence {i}", offset=off)
        vals = np.frombuffer(blob, dtype="<f4", count=t_len * d, offset=off)
        off += nbytes
        seqs.append(vals.astype(np.float64).reshape(t_len, d))
    if dims is None:
        return SequenceBatch(np.zeros((0, 0, 1)), [])
    t_max = max((s.shape[0] for s in seqs), default=0)
    frames = np.zeros((count, t_max, dims))
    lengths = []
    for i, s in enumerate(seqs):
        frames[i, : s.shape[0]] = s
        lengths.append(s.shape[0])
    return SequenceBatch(frames, lengths)


def write_sidecar(path, payload):
    """JSON provenance next to a binary artifact (deterministic bytes)."""
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    """Per-dimension standardization constants from a training split."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise ConfigError("mean/std dimension mismatch")
        if np.any(self.std < 1e-8):
            raise ConfigError("std entries must be floored at 1e-8")


def compute_norm_stats(batch, exclude_dims=()):
    """Masked per-dimension mean/std; excluded dims pass through unscaled."""
    mask = batch.mask()
    count = mask.sum()
    if count == 0:
        raise EmptyError("no valid frames to compute statistics from")
    m = (batch.frames * mask[:, :, None]).sum(axis=(0, 1)) / count
    sq = ((batch.frames - m) ** 2 * mask[:, :, None]).sum(axis=(0, 1)) / count
    std = np.maximum(np.sqrt(sq), 1e-8)
    for d in exclude_dims:
        m[d] = 0.0
        std[d] = 1.0
    return NormStats(m, std)


def normalize(batch, stats):
    out = (batch.frames - stats.mean) / stats.std
    out *= batch.mask()[:, :, None]
    return SequenceBatch(out, list(batch.lengths))


def denormalize(batch, stats):
    out = batch.frames * stats.std + stats.mean
    out *= batch.mask()[:, :, None]
    return SequenceBatch(out, list(batch.lengths))
