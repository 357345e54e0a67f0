"""Versioned binary parameter container with a bit-exact round trip.

Layout: magic "SWNCKPT1", u32 record count, then per parameter a u32
UTF-8 name length, the name bytes, u32 rank, u32 extents, and the
float64 little-endian values row-major. Generative and inference
parameters share the namespace with "gen."/"inf." prefixes.
"""

import struct

import numpy as np

from .errors import ConfigError, FormatError

_MAGIC = b"SWNCKPT1"


def flatten_params(gen, inf):
    """Merge parameter dicts into one prefixed name -> array mapping."""
    state = {}
    for name, p in gen.items():
        state["gen." + name] = p.values
    for name, p in inf.items():
        state["inf." + name] = p.values
    return state


def snapshot(gen, inf):
    return {name: arr.copy() for name, arr in flatten_params(gen, inf).items()}


def save_checkpoint(path, state):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise FormatError(f"bad magic {blob[:8]!r}", offset=0)
    off = 8
    if len(blob) < off + 4:
        raise FormatError("truncated record count", offset=off)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    state = {}
    for i in range(count):
        if len(blob) < off + 4:
            raise FormatError(f"truncated name length of record {i}", offset=off)
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        if len(blob) < off + name_len:
            raise FormatError(f"truncated name of record {i}", offset=off)
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        if len(blob) < off + 4:
            raise FormatError(f"truncated rank of record {i}", offset=off)
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        if rank > 8:
            raise FormatError(f"implausible rank {rank} of record {i}", offset=off - 4)
        if len(blob) < off + 4 * rank:
            raise FormatError(f"truncated extents of record {i}", offset=off)
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = 1
        for e in shape:
            size *= e
        nbytes = size * 8
        if len(blob) < off + nbytes:
            raise FormatError(f"truncated values of record {i}", offset=off)
        vals = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
        off += nbytes
        state[name] = vals.astype(np.float64).reshape(shape)
    return state


def restore_params(gen, inf, state):
    """Copy a flat state into live parameter tensors, validating shapes."""
    expected = flatten_params(gen, inf)
    if set(expected) != set(state):
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        raise ConfigError(f"checkpoint/model mismatch: missing={missing}, extra={extra}")
    for name, arr in expected.items():
        if arr.shape != state[name].shape:
            raise ConfigError(
                f"parameter {name}: checkpoint shape {state[name].shape} != model {arr.shape}")
        arr[...] = state[name]
