"""Binary trajectory checkpoints.

Layout (little endian)::

    magic "SHMT" | version u32 | n u64 | N u64 | dt f64 | start_time f64
    (N + 1) * n float64 values, time-major
"""

import struct

import numpy as np

from .integrators import Trajectory

MAGIC = b"SHMT"
VERSION = 1
_HEADER = struct.Struct("<4sIQQdd")


def save_trajectory(path, trajectory):
    states = np.asarray(trajectory.states, dtype="<f8")
    if states.ndim != 2:
        raise ValueError("checkpoints hold a single trajectory; save ensemble members separately")
    n_plus, n = states.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, n_plus - 1, float(trajectory.dt), float(trajectory.start)))
        fh.write(np.ascontiguousarray(states).tobytes())


def load_trajectory(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, n, N, dt, start = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != (N + 1) * n:
        raise ValueError(f"{path}: expected {(N + 1) * n} values, found {data.size}")
    return Trajectory(start, dt, data.reshape(N + 1, n).astype(float))
