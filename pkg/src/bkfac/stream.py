"""Ground-truth exponential-average K-factor streams.

A synthetic generator produces the incoming tall-thin factors ``M_k``;
:func:`ea_step` advances the exact dense average
``M_k = rho M_{k-1} + (1 - rho) M_k M_k^T`` (with ``M_0 = M_0 M_0^T``).
Recorded factors can be stored and replayed through a small binary format.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, MalformedFile

MAGIC = b"KFST"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


@dataclass(frozen=True)
class StreamConfig:
    dim: int
    update_cols: int
    rho: float = 0.95
    decay: float = 8.0
    drift: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.update_cols < 1:
            raise ValueError("update_cols must be >= 1")
        if self.dim < self.update_cols + 1:
            raise ValueError("dim must exceed update_cols")
        if self.decay <= 0:
            raise ValueError("decay must be positive")
        if self.drift < 0:
            raise ValueError("drift must be nonnegative")

    def child(self, index: int) -> "StreamConfig":
        """Independent stream with the same statistics (e.g. the Gamma factor)."""
        seed = int(np.random.SeedSequence([self.seed, 0x5EED, index]).generate_state(1, np.uint64)[0])
        return replace(self, seed=seed)


@functools.lru_cache(maxsize=64)
def _shaping(dim: int, decay: float, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    plane, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    sigma = np.exp(-decay * np.arange(dim) / dim)
    return Q * sigma, plane


def _rotate(X, plane, angle):
    """Apply the rotation by ``angle`` inside span(plane) to the rows of ``X``."""
    if angle == 0.0:
        return X
    p1, p2 = plane[:, 0], plane[:, 1]
    a, b = p1 @ X, p2 @ X
    c, s = np.cos(angle), np.sin(angle)
    return X + np.outer(p1, (c - 1) * a - s * b) + np.outer(p2, s * a + (c - 1) * b)


def shaping_factor(cfg: StreamConfig, k: int) -> np.ndarray:
    """The d x d factor ``L_k``; updates have covariance ``L_k L_k^T``."""
    L, plane = _shaping(cfg.dim, cfg.decay, cfg.seed)
    return _rotate(L, plane, cfg.drift * k)


def gen_update(cfg: StreamConfig, k: int) -> np.ndarray:
    """Incoming factor ``M_k`` (dim x update_cols), a pure function of ``(seed, k)``."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, k]))
    z = rng.standard_normal((cfg.dim, cfg.update_cols))
    return shaping_factor(cfg, k) @ z


@dataclass(frozen=True, eq=False)
class ExactFactorState:
    step: int
    M_exact: np.ndarray
    last_update: np.ndarray

    @classmethod
    def start(cls, M0) -> "ExactFactorState":
        M0 = np.asarray(M0, dtype=float)
        G = M0 @ M0.T
        return cls(0, 0.5 * (G + G.T), M0)


def ea_step(state: ExactFactorState, M, rho: float) -> ExactFactorState:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != state.M_exact.shape[0]:
        raise DimensionMismatch(f"update of shape {M.shape} does not fit dimension {state.M_exact.shape[0]}")
    G = M @ M.T
    new = rho * state.M_exact + (1.0 - rho) * 0.5 * (G + G.T)
    return ExactFactorState(state.step + 1, new, M)


def write_stream(path, mats, shape=None) -> None:
    """Write tall-thin matrices in the ``KFST`` format.

    An empty sequence with no ``shape`` produces an empty file.
    """
    mats = [np.asarray(m, dtype=float) for m in mats]
    if mats:
        shape = mats[0].shape
    if shape is None:
        Path(path).write_bytes(b"")
        return
    d, n = shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, d, n, len(mats)))
        for m in mats:
            if m.shape != (d, n):
                raise DimensionMismatch(f"record of shape {m.shape} in a ({d}, {n}) stream")
            fh.write(m.astype("<f8").tobytes(order="F"))


def load_stream(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf:
        return []
    if len(buf) < _HEADER.size:
        raise MalformedFile("truncated header", len(buf))
    magic, version, d, n, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MalformedFile(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise MalformedFile(f"unsupported version {version}", 4)
    rec = 8 * d * n
    out = []
    offset = _HEADER.size
    for _ in range(count):
        if offset + rec > len(buf):
            raise MalformedFile("truncated record", offset)
        arr = np.frombuffer(buf, dtype="<f8", count=d * n, offset=offset)
        out.append(arr.reshape((d, n), order="F").astype(float))
        offset += rec
    if offset != len(buf):
        raise MalformedFile("trailing bytes after last record", offset)
    return out
