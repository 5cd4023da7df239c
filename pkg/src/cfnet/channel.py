"""Synthetic channel datasets.

Statistical stand-in for a ray-based urban macro generator: log-distance path
loss, per-link log-normal shadowing and i.i.d. Rayleigh fading. Coefficient
tensors use the index order [b][n][i][tx][rx].
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SBS_HEIGHT = 25.0
USER_HEIGHT = 1.5

MAGIC = b"CFDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI6I")
# guards against absurd headers before any allocation
MAX_ENTRIES = 1 << 31


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Topology:
    sbs_positions: np.ndarray  # (B, 3) meters
    user_positions: np.ndarray  # (I, 3) meters
    area_side: float

    @property
    def num_sbs(self) -> int:
        return len(self.sbs_positions)

    @property
    def num_users(self) -> int:
        return len(self.user_positions)

    def distances(self) -> np.ndarray:
        """3-D SBS-user distances, shape (B, I)."""
        diff = self.sbs_positions[:, None, :] - self.user_positions[None, :, :]
        return np.sqrt(np.sum(diff**2, axis=-1))

    def with_extra_sbs(self, xy) -> "Topology":
        new = np.array([[xy[0], xy[1], SBS_HEIGHT]])
        return Topology(np.vstack([self.sbs_positions, new]), self.user_positions.copy(), self.area_side)

    def to_dict(self) -> dict:
        return {
            "sbs_positions": self.sbs_positions.tolist(),
            "user_positions": self.user_positions.tolist(),
            "area_side": self.area_side,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(np.asarray(d["sbs_positions"], float), np.asarray(d["user_positions"], float), float(d["area_side"]))


def _default_intercept(freq_hz: float) -> float:
    return 32.4 + 20.0 * math.log10(freq_hz / 1e9)


@dataclass
class ChannelGenConfig:
    carrier_freq: float = 2.1e9
    pathloss_exponent: float = 3.0
    pathloss_intercept_db: float | None = None
    shadowing_sigma_db: float = 8.0
    fading: str = "rayleigh_iid"
    seed: int = 0

    def __post_init__(self):
        if self.pathloss_intercept_db is None:
            self.pathloss_intercept_db = _default_intercept(self.carrier_freq)
        if not 2.0 <= self.pathloss_exponent <= 5.0:
            raise ValueError("pathloss_exponent must lie in [2, 5]")
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing_sigma_db must be >= 0")
        if self.fading != "rayleigh_iid":
            raise ValueError(f"unsupported fading model {self.fading!r}")


@dataclass
class ChannelDataset:
    """Stack of channel samples, shape (K, B, N, I, Mt, Mr)."""

    coeffs: np.ndarray
    topology: Topology | None = field(default=None, compare=False)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if self.coeffs.ndim != 6:
            raise ValueError(f"expected (K, B, N, I, Mt, Mr) coefficients, got {self.coeffs.shape}")

    def __len__(self) -> int:
        return self.coeffs.shape[0]

    def __getitem__(self, k):
        return self.coeffs[k]

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        return tuple(self.coeffs.shape[1:])

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(repr(self.coeffs.shape).encode())
        h.update(np.ascontiguousarray(self.coeffs).tobytes())
        return h.hexdigest()[:16]

    def subset(self, idx) -> "ChannelDataset":
        return ChannelDataset(self.coeffs[idx], self.topology)


def place_nodes(b: int, i: int, area_side: float, seed: int) -> Topology:
    if b < 1 or i < 1:
        raise ValueError("need at least one SBS and one user")
    if area_side <= 0:
        raise ValueError("area_side must be positive")
    rng = np.random.default_rng(seed)
    sbs = np.column_stack([rng.uniform(0, area_side, size=(b, 2)), np.full(b, SBS_HEIGHT)])
    users = np.column_stack([rng.uniform(0, area_side, size=(i, 2)), np.full(i, USER_HEIGHT)])
    return Topology(sbs, users, float(area_side))


def pathloss_linear(d3d, cfg: ChannelGenConfig):
    d = np.asarray(d3d, dtype=float)
    if np.any(d < 1.0):
        log.warning("distance below 1 m clamped to the reference distance")
        d = np.maximum(d, 1.0)
    pl_db = cfg.pathloss_intercept_db + 10.0 * cfg.pathloss_exponent * np.log10(d)
    gain = 10.0 ** (-pl_db / 10.0)
    return float(gain) if gain.ndim == 0 else gain


def large_scale_gains(topo: Topology, cfg: ChannelGenConfig, rng: np.random.Generator) -> np.ndarray:
    """Path loss times a log-normal shadowing draw per (b, i) link."""
    pl = pathloss_linear(topo.distances(), cfg)
    shadow_db = cfg.shadowing_sigma_db * rng.standard_normal(pl.shape)
    return pl * 10.0 ** (shadow_db / 10.0)


def generate_sample(topo: Topology, cfg: ChannelGenConfig, rng: np.random.Generator,
                    n_sub: int, mt: int, mr: int) -> np.ndarray:
    gains = large_scale_gains(topo, cfg, rng)
    b, i = gains.shape
    shape = (b, n_sub, i, mt, mr)
    fading = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
    amp = np.sqrt(gains)[:, None, :, None, None]
    return amp * fading


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CFNET_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(topo: Topology, cfg: ChannelGenConfig, count: int, n_sub: int, mt: int, mr: int,
                     offset: int = 0) -> ChannelDataset:
    """`count` samples; sample k uses its own RNG stream keyed by (seed, offset + k)."""

    def one(k):
        return generate_sample(topo, cfg, sample_rng(cfg.seed, offset + k), n_sub, mt, mr)

    shape = (count, topo.num_sbs, n_sub, topo.num_users, mt, mr)
    out = np.empty(shape, dtype=np.complex128)
    workers = worker_count()
    if workers > 1 and count > 1:
        with ThreadPoolExecutor(workers) as pool:
            for k, s in enumerate(pool.map(one, range(count))):
                out[k] = s
    else:
        for k in range(count):
            out[k] = one(k)
    return ChannelDataset(out, topo)


def slice_local(ds: ChannelDataset, b: int) -> np.ndarray:
    """Per-SBS view of every sample, shape (K, N, I, Mt, Mr). `b` is 0-based."""
    nb = ds.dims[0]
    if not 0 <= b < nb:
        raise IndexError(f"SBS index {b} out of range for B={nb}")
    return ds.coeffs[:, b]


def stack_local(slices) -> ChannelDataset:
    return ChannelDataset(np.stack(list(slices), axis=1))


def save_dataset(ds: ChannelDataset, path) -> None:
    k = len(ds)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, *ds.dims, k)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.coeffs, dtype="<c16").tobytes())


def load_dataset(path) -> ChannelDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", len(raw))
    magic, version, *dims_count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    *dims, count = dims_count
    if any(d == 0 for d in dims):
        raise FormatError("zero dimension in header", 8)
    entries = count * math.prod(dims)
    if entries > MAX_ENTRIES:
        raise FormatError("dimension overflow", 8)
    need = _HEADER.size + 16 * entries
    if len(raw) < need:
        # offset of the first missing byte
        raise FormatError(f"truncated data: expected {need} bytes, got {len(raw)}", len(raw))
    if len(raw) > need:
        raise FormatError("trailing bytes after last sample", need)
    data = np.frombuffer(raw, dtype="<c16", count=entries, offset=_HEADER.size)
    return ChannelDataset(data.astype(np.complex128).reshape(count, *dims))
