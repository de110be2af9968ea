"""EEG datasets: binary containers, synthetic generation, splits and batching.

Dataset container (little-endian, no padding)::

    "EEGC" | u16 version=1 | u32 count | u16 C | u16 T | u8 flags | u64 seed
    then per sample: C*T float32 eeg (channel-major), 2 float32 gaze[, 1 float32 pupil]

``flags`` bit 0 marks the optional pupil value. The tensor container used for
checkpoints shares the header idiom, see :func:`write_tensors`.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .rng import RngStream

MAGIC = b"EEGC"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHBQ")

TENSOR_MAGIC = b"EEGW"
TENSOR_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

# gaze labels are millimetres; externally ingested pixel labels divide by this
PIXELS_PER_MM = 0.5


class ContainerError(ValueError):
    code = "container"


class BadMagic(ContainerError):
    code = "bad-magic"


class BadVersion(ContainerError):
    code = "bad-version"


class Truncated(ContainerError):
    code = "truncated"


class CountMismatch(ContainerError):
    code = "count-mismatch"


def pixels_to_mm(xy, pixels_per_mm=PIXELS_PER_MM):
    return np.asarray(xy, dtype=np.float64) / pixels_per_mm


@dataclass
class Sample:
    eeg: np.ndarray
    gaze: np.ndarray
    pupil: float | None = None


@dataclass
class Dataset:
    """Immutable-by-convention arrays: ``eeg[n, 1, C, T]``, ``gaze[n, 2]``, ``pupil[n]``."""

    eeg: np.ndarray
    gaze: np.ndarray
    pupil: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.eeg = np.ascontiguousarray(self.eeg, dtype=np.float32)
        self.gaze = np.ascontiguousarray(self.gaze, dtype=np.float32)
        if self.pupil is not None:
            self.pupil = np.ascontiguousarray(self.pupil, dtype=np.float32)
        if self.eeg.ndim != 4 or self.eeg.shape[1] != 1:
            raise ValueError(f"eeg must be n x 1 x C x T, got {self.eeg.shape}")
        if self.gaze.shape != (len(self.eeg), 2):
            raise ValueError(f"gaze must be n x 2, got {self.gaze.shape}")

    def __len__(self):
        return len(self.eeg)

    @property
    def channels(self):
        return self.eeg.shape[2]

    @property
    def timesteps(self):
        return self.eeg.shape[3]

    @property
    def has_pupil(self):
        return self.pupil is not None

    def __getitem__(self, i) -> Sample:
        return Sample(self.eeg[i], self.gaze[i], None if self.pupil is None else float(self.pupil[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.eeg[idx], self.gaze[idx], None if self.pupil is None else self.pupil[idx], self.seed)


# -- dataset container ---------------------------------------------------------
def _open(target, mode):
    if isinstance(target, (str, Path)):
        return open(target, mode), True
    return target, False


def write_container(target, ds: Dataset):
    n, _, c, t = ds.eeg.shape
    flags = 1 if ds.has_pupil else 0
    fields = [ds.eeg.reshape(n, c * t).astype("<f4"), ds.gaze.astype("<f4")]
    if ds.has_pupil:
        fields.append(ds.pupil.reshape(n, 1).astype("<f4"))
    records = np.concatenate(fields, axis=1)
    f, owned = _open(target, "wb")
    try:
        f.write(_HEADER.pack(MAGIC, VERSION, n, c, t, flags, int(ds.seed) & (2**64 - 1)))
        f.write(records.tobytes())
    finally:
        if owned:
            f.close()


def read_container(source) -> Dataset:
    f, owned = _open(source, "rb")
    try:
        blob = f.read()
    finally:
        if owned:
            f.close()
    if len(blob) < _HEADER.size:
        if len(blob) >= 4 and blob[:4] != MAGIC:
            raise BadMagic(f"bad magic {blob[:4]!r}")
        raise Truncated(f"file has {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, count, c, t, flags, seed = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported container version {version}")
    width = c * t + 2 + (flags & 1)
    rec_bytes = 4 * width
    body = len(blob) - _HEADER.size
    stored, rest = divmod(body, rec_bytes)
    if rest:
        raise Truncated(f"payload of {body} bytes is not a whole number of {rec_bytes}-byte records")
    if stored != count:
        raise CountMismatch(f"header declares {count} samples, file holds {stored}")
    rec = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(count, width)
    eeg = rec[:, :c * t].reshape(count, 1, c, t)
    gaze = rec[:, c * t:c * t + 2]
    pupil = rec[:, -1] if flags & 1 else None
    return Dataset(eeg, gaze, pupil, seed)


# -- tensor container ------------------------------------------------------------
def write_tensors(target, tensors: dict, meta: dict | None = None):
    """Named arrays plus a JSON metadata block.

    ``"EEGW" | u16 version | u32 meta_len | meta (utf-8 JSON) | u32 count`` then
    per tensor ``u16 name_len | name | u8 dtype (0=f32, 1=f64) | u8 ndim |
    u32 dims... | data``.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out = [struct.pack("<4sHI", TENSOR_MAGIC, TENSOR_VERSION, len(meta_bytes)), meta_bytes,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = 1 if arr.dtype == np.float64 else 0
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    f, owned = _open(target, "wb")
    try:
        f.write(b"".join(out))
    finally:
        if owned:
            f.close()


def read_tensors(source) -> tuple:
    f, owned = _open(source, "rb")
    try:
        blob = f.read()
    finally:
        if owned:
            f.close()
    view = io.BytesIO(blob)

    def take(n):
        chunk = view.read(n)
        if len(chunk) != n:
            raise Truncated("tensor container ends mid-record")
        return chunk

    magic, version, meta_len = struct.unpack("<4sHI", take(10))
    if magic != TENSOR_MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise BadVersion(f"unsupported tensor container version {version}")
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {code} for tensor {name!r}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(size * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if view.read(1):
        raise CountMismatch(f"trailing bytes after {count} tensors")
    return tensors, meta


# -- synthetic generation ----------------------------------------------------------
@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the planted-structure generator."""

    screen_mm: tuple = (400.0, 300.0)
    grid: tuple = (5, 5)
    margin_mm: tuple = (40.0, 30.0)
    center_bias_mm: float = 120.0
    jitter_mm: float = 8.0
    gaze_amplitude: float = 0.8
    eccentricity_amplitude: float = 0.4
    background_sources: int = 4
    background_amplitude: float = 0.6
    noise_amplitude: float = 0.5
    noise_ar: float = 0.7
    burst_rate: float = 0.1
    burst_amplitude: float = 4.0
    pupil_correlation: float = 0.8
    montage_seed: int = 0


def fixation_dots(spec: SyntheticSpec = SyntheticSpec()):
    """Dot positions (mm) and their sampling weights, heavier near the centre."""
    (w, h), (mx, my) = spec.screen_mm, spec.margin_mm
    xs = np.linspace(mx, w - mx, spec.grid[0])
    ys = np.linspace(my, h - my, spec.grid[1])
    dots = np.array([(x, y) for y in ys for x in xs])
    d2 = ((dots - np.array([w / 2, h / 2])) ** 2).sum(axis=1)
    weights = np.exp(-d2 / (2 * spec.center_bias_mm ** 2)) + 0.35
    return dots, weights / weights.sum()


def _montage(channels, spec: SyntheticSpec):
    """Spatial patterns shared by every dataset with the same channel count."""
    rng = RngStream(spec.montage_seed, ("montage", channels))
    pos = np.linspace(-1.0, 1.0, channels)
    frontal = np.exp(-((pos + 1.0) ** 2) / 0.3)
    horiz = np.sin(np.pi * pos) + 0.3 * rng.child("h").normal(channels)
    vert = np.cos(np.pi * pos) + 0.3 * rng.child("v").normal(channels)
    ecc = 0.5 * frontal + 0.3 * rng.child("e").normal(channels)
    mixing = rng.child("mix").normal((channels, spec.background_sources)) / math.sqrt(spec.background_sources)
    return {
        "horizontal": horiz / np.abs(horiz).max(),
        "vertical": vert / np.abs(vert).max(),
        "eccentricity": ecc / np.abs(ecc).max(),
        "frontal": frontal,
        "mixing": mixing,
    }


def _ar1(white, rho):
    return lfilter([math.sqrt(1.0 - rho * rho)], [1.0, -rho], white, axis=-1)


def generate_synthetic(n, channels, timesteps, seed, spec: SyntheticSpec = SyntheticSpec(), with_pupil=True) -> Dataset:
    """Planted-structure EEG with gaze targets in millimetres.

    Each window carries sustained spatial patterns proportional to the
    horizontal and vertical gaze offsets and to their eccentricity, on top of
    mixed autocorrelated background sources, per-channel AR(1) noise and,
    at ``burst_rate``, a frontal blink-like burst. Sample ``i`` depends only
    on ``(seed, i)`` and the geometry.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    mont = _montage(channels, spec)
    dots, weights = fixation_dots(spec)
    (w, h) = spec.screen_mm
    center = np.array([w / 2, h / 2])
    t = np.arange(timesteps)
    eeg = np.empty((n, 1, channels, timesteps), dtype=np.float32)
    gaze = np.empty((n, 2), dtype=np.float32)
    pupil = np.empty(n, dtype=np.float32)
    root = RngStream(seed, ("synthetic",))
    for i in range(n):
        r = root.child(i).generator
        dot = dots[r.choice(len(dots), p=weights)]
        g = np.clip(dot + spec.jitter_mm * r.standard_normal(2), 0.0, [w, h])
        u, v = (g - center) / center
        ecc = math.sqrt(u * u + v * v)
        onset = r.uniform(0.0, 0.25) * timesteps
        ramp = 1.0 / (1.0 + np.exp(-(t - onset) / 2.0))
        sustained = spec.gaze_amplitude * (u * mont["horizontal"] + v * mont["vertical"])
        sustained = sustained + spec.eccentricity_amplitude * (ecc - 0.5) * mont["eccentricity"]
        x = sustained[:, None] * ramp[None, :]
        sources = _ar1(r.standard_normal((spec.background_sources, timesteps)), 0.9)
        x += spec.background_amplitude * (mont["mixing"] @ sources)
        x += spec.noise_amplitude * _ar1(r.standard_normal((channels, timesteps)), spec.noise_ar)
        if r.uniform() < spec.burst_rate:
            t0 = r.uniform(0.1, 0.9) * timesteps
            width = max(timesteps / 20.0, 1.0)
            x += spec.burst_amplitude * mont["frontal"][:, None] * np.exp(-0.5 * ((t - t0) / width) ** 2)[None, :]
        eeg[i, 0] = x
        gaze[i] = g
        rho = spec.pupil_correlation
        pupil[i] = rho * (ecc - 0.55) / 0.3 + math.sqrt(1 - rho * rho) * r.standard_normal()
    return Dataset(eeg, gaze, pupil if with_pupil else None, seed)


def in_bounds(gaze, spec: SyntheticSpec = SyntheticSpec()) -> bool:
    w, h = spec.screen_mm
    g = np.asarray(gaze)
    return bool(np.all(g[:, 0] >= 0) and np.all(g[:, 0] <= w) and np.all(g[:, 1] >= 0) and np.all(g[:, 1] <= h))


# -- splits and batches --------------------------------------------------------------
def split_sizes(n, fractions=(0.70, 0.15, 0.15)):
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    val = int(math.floor(n * fractions[1]))
    test = int(math.floor(n * fractions[2]))
    train = n - val - test
    if min(train, val, test) < 1:
        raise ValueError(f"n={n} leaves an empty split with fractions {fractions}")
    return train, val, test


def split_indices(n, fractions=(0.70, 0.15, 0.15), seed=0):
    train, val, _ = split_sizes(n, fractions)
    perm = RngStream(seed, ("split",)).permutation(n)
    return perm[:train], perm[train:train + val], perm[train + val:]


def split(ds: Dataset, fractions=(0.70, 0.15, 0.15), seed=0):
    """Seeded disjoint train/val/test split; floor sizes for val/test, remainder to train."""
    return tuple(ds.subset(np.sort(idx)) for idx in split_indices(len(ds), fractions, seed))


@dataclass
class Batch:
    indices: np.ndarray
    eeg: np.ndarray
    gaze: np.ndarray
    pupil: np.ndarray | None


def epoch_order(n, shuffle_seed, epoch):
    if shuffle_seed is None:
        return np.arange(n)
    return RngStream(shuffle_seed, ("shuffle", epoch)).permutation(n)


def batch_iter(ds: Dataset, batch_size, shuffle_seed=None, epoch=0):
    """Yield batches in an order that is a pure function of ``(shuffle_seed, epoch)``."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(ds), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(idx, ds.eeg[idx], ds.gaze[idx], None if ds.pupil is None else ds.pupil[idx])
