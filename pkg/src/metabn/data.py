"""Synthetic multi-domain benchmarks with a shared label space.

Each domain applies its own low-level shift (per-channel gain and bias,
background level, noise, optional rotation) on top of class-conditional
structure that is identical across domains.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CorruptFile, InsufficientSamples, InvalidSpec, TruncatedFile


@dataclass
class DomainSpec:
    kind: str = "shapes"  # "shapes" | "blobs"
    num_classes: int = 4
    samples_per_domain: int = 200
    train_fraction: float = 0.5
    seed: int = 0
    image_size: int = 16
    channels: int = 3
    # shift schedule: every domain draws a shift vector s in [-1, 1]^K,
    # targets are pushed outside that box when target_mode == "extrapolate"
    shift_scale: float = 1.0
    gain_range: float = 0.5  # log-gain per channel = gain_range * s
    bias_range: float = 0.5
    background_range: float = 0.3
    noise_base: float = 0.1
    noise_range: float = 0.5  # relative change of the noise level
    rotation_range: float = 0.0  # degrees
    target_mode: str = "extrapolate"  # "extrapolate" | "interpolate"
    target_radius: tuple = (1.2, 1.6)
    # within-domain nuisance: per-image brightness offset / contrast spread
    image_offset_std: float = 0.2
    image_contrast_std: float = 0.2

    def validate(self) -> None:
        if self.kind not in ("shapes", "blobs"):
            raise InvalidSpec(f"kind: unknown generator {self.kind!r}")
        if self.kind == "shapes" and not 2 <= self.num_classes <= len(_TEMPLATES):
            raise InvalidSpec(f"num_classes: shapes supports 2..{len(_TEMPLATES)} classes")
        if self.num_classes < 2:
            raise InvalidSpec("num_classes: need at least 2 classes")
        if self.samples_per_domain < self.num_classes:
            raise InvalidSpec("samples_per_domain: fewer samples than classes")
        if self.samples_per_domain % self.num_classes:
            raise InvalidSpec("samples_per_domain: must be a multiple of num_classes for balanced labels")
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidSpec("train_fraction: must lie in (0, 1)")
        if self.kind == "shapes" and self.image_size < 8:
            raise InvalidSpec("image_size: shapes need at least 8 pixels")
        if self.target_mode not in ("extrapolate", "interpolate"):
            raise InvalidSpec(f"target_mode: unknown mode {self.target_mode!r}")
        if self.shift_scale < 0:
            raise InvalidSpec("shift_scale: must be non-negative")

    @property
    def sample_shape(self) -> tuple[int, ...]:
        if self.kind == "blobs":
            return (2,)
        return (self.channels, self.image_size, self.image_size)


@dataclass(eq=False)
class Domain:
    domain_id: int
    shift: dict
    x: np.ndarray
    y: np.ndarray
    n_train: int

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[: self.n_train], self.y[: self.n_train]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[self.n_train:], self.y[self.n_train:]

    def __eq__(self, other):
        return (
            isinstance(other, Domain)
            and self.domain_id == other.domain_id
            and self.shift == other.shift
            and self.n_train == other.n_train
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )


@dataclass(eq=False)
class DomainSet:
    sources: list
    targets: list
    num_classes: int
    sample_shape: tuple
    spec: dict = field(default_factory=dict)
    no_targets: bool = False

    @property
    def domains(self) -> list[Domain]:
        return list(self.sources) + list(self.targets)

    def manifest(self) -> list[dict]:
        rows = []
        for role, ds in (("source", self.sources), ("target", self.targets)):
            for d in ds:
                rows.append({"domain_id": d.domain_id, "role": role, "n": d.n, **d.shift})
        return rows

    def __eq__(self, other):
        return (
            isinstance(other, DomainSet)
            and self.num_classes == other.num_classes
            and tuple(self.sample_shape) == tuple(other.sample_shape)
            and self.sources == other.sources
            and self.targets == other.targets
        )


@dataclass
class DomainTask:
    domain_id: int
    support: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray


# ---- shape templates ------------------------------------------------------

_TEMPLATES = [
    # L
    ["#....", "#....", "#....", "#....", "#####"],
    # T
    ["#####", "..#..", "..#..", "..#..", "..#.."],
    # triangle pointing up
    ["..#..", ".###.", ".###.", "#####", "#####"],
    # F
    ["#####", "#....", "####.", "#....", "#...."],
    # arrow up
    ["..#..", ".###.", "#.#.#", "..#..", "..#.."],
    # P
    ["####.", "#...#", "####.", "#....", "#...."],
]


def _template(k: int, scale: int) -> np.ndarray:
    base = np.array([[c == "#" for c in row] for row in _TEMPLATES[k]], dtype=np.float64)
    return np.kron(base, np.ones((scale, scale)))


def _shift_vector_size(spec: DomainSpec) -> int:
    if spec.kind == "blobs":
        return 5  # 2 log-gains, 2 biases, rotation
    return 2 * spec.channels + 3  # gains, biases, background, noise, rotation


def _draw_shifts(spec: DomainSpec, m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    k = _shift_vector_size(spec)
    src = rng.uniform(-1.0, 1.0, size=(m, k))
    if spec.target_mode == "interpolate":
        tgt = rng.uniform(-1.0, 1.0, size=(n, k))
    else:
        direction = rng.normal(size=(n, k))
        direction /= np.abs(direction).max(axis=1, keepdims=True)
        lo, hi = spec.target_radius
        tgt = direction * rng.uniform(lo, hi, size=(n, 1))
    return np.concatenate([src, tgt], axis=0) * spec.shift_scale


def _shift_record(spec: DomainSpec, s: np.ndarray) -> dict:
    if spec.kind == "blobs":
        return {
            "gain": [float(v) for v in np.exp(spec.gain_range * s[:2])],
            "bias": [float(v) for v in spec.bias_range * s[2:4]],
            "rotation": float(spec.rotation_range * s[4]),
        }
    c = spec.channels
    return {
        "gain": [float(v) for v in np.exp(spec.gain_range * s[:c])],
        "bias": [float(v) for v in spec.bias_range * s[c:2 * c]],
        "background": float(spec.background_range * s[2 * c]),
        "noise": float(spec.noise_base * np.exp(spec.noise_range * s[2 * c + 1])),
        "rotation": float(spec.rotation_range * s[2 * c + 2]),
    }


def _balanced_labels(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    y = np.repeat(np.arange(spec.num_classes), spec.samples_per_domain // spec.num_classes)
    return rng.permutation(y).astype(np.int64)


def _render_shapes(spec: DomainSpec, shift: dict, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size, c = spec.image_size, spec.channels
    scale = max(1, size // 8)
    templates = [_template(k, scale) for k in range(spec.num_classes)]
    t = templates[0].shape[0]
    n = y.shape[0]
    x = np.zeros((n, c, size, size))
    offs = rng.integers(0, size - t + 1, size=(n, 2))
    # foreground colour is random per image so the class is carried by shape only
    colour = rng.uniform(0.5, 1.0, size=(n, c))
    contrast = np.exp(spec.image_contrast_std * rng.normal(size=(n, 1)))
    offset = spec.image_offset_std * rng.normal(size=(n, 1))
    for i in range(n):
        oy, ox = offs[i]
        mask = np.zeros((size, size))
        mask[oy:oy + t, ox:ox + t] = templates[y[i]]
        if shift["rotation"] != 0.0:
            mask = ndimage.rotate(mask, shift["rotation"], reshape=False, order=1, mode="constant")
        x[i] = mask[None] * (colour[i] * contrast[i])[:, None, None]
    x += shift["background"] + offset[:, :, None, None]
    gain = np.asarray(shift["gain"])[None, :, None, None]
    bias = np.asarray(shift["bias"])[None, :, None, None]
    x = gain * x + bias
    x += rng.normal(0.0, shift["noise"], size=x.shape)
    return x


def _render_blobs(spec: DomainSpec, shift: dict, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    angles = 2 * np.pi * np.arange(spec.num_classes) / spec.num_classes
    centres = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    x = centres[y] + 0.5 * rng.normal(size=(y.shape[0], 2))
    th = np.deg2rad(shift["rotation"])
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return (x @ rot.T) * np.asarray(shift["gain"]) + np.asarray(shift["bias"])


def gen_domains(spec: DomainSpec, m: int, n: int) -> DomainSet:
    """Generate ``m`` source and ``n`` target domains, deterministic in ``spec.seed``."""
    spec.validate()
    if m < 2:
        raise InvalidSpec("M: need at least 2 source domains")
    if n < 1:
        raise InvalidSpec("N: need at least 1 target domain")
    rng = np.random.default_rng(spec.seed)
    shifts = _draw_shifts(spec, m, n, rng)
    n_train = int(round(spec.samples_per_domain * spec.train_fraction))
    domains = []
    for i in range(m + n):
        drng = np.random.default_rng([spec.seed, i])
        record = _shift_record(spec, shifts[i])
        y = _balanced_labels(spec, drng)
        render = _render_blobs if spec.kind == "blobs" else _render_shapes
        x = render(spec, record, y, drng)
        domains.append(Domain(i, record, x, y, n_train))
    sd = asdict(spec)
    sd["target_radius"] = list(sd["target_radius"])
    return DomainSet(domains[:m], domains[m:], spec.num_classes, spec.sample_shape, sd)


def domain_discrepancy(a: Domain, b: Domain) -> float:
    """Mean absolute difference between the per-feature means of two domains."""
    return float(np.abs(a.x.mean(axis=0) - b.x.mean(axis=0)).mean())


def sample_support_query(
    domain: Domain, support_size: int, query_size: int, seed, split: str = "train"
) -> DomainTask:
    """Disjoint unlabeled support and labeled query draws from one domain split."""
    if split == "train":
        x, y = domain.train
    elif split == "test":
        x, y = domain.test
    else:
        x, y = domain.x, domain.y
    if support_size < 1:
        raise InsufficientSamples("support_size must be >= 1")
    if support_size + query_size > x.shape[0]:
        raise InsufficientSamples(
            f"domain {domain.domain_id} has {x.shape[0]} samples, asked for {support_size}+{query_size}"
        )
    rng = np.random.default_rng(seed)
    idx = rng.permutation(x.shape[0])
    s_idx = np.sort(idx[:support_size])
    q_idx = np.sort(idx[support_size:support_size + query_size])
    return DomainTask(domain.domain_id, x[s_idx], x[q_idx], y[q_idx], s_idx, q_idx)


# ---- dataset file ---------------------------------------------------------

DATA_MAGIC = b"MABD"
DATA_VERSION = 1


def _pack_json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw


def save_dataset(dataset: DomainSet, path) -> None:
    dims = list(dataset.sample_shape)
    buf = bytearray(DATA_MAGIC)
    buf += struct.pack("<I", DATA_VERSION)
    buf += struct.pack("<IIII", len(dataset.sources), len(dataset.targets), dataset.num_classes, len(dims))
    buf += struct.pack(f"<{len(dims)}I", *dims)
    buf += _pack_json(dataset.spec)
    for d in dataset.domains:
        buf += struct.pack("<i", d.domain_id)
        buf += _pack_json(d.shift)
        buf += struct.pack("<II", d.n, d.n_train)
        buf += np.ascontiguousarray(d.y, dtype="<i4").tobytes()
        buf += np.ascontiguousarray(d.x, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, raw: bytes, end: int, path):
        self.raw, self.pos, self.end, self.path = raw, 0, end, path

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFile(f"{self.path}: unexpected end of data")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode())


def load_dataset(path) -> DomainSet:
    raw = Path(path).read_bytes()
    if len(raw) < 28:
        raise TruncatedFile(f"{path}: too short for a dataset file")
    if raw[:4] != DATA_MAGIC:
        raise CorruptFile(f"{path}: bad magic {raw[:4]!r}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    r = _Reader(raw, len(raw) - 4, path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != DATA_VERSION:
        raise CorruptFile(f"{path}: unsupported version {version}")
    m, n, classes, ndim = r.unpack("<IIII")
    dims = tuple(r.unpack(f"<{ndim}I"))
    spec = r.json()
    domains = []
    for _ in range(m + n):
        (did,) = r.unpack("<i")
        shift = r.json()
        count, n_train = r.unpack("<II")
        y = np.frombuffer(r.take(4 * count), dtype="<i4").astype(np.int64)
        size = count * int(np.prod(dims))
        x = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape((count,) + dims)
        domains.append(Domain(did, shift, x, y, n_train))
    if r.pos != r.end:
        raise CorruptFile(f"{path}: trailing bytes after last domain")
    ds = DomainSet(domains[:m], domains[m:], classes, dims, spec, no_targets=(n == 0))
    if n == 0:
        warnings.warn(f"{path}: dataset has no target domains", stacklevel=2)
    return ds
