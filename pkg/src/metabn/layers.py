"""Batch-normalization layers, the small backbones, heads and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    BatchTooSmall,
    ChannelMismatch,
    CorruptFile,
    LayoutMismatch,
    ModeViolation,
    ShapeMismatch,
    TruncatedFile,
)
from .tensor import Tensor


class Mode(str, Enum):
    TRAIN = "train"
    FROZEN = "frozen"
    EVAL = "eval"


class Scope(str, Enum):
    AFFINE_ONLY = "affine"
    FULL_BN = "fullbn"
    ALL_PARAMS = "all"
    THETA_ONLY = "theta"


_MODE_CODE = {Mode.TRAIN: 0.0, Mode.FROZEN: 1.0, Mode.EVAL: 2.0}
_CODE_MODE = {v: k for k, v in _MODE_CODE.items()}


@dataclass(eq=False)
class BNState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    retention: float = 0.9
    eps: float = 1e-5
    mode: Mode = Mode.TRAIN

    @classmethod
    def create(cls, channels: int, retention: float = 0.9, eps: float = 1e-5) -> "BNState":
        if not 0.0 <= retention <= 1.0:
            raise ValueError(f"retention must lie in [0, 1], got {retention}")
        if eps < 0:
            raise ValueError("eps must be non-negative")
        return cls(
            gamma=T.parameter(np.ones(channels)),
            beta=T.parameter(np.zeros(channels)),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            retention=retention,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def bn_update_running(state: BNState, batch_mean: np.ndarray, batch_var: np.ndarray) -> BNState:
    """Exponential moving average of the batch statistics, decayed by ``retention``."""
    if state.mode is not Mode.TRAIN:
        raise ModeViolation(f"running statistics are read-only in {state.mode.value} mode")
    m = state.retention
    state.running_mean = m * state.running_mean + (1.0 - m) * np.asarray(batch_mean)
    state.running_var = m * state.running_var + (1.0 - m) * np.asarray(batch_var)
    return state


def bn_forward(x: Tensor, state: BNState) -> Tensor:
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ChannelMismatch(f"BN over {state.channels} channels got input {list(x.shape)}")
    if x.shape[0] < 1:
        raise BatchTooSmall("empty batch")
    if state.mode is Mode.TRAIN:
        if x.shape[0] < 2:
            raise BatchTooSmall("Train-mode BN needs at least 2 samples")
        out = T.batch_norm(x, state.gamma, state.beta, eps=state.eps)
        axes = (0,) + tuple(range(2, x.ndim))
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        bn_update_running(state, mu, var)
        return out
    if state.mode is Mode.FROZEN:
        return T.batch_norm(x, state.gamma, state.beta, state.running_mean, state.running_var, state.eps)
    return T.batch_norm(
        x, state.gamma.detach(), state.beta.detach(), state.running_mean, state.running_var, state.eps
    )


@dataclass(eq=False)
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor | None

    @classmethod
    def create(cls, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True) -> "Linear":
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        return cls(T.parameter(w), T.parameter(np.zeros(fan_out)) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeMismatch(f"linear expects [*, {self.weight.shape[0]}], got {list(x.shape)}")
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


@dataclass(eq=False)
class ConvBlock:
    weight: Tensor  # [out, in, 3, 3]
    bn: BNState

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(bn_forward(T.conv2d_3x3(x, self.weight), self.bn))


@dataclass(eq=False)
class DenseBlock:
    linear: Linear
    bn: BNState

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(bn_forward(self.linear(x), self.bn))


@dataclass(eq=False)
class MLPHead:
    """Linear -> BN -> relu -> Linear."""

    first: Linear
    bn: BNState
    second: Linear

    @classmethod
    def create(cls, fan_in, hidden, fan_out, rng, retention=0.9, eps=1e-5) -> "MLPHead":
        return cls(
            Linear.create(fan_in, hidden, rng, bias=False),
            BNState.create(hidden, retention, eps),
            Linear.create(hidden, fan_out, rng),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(T.relu(bn_forward(self.first(x), self.bn)))


@dataclass
class ArchConfig:
    kind: str = "conv"  # "conv" for [N,C,H,W] images, "mlp" for flat vectors
    in_channels: int = 3
    image_size: int = 16
    input_dim: int = 2
    widths: tuple = (16, 32, 64)
    num_classes: int = 4
    regression: bool = False
    ssl_kind: str = "rotation"  # "rotation" | "byol"
    ssl_hidden: int = 64
    projection_dim: int = 32
    predictor_hidden: int = 64
    retention: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.kind not in ("conv", "mlp"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.ssl_kind not in ("rotation", "byol"):
            raise ValueError(f"unknown ssl kind {self.ssl_kind!r}")
        if not self.widths:
            raise ValueError("backbone needs at least one block")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def output_dim(self) -> int:
        return 1 if self.regression else self.num_classes


@dataclass(eq=False)
class ByolTargetState:
    """EMA copy of the online backbone and projector; never differentiated."""

    blocks: list
    projector: MLPHead


class Model:
    """Backbone blocks, a BN-free linear classifier and an SSL head.

    Parameter groups: theta (every weight matrix and bias), and the BN affine
    pairs, tagged ``S`` for the backbone and ``A`` for the SSL head.
    """

    def __init__(self, arch: ArchConfig, seed: int = 0):
        self.arch = arch
        rng = np.random.default_rng(seed)
        r, e = arch.retention, arch.eps
        self.blocks: list = []
        fan_in = arch.in_channels if arch.kind == "conv" else arch.input_dim
        for width in arch.widths:
            if arch.kind == "conv":
                w = rng.normal(0.0, np.sqrt(2.0 / (fan_in * 9)), size=(width, fan_in, 3, 3))
                self.blocks.append(ConvBlock(T.parameter(w), BNState.create(width, r, e)))
            else:
                self.blocks.append(DenseBlock(Linear.create(fan_in, width, rng, bias=False), BNState.create(width, r, e)))
            fan_in = width
        self.classifier = Linear.create(arch.feature_dim, arch.output_dim, rng)
        self.ssl_head: dict[str, MLPHead] = {}
        if arch.ssl_kind == "rotation":
            self.ssl_head["rotation"] = MLPHead.create(arch.feature_dim, arch.ssl_hidden, 4, rng, r, e)
            self.target: ByolTargetState | None = None
        else:
            self.ssl_head["projector"] = MLPHead.create(
                arch.feature_dim, arch.ssl_hidden, arch.projection_dim, rng, r, e
            )
            self.ssl_head["predictor"] = MLPHead.create(
                arch.projection_dim, arch.predictor_hidden, arch.projection_dim, rng, r, e
            )
            self.target = ByolTargetState(copy.deepcopy(self.blocks), copy.deepcopy(self.ssl_head["projector"]))
            for _, t in _target_tensors(self.target):
                t.requires_grad = False
        self.freeze_theta = False

    # ---- parameter enumeration -------------------------------------------

    def bn_layers(self) -> list[tuple[str, BNState, str]]:
        """(name, state, group) for every online BN; group is 'S' or 'A'."""
        out = [(f"backbone.{i}.bn", b.bn, "S") for i, b in enumerate(self.blocks)]
        out += [(f"ssl.{k}.bn", h.bn, "A") for k, h in self.ssl_head.items()]
        return out

    def theta(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, b in enumerate(self.blocks):
            if isinstance(b, ConvBlock):
                out.append((f"backbone.{i}.weight", b.weight))
            else:
                out.append((f"backbone.{i}.weight", b.linear.weight))
        out.append(("classifier.weight", self.classifier.weight))
        out.append(("classifier.bias", self.classifier.bias))
        for k, h in self.ssl_head.items():
            out.append((f"ssl.{k}.first.weight", h.first.weight))
            out.append((f"ssl.{k}.second.weight", h.second.weight))
            out.append((f"ssl.{k}.second.bias", h.second.bias))
        return out

    def affine(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, bn, _ in self.bn_layers():
            out.append((f"{name}.gamma", bn.gamma))
            out.append((f"{name}.beta", bn.beta))
        return out

    def clone(self) -> "Model":
        for _, p in self.theta() + self.affine():
            p.grad = None
        return copy.deepcopy(self)


def _target_tensors(target: ByolTargetState | None) -> list[tuple[str, Tensor]]:
    if target is None:
        return []
    out = []
    for i, b in enumerate(target.blocks):
        w = b.weight if isinstance(b, ConvBlock) else b.linear.weight
        out.append((f"target.backbone.{i}.weight", w))
        out.append((f"target.backbone.{i}.bn.gamma", b.bn.gamma))
        out.append((f"target.backbone.{i}.bn.beta", b.bn.beta))
    p = target.projector
    out += [
        ("target.projector.first.weight", p.first.weight),
        ("target.projector.bn.gamma", p.bn.gamma),
        ("target.projector.bn.beta", p.bn.beta),
        ("target.projector.second.weight", p.second.weight),
        ("target.projector.second.bias", p.second.bias),
    ]
    return out


def _target_bns(target: ByolTargetState | None) -> list[tuple[str, BNState]]:
    if target is None:
        return []
    out = [(f"target.backbone.{i}.bn", b.bn) for i, b in enumerate(target.blocks)]
    out.append(("target.projector.bn", target.projector.bn))
    return out


# ---- forward passes -------------------------------------------------------


def run_blocks(blocks, x: Tensor, kind: str) -> Tensor:
    h = x
    for b in blocks:
        h = b(h)
    if kind == "conv":
        h = T.mean_axis(h, axis=(2, 3))
    return h


def backbone_forward(model: Model, x: Tensor) -> Tensor:
    """Blocks followed by global average pooling -> [batch, feature_dim]."""
    arch = model.arch
    if arch.kind == "conv":
        if x.ndim != 4 or x.shape[1] != arch.in_channels:
            raise ShapeMismatch(f"backbone expects [N,{arch.in_channels},H,W], got {list(x.shape)}")
    elif x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeMismatch(f"backbone expects [N,{arch.input_dim}], got {list(x.shape)}")
    return run_blocks(model.blocks, x, arch.kind)


def classify(model: Model, features: Tensor) -> Tensor:
    return model.classifier(features)


def predict_logits(model: Model, x, batch_size: int = 256) -> np.ndarray:
    """Inference-only logits; BN layers must not be in Train mode."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    outs = []
    with T.no_grad():
        for i in range(0, x.shape[0], batch_size):
            outs.append(classify(model, backbone_forward(model, Tensor(x[i:i + batch_size]))).data)
    if not outs:
        return np.zeros((0, model.arch.output_dim))
    return np.concatenate(outs, axis=0)


def set_mode(model: Model, mode: Mode | str, include_target: bool = False) -> Model:
    mode = Mode(mode)
    for _, bn, _ in model.bn_layers():
        bn.mode = mode
        if mode is Mode.FROZEN:
            bn.gamma.requires_grad = True
            bn.beta.requires_grad = True
    if include_target:
        for _, bn in _target_bns(model.target):
            bn.mode = mode
    return model


# ---- parameter views ------------------------------------------------------


@dataclass
class ParamView:
    scope: Scope
    params: list  # (name, Tensor)
    reestimate_stats: bool = False

    @property
    def tensors(self) -> list[Tensor]:
        return [p for _, p in self.params]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.params]

    def count(self) -> int:
        return int(sum(p.size for _, p in self.params))


def collect_params(model: Model, scope: Scope | str) -> ParamView:
    scope = Scope(scope)
    if scope is Scope.AFFINE_ONLY:
        return ParamView(scope, model.affine())
    if scope is Scope.FULL_BN:
        return ParamView(scope, model.affine(), reestimate_stats=True)
    if scope is Scope.ALL_PARAMS:
        return ParamView(scope, model.theta() + model.affine())
    return ParamView(scope, model.theta())


# ---- snapshots and hashes -------------------------------------------------


@dataclass
class AffineSnapshot:
    entries: dict = field(default_factory=dict)  # bn name -> (gamma, beta) arrays

    def layout(self):
        return [(k, v[0].shape) for k, v in self.entries.items()]

    def differs_from(self, other: "AffineSnapshot") -> bool:
        return any(
            not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]))
            for a, b in zip(self.entries.values(), other.entries.values())
        )


def snapshot_affine(model: Model) -> AffineSnapshot:
    return AffineSnapshot(
        {name: (bn.gamma.data.copy(), bn.beta.data.copy()) for name, bn, _ in model.bn_layers()}
    )


def restore_affine(model: Model, snapshot: AffineSnapshot) -> Model:
    layout = [(name, (bn.channels,)) for name, bn, _ in model.bn_layers()]
    if layout != snapshot.layout():
        raise LayoutMismatch("snapshot channel layout does not match the model")
    for name, bn, _ in model.bn_layers():
        g, b = snapshot.entries[name]
        bn.gamma.data = g.copy()
        bn.beta.data = b.copy()
    return model


def _digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def theta_hash(model: Model) -> str:
    return _digest(p.data for _, p in model.theta())


def stats_hash(model: Model) -> str:
    arrays = []
    for _, bn, _ in model.bn_layers():
        arrays += [bn.running_mean, bn.running_var]
    for _, bn in _target_bns(model.target):
        arrays += [bn.running_mean, bn.running_var]
    return _digest(arrays)


def affine_hash(model: Model) -> str:
    return _digest(p.data for _, p in model.affine())


# ---- checkpoint file ------------------------------------------------------

CKPT_MAGIC = b"MABN"
CKPT_VERSION = 1


def _buffers(model: Model) -> list[tuple[str, np.ndarray]]:
    bufs = [(n, p.data) for n, p in model.theta()]
    bns = [(n, bn) for n, bn, _ in model.bn_layers()] + _target_bns(model.target)
    for n, bn in bns:
        bufs += [
            (f"{n}.gamma", bn.gamma.data),
            (f"{n}.beta", bn.beta.data),
            (f"{n}.running_mean", bn.running_mean),
            (f"{n}.running_var", bn.running_var),
            (f"{n}.flags", np.array([_MODE_CODE[bn.mode], bn.retention, bn.eps])),
        ]
    bufs += [(n, p.data) for n, p in _target_tensors(model.target) if ".bn." not in n]
    bufs.append(("model.freeze_theta", np.array([1.0 if model.freeze_theta else 0.0])))
    return bufs


def save_checkpoint(model: Model, path) -> None:
    bufs = _buffers(model)
    arch = asdict(model.arch)
    arch["widths"] = list(arch["widths"])
    manifest = {
        "arch": arch,
        "layers": [{"name": n, "kind": _kind_of(n), "shape": list(a.shape)} for n, a in bufs],
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    payload = bytearray(CKPT_MAGIC)
    payload += struct.pack("<II", CKPT_VERSION, len(mbytes))
    payload += mbytes
    for _, a in bufs:
        payload += np.ascontiguousarray(a, dtype="<f8").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)))
    Path(path).write_bytes(bytes(payload))


def _kind_of(name: str) -> str:
    for suffix in ("gamma", "beta", "running_mean", "running_var", "flags", "weight", "bias"):
        if name.endswith(suffix):
            return suffix
    return "scalar"


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise TruncatedFile(f"{path}: too short for a checkpoint")
    if raw[:4] != CKPT_MAGIC:
        raise CorruptFile(f"{path}: bad magic {raw[:4]!r}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise CorruptFile(f"{path}: unsupported version {version}")
    manifest = json.loads(raw[12:12 + mlen].decode())
    model = Model(ArchConfig(**manifest["arch"]))
    offset = 12 + mlen
    layout = _buffers(model)
    if [(n, list(a.shape)) for n, a in layout] != [(l["name"], l["shape"]) for l in manifest["layers"]]:
        raise LayoutMismatch(f"{path}: layer manifest does not match the architecture")
    values = {}
    for n, a in layout:
        nbytes = a.size * 8
        if offset + nbytes > len(raw) - 4:
            raise TruncatedFile(f"{path}: payload ends inside {n}")
        values[n] = np.frombuffer(raw[offset:offset + nbytes], dtype="<f8").reshape(a.shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw) - 4:
        raise CorruptFile(f"{path}: trailing bytes after payload")
    _assign(model, values)
    return model


def _assign(model: Model, values: dict) -> None:
    for n, p in model.theta():
        p.data = values[n]
    bns = [(n, bn) for n, bn, _ in model.bn_layers()] + _target_bns(model.target)
    for n, bn in bns:
        bn.gamma.data = values[f"{n}.gamma"]
        bn.beta.data = values[f"{n}.beta"]
        bn.running_mean = values[f"{n}.running_mean"]
        bn.running_var = values[f"{n}.running_var"]
        code, retention, eps = values[f"{n}.flags"]
        bn.mode, bn.retention, bn.eps = _CODE_MODE[float(code)], float(retention), float(eps)
    for n, p in _target_tensors(model.target):
        if ".bn." not in n:
            p.data = values[n]
    model.freeze_theta = bool(values["model.freeze_theta"][0])
