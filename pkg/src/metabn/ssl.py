"""Label-free auxiliary losses (rotation prediction, BYOL-lite) and the joint loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import HeadMismatch, MissingTarget, NonSquare
from .layers import Model, backbone_forward, classify, run_blocks
from .tensor import Tensor


@dataclass
class SSLTaskConfig:
    kind: str = "rotation"  # "rotation" | "byol"
    projection_dim: int = 32
    predictor_hidden: int = 64
    ema_tau: float = 0.99
    noise_std: float = 0.1
    crop_jitter: int = 2
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.kind not in ("rotation", "byol"):
            raise ValueError(f"unknown SSL kind {self.kind!r}")
        if not 0.0 <= self.ema_tau < 1.0:
            raise ValueError("ema_tau must lie in [0, 1)")
        if self.projection_dim < 1:
            raise ValueError("projection_dim must be >= 1")


_PLANAR = [np.array([[c, s], [-s, c]]) for c, s in ((1, 0), (0, 1), (-1, 0), (0, -1))]


def make_rotation_batch(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Each sample rotated by 0/90/180/270 degrees, sample-major ordering.

    Images rotate over their two trailing (square) axes.  Flat 2-vectors are
    rotated in the plane, which is the same group action on a single point.
    """
    if x.ndim == 2:
        if x.shape[1] != 2:
            raise NonSquare(f"vector rotation needs 2-D points, got {list(x.shape)}")
        views = [T.matmul(x, Tensor(r)) for r in _PLANAR]
    else:
        if x.ndim < 3 or x.shape[-1] != x.shape[-2]:
            raise NonSquare(f"rotation needs square spatial dims, got {list(x.shape)}")
        views = [T.rotate90k(x, k) for k in range(4)]
    n = x.shape[0]
    stacked = T.concat(*[T.reshape(v, (n, 1) + v.shape[1:]) for v in views], axis=1)
    out = T.reshape(stacked, (4 * n,) + x.shape[1:])
    labels = np.tile(np.arange(4), n)
    return out, labels


def ssl_loss_rotation(model: Model, x: Tensor) -> Tensor:
    head = model.ssl_head.get("rotation")
    if head is None:
        raise HeadMismatch("model has no 4-way rotation head")
    xr, labels = make_rotation_batch(x)
    return T.softmax_ce(head(backbone_forward(model, xr)), labels)


def augment(x: np.ndarray, cfg: SSLTaskConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise, random horizontal flip and crop jitter (images only)."""
    out = np.array(x, dtype=np.float64, copy=True)
    if out.ndim == 4:
        n, _, h, w = out.shape
        flips = rng.random(n) < cfg.flip_prob
        out[flips] = out[flips, :, :, ::-1]
        j = int(cfg.crop_jitter)
        if j > 0:
            padded = np.pad(out, ((0, 0), (0, 0), (j, j), (j, j)), mode="edge")
            offs = rng.integers(0, 2 * j + 1, size=(n, 2))
            for i in range(n):
                dy, dx = offs[i]
                out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    if cfg.noise_std > 0:
        out = out + rng.normal(0.0, cfg.noise_std, size=out.shape)
    return out


def _online(model: Model, v: Tensor) -> Tensor:
    z = model.ssl_head["projector"](backbone_forward(model, v))
    return model.ssl_head["predictor"](z)


def _target(model: Model, v: Tensor) -> Tensor:
    with T.no_grad():
        feats = run_blocks(model.target.blocks, v, model.arch.kind)
        return model.target.projector(feats).detach()


def ssl_loss_byol(
    model: Model,
    x: Tensor,
    cfg: SSLTaskConfig,
    rng: np.random.Generator | int | None = 0,
    views: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Symmetrized BYOL loss, mean of (2 - 2 cos) over both view orderings.

    Lies in [0, 4].  ``views`` overrides augmentation (used by tests).
    """
    if cfg.kind != "byol":
        raise HeadMismatch(f"ssl_loss_byol called with kind {cfg.kind!r}")
    if model.target is None or "predictor" not in model.ssl_head:
        raise MissingTarget("BYOL loss needs a target network and predictor head")
    if views is None:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        views = (augment(x.data, cfg, rng), augment(x.data, cfg, rng))
    v1, v2 = Tensor(views[0]), Tensor(views[1])
    # both views go through the online net in one batch so BN sees 2N samples
    pred = _online(model, T.concat(v1, v2, axis=0))
    tgt = _target(model, T.concat(v2, v1, axis=0))
    cos = T.cosine_sim(pred, tgt)
    return T.add(T.scale(T.mean_axis(cos), -2.0), Tensor(2.0))


def ema_update(model: Model, tau: float) -> Model:
    """target <- tau * target + (1 - tau) * online, parameters only."""
    if model.target is None:
        raise MissingTarget("no BYOL target to update")
    online = list(model.blocks) + [model.ssl_head["projector"]]
    target = list(model.target.blocks) + [model.target.projector]
    for o, t in zip(online, target):
        for po, pt in zip(_module_params(o), _module_params(t)):
            pt.data = tau * pt.data + (1.0 - tau) * po.data
    return model


def _module_params(module) -> list[Tensor]:
    if hasattr(module, "weight"):  # ConvBlock
        return [module.weight, module.bn.gamma, module.bn.beta]
    if hasattr(module, "linear"):  # DenseBlock
        return [module.linear.weight, module.bn.gamma, module.bn.beta]
    return [module.first.weight, module.bn.gamma, module.bn.beta, module.second.weight, module.second.bias]


def ssl_loss(model: Model, x: Tensor, cfg: SSLTaskConfig, rng=0) -> Tensor:
    if cfg.kind == "rotation":
        return ssl_loss_rotation(model, x)
    return ssl_loss_byol(model, x, cfg, rng)


def joint_loss(ce: Tensor, ssl: Tensor, lam: float) -> Tensor:
    """ce + lam * ssl."""
    return T.add(ce, T.scale(ssl, lam))


def main_loss(model: Model, x: Tensor, y: np.ndarray) -> Tensor:
    """Cross-entropy for classification, MSE against targets for regression."""
    out = classify(model, backbone_forward(model, x))
    if model.arch.regression:
        return T.mse(out, Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1)))
    return T.softmax_ce(out, y)
