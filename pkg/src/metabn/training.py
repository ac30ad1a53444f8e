"""Joint supervised+SSL training and bi-level meta-auxiliary training of BN affines."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Domain, DomainTask, sample_support_query
from .errors import (
    DataExhausted,
    DivergenceDetected,
    EmptyMetaBatch,
    EmptySupport,
    NonFinite,
    ScopeViolation,
)
from .layers import (
    AffineSnapshot,
    Mode,
    Model,
    Scope,
    _target_bns,
    collect_params,
    restore_affine,
    set_mode,
    snapshot_affine,
    stats_hash,
    theta_hash,
)
from .ssl import SSLTaskConfig, ema_update, joint_loss, main_loss, ssl_loss
from .tensor import AdamState, Tensor, adam_step, sgd_step


@dataclass
class JointConfig:
    eta: float = 1e-4
    lam: float = 0.1
    epochs: int = 20
    batch_size: int = 64
    plateau_window: int = 2
    plateau_tol: float = 1e-3


@dataclass
class MetaConfig:
    alpha: float = 3e-4
    delta: float = 3e-5
    eta: float = 1e-4
    meta_batch: int = 4
    lam: float = 0.1
    support_size: int = 12
    query_size: int = 48
    inner_steps: int = 1
    scope: str = "affine"
    outer_order: str = "first"
    outer_reduction: str = "sum"  # "sum" follows the accumulated batch loss; "mean" divides by B
    steps_per_epoch: int | None = None  # None: one pass over the source domains

    def __post_init__(self):
        if min(self.alpha, self.delta, self.eta) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.meta_batch < 1 or self.support_size < 1 or self.inner_steps < 1:
            raise ValueError("meta_batch, support_size and inner_steps must be >= 1")
        if Scope(self.scope) is Scope.THETA_ONLY:
            raise ValueError("meta scope must be affine, fullbn or all")
        if self.outer_order != "first":
            raise ValueError("only the first-order outer update is implemented")
        if self.outer_reduction not in ("sum", "mean"):
            raise ValueError("outer_reduction must be 'sum' or 'mean'")


TELEMETRY_COLUMNS = ("epoch", "phase", "domain_id", "loss_ce", "loss_ssl", "loss_joint", "lr")


class Telemetry:
    """Row collector with optional append-only CSV sink."""

    def __init__(self, path=None):
        self.rows: list[tuple] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None and not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(TELEMETRY_COLUMNS)

    def log(self, epoch, phase, domain_id, ce, ssl, joint, lr) -> None:
        row = (int(epoch), phase, domain_id, float(ce), float(ssl), float(joint), float(lr))
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(v) for v in row])

    def epoch_means(self, phase: str, column: str = "loss_joint") -> list[float]:
        j = TELEMETRY_COLUMNS.index(column)
        by_epoch: dict[int, list[float]] = {}
        for r in self.rows:
            if r[1] == phase:
                by_epoch.setdefault(r[0], []).append(r[j])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


# ---- generic gradient machinery (also used for scalar toy problems) -------


def gradient_steps(params: Sequence[Tensor], loss_fn: Callable[[], Tensor], lr: float, steps: int) -> list[float]:
    """``steps`` rounds of plain gradient descent on ``loss_fn`` over ``params``."""
    losses = []
    for _ in range(steps):
        loss = loss_fn()
        grads = T.grad_of(loss, params)
        losses.append(loss.item())
        sgd_step(params, grads, lr)
    for p in params:
        p.grad = None
    return losses


def fo_meta_gradient(
    params: Sequence[Tensor],
    inner_loss: Callable[[], Tensor],
    outer_loss: Callable[[], Tensor],
    alpha: float,
    inner_steps: int = 1,
) -> list[np.ndarray]:
    """First-order meta-gradient: grad of the outer loss at the adapted point.

    ``params`` are left at their original values on return.
    """
    saved = [p.data.copy() for p in params]
    gradient_steps(params, inner_loss, alpha, inner_steps)
    grads = T.grad_of(outer_loss(), params)
    for p, s in zip(params, saved):
        p.data = s
        p.grad = None
    return grads


def exact_meta_gradient_fd(
    params: Sequence[Tensor],
    inner_loss: Callable[[], Tensor],
    outer_loss: Callable[[], Tensor],
    alpha: float,
    inner_steps: int = 1,
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central differences of outer_loss(inner_adapt(params)); the bi-level oracle."""

    def objective() -> float:
        saved = [p.data.copy() for p in params]
        gradient_steps(params, inner_loss, alpha, inner_steps)
        with T.no_grad():
            val = outer_loss().item()
        for p, s in zip(params, saved):
            p.data = s
        return val

    grads = []
    for p in params:
        base = p.data.copy()
        g = np.zeros_like(base)
        gflat = g.reshape(-1)
        for i in range(base.size):
            # objective() rebinds p.data, so perturb by assignment, not through a view
            shifted = base.copy().reshape(-1)
            shifted[i] += h
            p.data = shifted.reshape(base.shape)
            fp = objective()
            shifted = base.copy().reshape(-1)
            shifted[i] -= h
            p.data = shifted.reshape(base.shape)
            fm = objective()
            gflat[i] = (fp - fm) / (2 * h)
        p.data = base
        grads.append(g)
    return grads


# ---- phase 1: joint training ---------------------------------------------


def _pool(domains: Sequence[Domain]) -> tuple[np.ndarray, np.ndarray]:
    xs = [d.train[0] for d in domains]
    ys = [d.train[1] for d in domains]
    if not xs or sum(len(y) for y in ys) == 0:
        raise DataExhausted("no source training samples")
    return np.concatenate(xs), np.concatenate(ys)


def train_joint(
    model: Model,
    sources: Sequence[Domain] | tuple[np.ndarray, np.ndarray],
    cfg: JointConfig,
    ssl_cfg: SSLTaskConfig,
    seed: int = 0,
    telemetry: Telemetry | None = None,
) -> Model:
    """Adam on CE + lam * SSL over uniformly mixed source mini-batches.

    Updates theta, the affines and the running statistics.  The learning rate
    halves whenever the relative epoch-loss improvement over the plateau
    window drops below ``plateau_tol``.
    """
    x_all, y_all = sources if isinstance(sources, tuple) else _pool(sources)
    if x_all.shape[0] < 2:
        raise DataExhausted("joint training needs at least 2 samples")
    rng = np.random.default_rng(seed)
    set_mode(model, Mode.TRAIN, include_target=True)
    model.freeze_theta = False
    named = model.theta() + model.affine()
    params = [p for _, p in named]
    for p in params:
        p.requires_grad = True
    state = AdamState()
    lr = cfg.eta
    epoch_losses: list[float] = []
    bs = max(2, cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(x_all.shape[0])
        batch_losses = []
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if idx.size < 2:
                continue
            xb, yb = Tensor(x_all[idx]), y_all[idx]
            try:
                ce = main_loss(model, xb, yb)
                if cfg.lam != 0.0:
                    aux = ssl_loss(model, xb, ssl_cfg, rng)
                    loss = joint_loss(ce, aux, cfg.lam)
                else:
                    aux = None
                    loss = ce
                grads = T.grad_of(loss, params)
            except NonFinite as exc:
                raise DivergenceDetected(f"joint training diverged in epoch {epoch}: {exc}") from exc
            adam_step(params, grads, state, lr)
            if model.target is not None:
                ema_update(model, ssl_cfg.ema_tau)
            batch_losses.append(loss.item())
            if telemetry is not None:
                telemetry.log(epoch, "joint", "mixed", ce.item(), aux.item() if aux is not None else 0.0, loss.item(), lr)
        for p in params:
            p.grad = None
        epoch_losses.append(float(np.mean(batch_losses)) if batch_losses else math.nan)
        if not math.isfinite(epoch_losses[-1]):
            raise DivergenceDetected(f"non-finite loss in epoch {epoch}")
        w = cfg.plateau_window
        if len(epoch_losses) > w:
            prev = epoch_losses[-1 - w]
            if (prev - epoch_losses[-1]) / max(abs(prev), 1e-12) < cfg.plateau_tol:
                lr *= 0.5
    model.train_history = epoch_losses
    return model


# ---- phase 2: inner / outer loops ----------------------------------------


def _scoped_params(model: Model, scope: Scope) -> list[Tensor]:
    view = collect_params(model, scope)
    if view.scope is Scope.ALL_PARAMS and model.freeze_theta:
        raise ScopeViolation("scope 'all' updates theta but the model has freeze_theta set")
    return view.tensors


def _prepare(model: Model, scope: Scope) -> list[Tensor]:
    set_mode(model, Mode.TRAIN if scope is Scope.FULL_BN else Mode.FROZEN)
    for _, bn in _target_bns(model.target):
        bn.mode = Mode.EVAL
    params = _scoped_params(model, scope)
    for _, p in model.theta():
        p.requires_grad = scope is Scope.ALL_PARAMS
    for p in params:
        p.requires_grad = True
    return params


def _stats(model: Model) -> dict:
    return {n: (bn.running_mean.copy(), bn.running_var.copy()) for n, bn, _ in model.bn_layers()}


def _restore_stats(model: Model, stats: dict) -> None:
    for n, bn, _ in model.bn_layers():
        bn.running_mean, bn.running_var = stats[n][0].copy(), stats[n][1].copy()


@dataclass
class AdaptResult:
    """Adapted affines plus, for scopes that touch them, adapted stats/theta."""

    affine: AffineSnapshot
    stats: dict | None = None
    theta: dict | None = None
    ssl_losses: list = field(default_factory=list)


def _adapt_in_place(model: Model, support: np.ndarray, alpha: float, scope: Scope, steps: int, ssl_cfg, seed) -> list[float]:
    if support is None or len(support) == 0:
        raise EmptySupport("support set is empty")
    params = _prepare(model, scope)
    rng = np.random.default_rng(seed)
    xs = Tensor(np.asarray(support, dtype=np.float64))
    losses = gradient_steps(params, lambda: ssl_loss(model, xs, ssl_cfg, rng), alpha, steps)
    if scope is Scope.FULL_BN:
        set_mode(model, Mode.FROZEN)
    return losses


def inner_adapt(
    model: Model,
    support: np.ndarray,
    alpha: float,
    scope: Scope | str = Scope.AFFINE_ONLY,
    inner_steps: int = 1,
    ssl_cfg: SSLTaskConfig | None = None,
    seed=0,
) -> AdaptResult:
    """SSL gradient descent on the support set; the input model is left untouched.

    AffineOnly normalizes with the frozen running statistics.  FullBN runs the
    BN layers in Train mode, so the support batches both normalize the
    features and are folded into the running statistics.
    """
    scope = Scope(scope)
    ssl_cfg = ssl_cfg or SSLTaskConfig(kind=model.arch.ssl_kind)
    if scope is Scope.ALL_PARAMS and model.freeze_theta:
        raise ScopeViolation("scope 'all' updates theta but the model has freeze_theta set")
    meta_affine = snapshot_affine(model)
    meta_stats = _stats(model)
    meta_theta = {n: p.data.copy() for n, p in model.theta()}
    modes = [bn.mode for _, bn, _ in model.bn_layers()]
    th_hash = theta_hash(model)
    losses = _adapt_in_place(model, support, alpha, scope, inner_steps, ssl_cfg, seed)
    if scope is not Scope.ALL_PARAMS and theta_hash(model) != th_hash:
        raise ScopeViolation("theta changed during affine adaptation")
    result = AdaptResult(affine=snapshot_affine(model), ssl_losses=losses)
    if scope is Scope.FULL_BN:
        result.stats = _stats(model)
    if scope is Scope.ALL_PARAMS:
        result.theta = {n: p.data.copy() for n, p in model.theta()}
    restore_affine(model, meta_affine)
    _restore_stats(model, meta_stats)
    for n, p in model.theta():
        p.data = meta_theta[n]
    for (_, bn, _), m in zip(model.bn_layers(), modes):
        bn.mode = m
    return result


def apply_adaptation(model: Model, result: AdaptResult) -> Model:
    restore_affine(model, result.affine)
    if result.stats is not None:
        _restore_stats(model, result.stats)
    if result.theta is not None:
        for n, p in model.theta():
            p.data = result.theta[n].copy()
    return model


def _query_loss(model: Model, task: DomainTask, lam: float, ssl_cfg, rng) -> tuple[Tensor, Tensor, Tensor]:
    xq = Tensor(task.query_x)
    ce = main_loss(model, xq, task.query_y)
    aux = ssl_loss(model, xq, ssl_cfg, rng)
    return ce, aux, joint_loss(ce, aux, lam)


def meta_step(
    model: Model,
    tasks: Sequence[DomainTask],
    cfg: MetaConfig,
    ssl_cfg: SSLTaskConfig | None = None,
    seed=0,
    telemetry: Telemetry | None = None,
    epoch: int = 0,
) -> Model:
    """One outer update of the meta parameters from a batch of domain tasks.

    Per task: adapt on the support with the SSL loss, then take the gradient of
    the joint loss on the query at the adapted point.  The gradients are
    summed over tasks (in domain-id order) and applied to the original
    parameters with step ``delta``.
    """
    if not tasks:
        raise EmptyMetaBatch("meta batch is empty")
    scope = Scope(cfg.scope)
    ssl_cfg = ssl_cfg or SSLTaskConfig(kind=model.arch.ssl_kind)
    params = _prepare(model, scope)
    meta_values = [p.data.copy() for p in params]
    meta_stats = _stats(model)
    total = [np.zeros_like(p.data) for p in params]
    for task in sorted(tasks, key=lambda t: t.domain_id):
        task_seed = [int(s) for s in np.atleast_1d(seed)] + [int(task.domain_id)]
        _adapt_in_place(model, task.support, cfg.alpha, scope, cfg.inner_steps, ssl_cfg, task_seed)
        params = _prepare(model, scope)
        set_mode(model, Mode.FROZEN)
        rng = np.random.default_rng(task_seed + [1])
        ce, aux, loss = _query_loss(model, task, cfg.lam, ssl_cfg, rng)
        grads = T.grad_of(loss, params)
        for acc, g in zip(total, grads):
            acc += g
        for p, v in zip(params, meta_values):
            p.data = v.copy()
            p.grad = None
        _restore_stats(model, meta_stats)
        if telemetry is not None:
            telemetry.log(epoch, "meta", task.domain_id, ce.item(), aux.item(), loss.item(), cfg.delta)
    if cfg.outer_reduction == "mean":
        total = [g / len(tasks) for g in total]
    sgd_step(params, total, cfg.delta)
    set_mode(model, Mode.FROZEN)
    return model


def meta_train(
    model: Model,
    sources: Sequence[Domain],
    cfg: MetaConfig,
    epochs: int,
    ssl_cfg: SSLTaskConfig | None = None,
    seed: int = 0,
    telemetry: Telemetry | None = None,
) -> Model:
    """Repeated meta steps over meta-batches of distinct source domains.

    Theta is frozen and the running statistics stay fixed throughout; for
    scope AffineOnly both are checked by hash on exit.
    """
    scope = Scope(cfg.scope)
    if scope is not Scope.ALL_PARAMS:
        model.freeze_theta = True
    set_mode(model, Mode.FROZEN)
    if epochs <= 0:
        return model
    if len(sources) == 0:
        raise EmptyMetaBatch("no source domains")
    th, st = theta_hash(model), stats_hash(model)
    rng = np.random.default_rng([seed, 7])
    b = min(cfg.meta_batch, len(sources))
    steps = cfg.steps_per_epoch or math.ceil(len(sources) / b)
    for epoch in range(epochs):
        for step in range(steps):
            chosen = rng.choice(len(sources), size=b, replace=False)
            tasks = [
                sample_support_query(
                    sources[i], cfg.support_size, cfg.query_size, [seed, epoch, step, int(sources[i].domain_id)]
                )
                for i in chosen
            ]
            meta_step(model, tasks, cfg, ssl_cfg, [seed, epoch, step], telemetry, epoch)
    if scope is Scope.AFFINE_ONLY and (theta_hash(model) != th or stats_hash(model) != st):
        raise ScopeViolation("theta or running statistics changed during affine meta-training")
    return model
