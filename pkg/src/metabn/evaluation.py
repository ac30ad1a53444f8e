"""Test-time adaptation per target domain, metrics and ablation protocols."""

from __future__ import annotations

import contextlib
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Domain, sample_support_query
from .errors import EmptyBatch, EmptySupport, EmptyTestSet, ShapeMismatch, TooFewDomains
from .layers import (
    ConvBlock,
    Mode,
    Model,
    Scope,
    backbone_forward,
    bn_forward,
    classify,
    predict_logits,
    set_mode,
)
from .ssl import SSLTaskConfig
from .tensor import Tensor
from .training import AdaptResult, apply_adaptation, gradient_steps, inner_adapt


# ---- metrics --------------------------------------------------------------


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise EmptyTestSet("no samples to score")
    return float(np.mean(y_true == y_pred))


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean of per-class F1.

    Classes absent from both labels and predictions are skipped; a class with
    no true positives scores 0.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise EmptyTestSet("no samples to score")
    classes = np.union1d(y_true, y_pred)
    scores = []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def pearson_r(y_true, y_pred) -> float:
    a = np.asarray(y_true, dtype=np.float64).ravel()
    b = np.asarray(y_pred, dtype=np.float64).ravel()
    if a.size < 2:
        return float("nan")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


def worst_case(values_by_group: dict) -> float:
    return float(min(values_by_group.values()))


@dataclass
class Metrics:
    accuracy: float = float("nan")
    macro_f1: float = float("nan")
    worst_case_accuracy: float = float("nan")
    pearson_r: float = float("nan")
    worst_case_pearson_r: float = float("nan")
    n_samples: int = 0
    per_domain: dict = field(default_factory=dict)


def compute_metrics(y_true, y_pred, groups=None, regression: bool = False) -> Metrics:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise EmptyTestSet("no samples to score")
    groups = np.zeros(y_true.shape[0], dtype=np.int64) if groups is None else np.asarray(groups)
    m = Metrics(n_samples=int(y_true.shape[0]))
    ids = np.unique(groups)
    if regression:
        m.pearson_r = pearson_r(y_true, y_pred)
        m.worst_case_pearson_r = worst_case({g: pearson_r(y_true[groups == g], y_pred[groups == g]) for g in ids})
        return m
    m.accuracy = accuracy(y_true, y_pred)
    m.macro_f1 = macro_f1(y_true, y_pred)
    m.worst_case_accuracy = worst_case({g: accuracy(y_true[groups == g], y_pred[groups == g]) for g in ids})
    return m


@contextlib.contextmanager
def eval_modes(model: Model):
    saved = [bn.mode for _, bn, _ in model.bn_layers()]
    set_mode(model, Mode.EVAL)
    try:
        yield model
    finally:
        for (_, bn, _), m in zip(model.bn_layers(), saved):
            bn.mode = m


def predict(model: Model, x) -> np.ndarray:
    with eval_modes(model):
        logits = predict_logits(model, x)
    if model.arch.regression:
        return logits[:, 0]
    return logits.argmax(axis=1)


def evaluate_domain(model: Model, x, y, groups=None) -> Metrics:
    """Metrics over a labeled test split using frozen statistics and no grads."""
    if len(y) == 0:
        raise EmptyTestSet("test split is empty")
    return compute_metrics(y, predict(model, x), groups, regression=model.arch.regression)


# ---- adaptation -----------------------------------------------------------


@dataclass
class AdaptConfig:
    alpha: float = 3e-4
    inner_steps: int = 1
    support_size: int = 12
    scope: str = "affine"


def adapt_domain(
    meta_model: Model,
    support,
    cfg: AdaptConfig,
    ssl_cfg: SSLTaskConfig | None = None,
    seed=0,
) -> Model:
    """Clone of ``meta_model`` carrying the SSL-adapted parameters for one domain."""
    if support is None or len(support) == 0:
        raise EmptySupport("support set is empty")
    result = inner_adapt(meta_model, support, cfg.alpha, cfg.scope, cfg.inner_steps, ssl_cfg, seed)
    adapted = apply_adaptation(meta_model.clone(), result)
    set_mode(adapted, Mode.EVAL)
    return adapted


def drop_ssl_head(model: Model) -> Model:
    model.ssl_head = {}
    model.target = None
    return model


def random_derangement(n: int, seed) -> np.ndarray:
    """Uniformly random permutation with no fixed points (rejection sampling)."""
    if n < 2:
        raise TooFewDomains("a derangement needs at least 2 elements")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if np.all(perm != np.arange(n)):
            return perm


def adapt_targets(
    meta_model: Model, targets: Sequence[Domain], cfg: AdaptConfig, ssl_cfg=None, seed=0
) -> dict[int, AdaptResult]:
    """Adapted parameters for each target domain from its own unlabeled support."""
    out = {}
    for d in targets:
        task = sample_support_query(d, cfg.support_size, 0, [int(np.sum(seed)), 11, d.domain_id])
        out[d.domain_id] = inner_adapt(
            meta_model, task.support, cfg.alpha, cfg.scope, cfg.inner_steps, ssl_cfg, [int(np.sum(seed)), d.domain_id]
        )
    return out


def run_matched_shuffle(
    meta_model: Model, targets: Sequence[Domain], cfg: AdaptConfig, ssl_cfg=None, seed=0
) -> dict[str, dict[int, Metrics]]:
    """NoAdapt / NotMatched / Matched evaluation over the target domains."""
    if len(targets) < 2:
        raise TooFewDomains("matched/shuffled comparison needs at least 2 target domains")
    results = adapt_targets(meta_model, targets, cfg, ssl_cfg, seed)
    perm = random_derangement(len(targets), [int(np.sum(seed)), 13])
    table: dict[str, dict[int, Metrics]] = {"NoAdapt": {}, "NotMatched": {}, "Matched": {}}
    for j, d in enumerate(targets):
        xt, yt = d.test
        table["NoAdapt"][d.domain_id] = evaluate_domain(meta_model, xt, yt)
        own = apply_adaptation(meta_model.clone(), results[d.domain_id])
        table["Matched"][d.domain_id] = evaluate_domain(own, xt, yt)
        other = apply_adaptation(meta_model.clone(), results[targets[perm[j]].domain_id])
        table["NotMatched"][d.domain_id] = evaluate_domain(other, xt, yt)
    return table


def mean_accuracy(per_domain: dict[int, Metrics]) -> float:
    return float(np.mean([m.accuracy for m in per_domain.values()]))


# ---- entropy refinement ---------------------------------------------------


def entropy_refine(model: Model, test_batch, lr: float, steps: int = 1, scope: Scope | str = Scope.AFFINE_ONLY) -> np.ndarray:
    """Minimize mean prediction entropy on one batch, updating backbone affines in place.

    AffineOnly keeps the frozen statistics; FullBN normalizes with the batch's
    own statistics.  Returns the logits of the first forward pass, which serve
    as the batch's predictions.
    """
    x = np.asarray(test_batch, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyBatch("entropy refinement got an empty batch")
    scope = Scope(scope)
    if scope is Scope.FULL_BN and x.shape[0] < 2:
        raise EmptyBatch("batch-statistics refinement needs at least 2 samples")
    set_mode(model, Mode.TRAIN if scope is Scope.FULL_BN else Mode.FROZEN)
    for _, p in model.theta():
        p.requires_grad = False
    params = []
    for name, bn, group in model.bn_layers():
        if group == "S":
            params += [bn.gamma, bn.beta]
    xt = Tensor(x)
    first: list[np.ndarray] = []

    def loss_fn():
        logits = classify(model, backbone_forward(model, xt))
        if not first:
            first.append(logits.data.copy())
        return T.neg_entropy(logits)

    gradient_steps(params, loss_fn, lr, steps)
    set_mode(model, Mode.FROZEN)
    return first[0]


def evaluate_with_refinement(
    model: Model, x, y, lr: float, steps: int = 1, scope: Scope | str = Scope.AFFINE_ONLY, batch_size: int = 32
) -> Metrics:
    """Stream the test split in batches, refining before predicting each batch.

    Affine updates accumulate within the domain; the caller passes a fresh
    clone per domain.
    """
    if len(y) == 0:
        raise EmptyTestSet("test split is empty")
    preds = []
    for i in range(0, len(y), batch_size):
        xb = x[i:i + batch_size]
        if Scope(scope) is Scope.FULL_BN and xb.shape[0] < 2:
            xb = x[max(0, i - 1):i + batch_size]
            logits = entropy_refine(model, xb, lr, steps, scope)[-1:]
        else:
            logits = entropy_refine(model, xb, lr, steps, scope)
        preds.append(logits.argmax(axis=1))
    set_mode(model, Mode.EVAL)
    return compute_metrics(y, np.concatenate(preds))


# ---- ablation plans -------------------------------------------------------


@dataclass
class Arm:
    name: str
    scope: str = "affine"
    adapt: bool = True
    assignment: str = "Matched"  # Matched | NotMatched | NoAdapt
    post_refine: str = "None"  # None | EntropyMin
    training: str = "Meta"  # CE | Joint | Meta
    refine_scope: str = "affine"


@dataclass
class AblationPlan:
    arms: list
    seeds: list

    def __post_init__(self):
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ValueError("ablation arm names must be unique")


PRESETS = {
    "table3": [
        Arm("NoAdapt", adapt=False, assignment="NoAdapt"),
        Arm("NotMatched", assignment="NotMatched"),
        Arm("Matched"),
    ],
    "table4": [
        Arm("TENT-BN", adapt=False, assignment="NoAdapt", post_refine="EntropyMin", training="Joint", refine_scope="fullbn"),
        Arm("TENT-Affine", adapt=False, assignment="NoAdapt", post_refine="EntropyMin", training="Joint"),
        Arm("Ours-BN", scope="fullbn"),
        Arm("Ours-Affine"),
        Arm("Ours+TENT-BN", scope="fullbn", post_refine="EntropyMin", refine_scope="fullbn"),
        Arm("Ours+TENT-Affine", post_refine="EntropyMin"),
    ],
    "table5": [
        Arm("1-CE-All-NoAdapt", scope="all", adapt=False, assignment="NoAdapt", training="CE"),
        Arm("2-Joint-All-NoAdapt", scope="all", adapt=False, assignment="NoAdapt", training="Joint"),
        Arm("3-Joint-BN-Adapt", scope="fullbn", training="Joint"),
        Arm("4-Joint-Aff-Adapt", training="Joint"),
        Arm("5-Meta-All-Adapt", scope="all", training="Meta"),
        Arm("6-Meta-Aff-NoAdapt", adapt=False, assignment="NoAdapt"),
        Arm("7-Meta-Aff-Adapt"),
    ],
}


def preset_plan(name: str, seeds: Sequence[int]) -> AblationPlan:
    if name not in PRESETS:
        raise ValueError(f"unknown ablation preset {name!r}")
    return AblationPlan([Arm(**vars(a)) for a in PRESETS[name]], list(seeds))


def run_arm(
    arm: Arm,
    model: Model,
    targets: Sequence[Domain],
    cfg: AdaptConfig,
    ssl_cfg=None,
    seed=0,
    refine_lr: float = 3e-5,
    refine_steps: int = 1,
    refine_batch: int = 32,
) -> dict[int, Metrics]:
    """Evaluate one arm on every target domain given its trained model."""
    acfg = AdaptConfig(cfg.alpha, cfg.inner_steps, cfg.support_size, arm.scope)
    do_adapt = arm.adapt and arm.assignment != "NoAdapt"
    results = adapt_targets(model, targets, acfg, ssl_cfg, seed) if do_adapt else {}
    if arm.assignment == "NotMatched":
        perm = random_derangement(len(targets), [int(np.sum(seed)), 13])
    out = {}
    for j, d in enumerate(targets):
        m = model.clone()
        if do_adapt:
            src = targets[perm[j]].domain_id if arm.assignment == "NotMatched" else d.domain_id
            apply_adaptation(m, results[src])
        xt, yt = d.test
        if arm.post_refine == "EntropyMin":
            out[d.domain_id] = evaluate_with_refinement(m, xt, yt, refine_lr, refine_steps, arm.refine_scope, refine_batch)
        else:
            out[d.domain_id] = evaluate_domain(m, xt, yt)
    return out


# ---- exports --------------------------------------------------------------


def export_features(model: Model, x, y, path) -> np.ndarray:
    """CSV of sample_id, label, f_1..f_d from the pooled backbone output."""
    with eval_modes(model), T.no_grad():
        feats = backbone_forward(model, Tensor(np.asarray(x, dtype=np.float64))).data
    d = feats.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"] + [f"f_{i + 1}" for i in range(d)])
        for i, (lab, row) in enumerate(zip(np.asarray(y), feats)):
            w.writerow([i, int(lab)] + [repr(float(v)) for v in row])
    return feats


def bn_activations(model: Model, x, layer: int, channel: int) -> tuple[np.ndarray, np.ndarray]:
    """Pre-BN and post-BN values of one backbone channel (Eval statistics)."""
    if not 0 <= layer < len(model.blocks):
        raise ShapeMismatch(f"layer {layer} out of range")
    if not 0 <= channel < model.blocks[layer].bn.channels:
        raise ShapeMismatch(f"channel {channel} out of range")
    h = Tensor(np.asarray(x, dtype=np.float64))
    with eval_modes(model), T.no_grad():
        for i, b in enumerate(model.blocks):
            z = T.conv2d_3x3(h, b.weight) if isinstance(b, ConvBlock) else b.linear(h)
            post = bn_forward(z, b.bn)
            if i == layer:
                return z.data[:, channel].ravel(), post.data[:, channel].ravel()
            h = T.relu(post)
    raise AssertionError("unreachable")


def export_bn_histograms(model: Model, x, layer: int, channel: int, path, bins: int = 30) -> dict:
    pre, post = bn_activations(model, x, layer, channel)
    out = {}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "bin", "left", "right", "count"])
        for stage, vals in (("pre", pre), ("post", post)):
            counts, edges = np.histogram(vals, bins=bins)
            out[stage] = counts
            for k in range(bins):
                w.writerow([stage, k, repr(float(edges[k])), repr(float(edges[k + 1])), int(counts[k])])
    return out
