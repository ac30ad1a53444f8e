"""End-to-end orchestration shared by the CLI, the estimator and the benchmarks."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import DomainSet, gen_domains
from .evaluation import AdaptConfig, Arm, Metrics, run_arm
from .layers import Model, Scope
from .training import JointConfig, MetaConfig, Telemetry, meta_train, train_joint

METRIC_COLUMNS = ("arm", "domain_id", "seed", "n", "acc", "macro_f1", "wc_acc", "pearson_r")


def build_dataset(cfg: RunConfig) -> DomainSet:
    return gen_domains(cfg.data.spec, cfg.data.num_sources, cfg.data.num_targets)


def new_model(cfg: RunConfig, seed: int) -> Model:
    return Model(cfg.arch(), seed=seed)


def joint_model(cfg: RunConfig, dataset: DomainSet, seed: int, telemetry=None, lam: float | None = None) -> Model:
    jc = JointConfig(**vars(cfg.joint))
    if lam is not None:
        jc.lam = lam
    model = new_model(cfg, seed)
    return train_joint(model, dataset.sources, jc, cfg.ssl, seed=seed, telemetry=telemetry)


def meta_model(
    cfg: RunConfig, dataset: DomainSet, base: Model, seed: int, telemetry=None, scope: str | None = None
) -> Model:
    mc = MetaConfig(**vars(cfg.meta))
    if scope is not None:
        mc.scope = scope
    model = base.clone()
    return meta_train(model, dataset.sources, mc, cfg.meta_epochs, cfg.ssl, seed=seed, telemetry=telemetry)


def adapt_config(cfg: RunConfig, scope: str = "affine", support_size: int | None = None) -> AdaptConfig:
    return AdaptConfig(
        alpha=cfg.meta.alpha,
        inner_steps=cfg.meta.inner_steps,
        support_size=cfg.eval.support_size if support_size is None else support_size,
        scope=scope,
    )


class ModelCache:
    """Lazily trained models per (training scheme, meta scope)."""

    def __init__(self, cfg: RunConfig, dataset: DomainSet, seed: int, joint: Model | None = None):
        self.cfg, self.dataset, self.seed = cfg, dataset, seed
        self.models: dict[tuple, Model] = {}
        if joint is not None:
            self.models[("Joint", None)] = joint

    def get(self, training: str, scope: str) -> Model:
        if training == "CE":
            key = ("CE", None)
            if key not in self.models:
                self.models[key] = joint_model(self.cfg, self.dataset, self.seed, lam=0.0)
            return self.models[key]
        if ("Joint", None) not in self.models:
            self.models[("Joint", None)] = joint_model(self.cfg, self.dataset, self.seed)
        if training == "Joint":
            return self.models[("Joint", None)]
        meta_scope = "all" if Scope(scope) is Scope.ALL_PARAMS else "affine"
        key = ("Meta", meta_scope)
        if key not in self.models:
            self.models[key] = meta_model(self.cfg, self.dataset, self.models[("Joint", None)], self.seed, scope=meta_scope)
        return self.models[key]


def run_ablation(
    cfg: RunConfig, dataset: DomainSet, arms: Sequence[Arm], seeds: Sequence[int], joint: Model | None = None
) -> list[dict]:
    """Every arm on every target domain for every seed, one row per triple."""
    rows = []
    for seed in seeds:
        cache = ModelCache(cfg, dataset, seed, joint)
        for arm in arms:
            model = cache.get(arm.training, arm.scope)
            per_domain = run_arm(
                arm,
                model,
                dataset.targets,
                adapt_config(cfg, arm.scope),
                cfg.ssl,
                seed,
                cfg.refine_lr,
                cfg.eval.refine_steps,
                cfg.eval.refine_batch,
            )
            rows += metric_rows(arm.name, seed, per_domain)
    return rows


def metric_rows(arm: str, seed: int, per_domain: dict[int, Metrics]) -> list[dict]:
    return [
        {
            "arm": arm,
            "domain_id": int(did),
            "seed": int(seed),
            "n": m.n_samples,
            "acc": m.accuracy,
            "macro_f1": m.macro_f1,
            "wc_acc": m.worst_case_accuracy,
            "pearson_r": m.pearson_r,
        }
        for did, m in sorted(per_domain.items())
    ]


def summarize(rows: Sequence[dict]) -> dict:
    """arm -> metric -> mean/std across seeds of the per-seed domain average."""
    out: dict = {}
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    for arm in arms:
        sub = [r for r in rows if r["arm"] == arm]
        seeds = sorted({r["seed"] for r in sub})
        out[arm] = {}
        for metric in ("acc", "macro_f1", "wc_acc", "pearson_r"):
            per_seed = [float(np.mean([r[metric] for r in sub if r["seed"] == s])) for s in seeds]
            out[arm][metric] = {
                "mean": float(np.mean(per_seed)),
                "std": float(np.std(per_seed)),
            }
        out[arm]["n_seeds"] = len(seeds)
    return out


def write_metrics(rows: Sequence[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path, json_path = out_dir / "metrics.csv", out_dir / "summary.json"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_cell(r[c]) for c in METRIC_COLUMNS])
    json_path.write_text(json.dumps(_json_safe(summarize(rows)), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def _cell(v):
    return repr(float(v)) if isinstance(v, float) else v


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def format_table(summary: dict) -> str:
    lines = [f"{'arm':<24} {'acc':>16} {'macro_f1':>16}"]
    for arm, s in summary.items():
        acc, f1 = s["acc"], s["macro_f1"]
        lines.append(
            f"{arm:<24} {100 * acc['mean']:7.2f} ± {100 * acc['std']:5.2f} {100 * f1['mean']:7.2f} ± {100 * f1['std']:5.2f}"
        )
    return "\n".join(lines)


def telemetry_for(out_dir, name: str) -> Telemetry:
    path = Path(out_dir) / name
    if path.exists():
        path.unlink()
    return Telemetry(path)
