"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints (see
conftest.py).  The benchmark tests share one session fixture that trains and
evaluates ``configs/benchmark.json`` for five seeds.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
from sklearn.metrics import f1_score

from metabn import tensor as T
from metabn.cli import main as cli_main
from metabn.config import load_config
from metabn.data import DomainSpec, gen_domains, load_dataset, save_dataset
from metabn.errors import CorruptFile
from metabn.evaluation import PRESETS, Arm, macro_f1, mean_accuracy, pearson_r, run_arm
from metabn.layers import (
    ArchConfig,
    BNState,
    Mode,
    Model,
    backbone_forward,
    bn_forward,
    load_checkpoint,
    save_checkpoint,
    set_mode,
    stats_hash,
    theta_hash,
)
from metabn.pipeline import adapt_config, build_dataset, joint_model, meta_model
from metabn.ssl import joint_loss, main_loss, ssl_loss_rotation
from metabn.tensor import Tensor
from metabn.training import Telemetry, exact_meta_gradient_fd, fo_meta_gradient, gradient_steps

from helpers import assert_grads_match, gradcheck_case
from test_evaluation import f1_oracle, pearson_oracle

ROOT = Path(__file__).resolve().parents[1]
BENCHMARK = ROOT / "configs" / "benchmark.json"
RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])


# ---- 1: gradient fidelity -------------------------------------------------


def test_criterion_01_gradient_fidelity():
    start = time.perf_counter()
    failures = []
    for op in sorted(T.PRIMITIVES):
        for seed in range(100):
            arrays, fn = gradcheck_case(op, seed)
            try:
                assert_grads_match(fn, arrays)
            except AssertionError as exc:
                failures.append(f"{op}/{seed}: {exc}")
    # narrow 3-block backbone: every parameter is checked element-wise, 100 times
    arch = ArchConfig(in_channels=1, image_size=4, widths=(2, 2, 2), num_classes=2, ssl_hidden=2)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 4, 4)))
    y = np.array([0, 1])
    for seed in range(100):
        model = Model(arch, seed=seed)
        set_mode(model, Mode.TRAIN)
        params = [p for _, p in model.theta() + model.affine()]
        for p in params:
            p.requires_grad = True

        def loss(model=model):
            return joint_loss(main_loss(model, x, y), ssl_loss_rotation(model, x), 0.1)

        try:
            _check_composed(loss, params)
        except AssertionError as exc:
            failures.append(f"joint/{seed}: {exc}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    record(1, ok, f"{len(T.PRIMITIVES)} primitives + composed joint loss x 100 seeds, {len(failures)} failures, {elapsed:.1f}s")
    assert not failures, failures[:3]
    assert elapsed < 60


def _check_composed(loss, params, h=1e-6, rel=1e-4, floor=1e-6):
    """Analytic gradients of ``loss`` w.r.t. ``params`` against central differences."""
    analytic = T.grad_of(loss(), params)
    with T.no_grad():
        for k, (p, g) in enumerate(zip(params, analytic)):
            base = p.data.copy()
            numeric = np.zeros(base.size)
            for i in range(base.size):
                for sign in (1.0, -1.0):
                    shifted = base.copy().reshape(-1)
                    shifted[i] += sign * h
                    p.data = shifted.reshape(base.shape)
                    numeric[i] += sign * loss().item() / (2 * h)
            p.data = base
            numeric = numeric.reshape(base.shape)
            err = np.abs(g - numeric)
            bound = rel * np.maximum(np.abs(g), np.abs(numeric)) + floor
            assert (err <= bound).all(), f"param {k}: max err {err.max():.2e}"


# ---- 2: BN semantics ------------------------------------------------------


def test_criterion_02_bn_semantics():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        x = rng.normal(size=(8, 3, 4, 4)) * rng.uniform(0.01, 50) + rng.normal(size=(1, 3, 1, 1)) * 10
        s = BNState.create(3)
        s.gamma.data, s.beta.data = rng.uniform(0.1, 3, 3), rng.normal(size=3)
        out = bn_forward(Tensor(x), s).data
        var = x.var(axis=(0, 2, 3))
        worst = max(
            worst,
            np.abs(out.mean(axis=(0, 2, 3)) - s.beta.data).max(),
            np.abs(out.var(axis=(0, 2, 3)) - s.gamma.data**2 * var / (var + s.eps)).max(),
        )
    moments_ok = worst <= 1e-8

    mu, sigma = np.array([1.5, -2.0]), np.array([0.5, 3.0])
    s = BNState.create(2)
    for _ in range(500):
        bn_forward(Tensor(rng.normal(mu, sigma, size=(32, 2))), s)
    se = sigma / np.sqrt(32 * 19)
    running_ok = bool(np.all(np.abs(s.running_mean - mu) < 3 * se) and np.allclose(s.running_var, sigma**2, rtol=0.1))

    frozen_ok = True
    for mode in (Mode.FROZEN, Mode.EVAL):
        model = Model(ArchConfig(in_channels=2, image_size=6, widths=(3, 4), num_classes=3, ssl_hidden=5), seed=1)
        set_mode(model, mode)
        h = stats_hash(model)
        backbone_forward(model, Tensor(rng.normal(size=(5, 2, 6, 6))))
        frozen_ok &= stats_hash(model) == h
    elapsed = time.perf_counter() - start
    ok = moments_ok and running_ok and frozen_ok and elapsed < 60
    record(2, ok, f"max moment err {worst:.1e}, running stats {'ok' if running_ok else 'off'}, frozen/eval hash {'stable' if frozen_ok else 'CHANGED'}, {elapsed:.1f}s")
    assert ok


# ---- 3: bi-level toy ------------------------------------------------------


def _quad(g, c):
    d = T.add(g, Tensor([-c]))
    return T.scale(T.mean_axis(T.mul(d, d)), 1.0)


def test_criterion_03_bilevel_toy():
    start = time.perf_counter()
    g = Tensor([0.0], requires_grad=True)
    gradient_steps([g], lambda: _quad(g, 2.0), 0.25, 1)
    adapted = g.data[0]
    g = Tensor([0.0], requires_grad=True)
    (fo,) = fo_meta_gradient([g], lambda: _quad(g, 2.0), lambda: _quad(g, 1.0), 0.25)
    example_ok = adapted == 1.0 and fo[0] == 0.0

    # inner target 2, outer target 1, alpha 0.1: gamma~ = 0.8 gamma + 0.4, optimum gamma* = 0.75
    g = Tensor([0.0], requires_grad=True)
    inner, outer = (lambda: _quad(g, 2.0)), (lambda: _quad(g, 1.0))
    steps = 0
    for steps in range(1, 1001):
        (grad,) = exact_meta_gradient_fd([g], inner, outer, 0.1)
        g.data = g.data - 0.5 * grad
        if abs(g.data[0] - 0.75) < 1e-9:
            break
    err = abs(g.data[0] - 0.75)
    elapsed = time.perf_counter() - start
    ok = example_ok and err < 1e-6 and steps <= 1000 and elapsed < 10
    record(3, ok, f"FO example exact={example_ok}, |gamma-0.75|={err:.1e} after {steps} steps, {elapsed:.2f}s")
    assert ok


# ---- benchmark fixture (criteria 4-8) -------------------------------------


@dataclass
class SeedRun:
    acc: dict = field(default_factory=dict)  # arm name -> mean accuracy (percent)
    hashes_ok: bool = True
    query_first: float = float("nan")
    query_last: float = float("nan")


@dataclass
class Benchmark:
    runs: list
    seconds: float

    def mean(self, arm: str) -> float:
        return float(np.mean([r.acc[arm] for r in self.runs]))

    def per_seed(self, arm: str) -> np.ndarray:
        return np.array([r.acc[arm] for r in self.runs])


def _evaluate(cfg, ds, model, arm: Arm, seed: int, support: int | None = None) -> float:
    per_domain = run_arm(
        arm,
        model,
        ds.targets,
        adapt_config(cfg, arm.scope, support),
        cfg.ssl,
        seed,
        cfg.refine_lr,
        cfg.eval.refine_steps,
        cfg.eval.refine_batch,
    )
    return 100.0 * mean_accuracy(per_domain)


@pytest.fixture(scope="session")
def benchmark():
    start = time.perf_counter()
    cfg = load_config(BENCHMARK)
    ds = build_dataset(cfg)
    table4 = {a.name: a for a in PRESETS["table4"]}
    table5 = {a.name: a for a in PRESETS["table5"]}
    runs = []
    for seed in cfg.seeds:
        run = SeedRun()
        joint = joint_model(cfg, ds, seed)
        set_mode(joint, Mode.FROZEN)
        for name in ("3-Joint-BN-Adapt", "4-Joint-Aff-Adapt"):
            run.acc[name] = _evaluate(cfg, ds, joint, table5[name], seed)
        telemetry = Telemetry()
        meta = meta_model(cfg, ds, joint, seed, telemetry)
        means = telemetry.epoch_means("meta")
        run.query_first, run.query_last = means[0], means[-1]
        th, st = theta_hash(meta), stats_hash(meta)
        run.hashes_ok = th == theta_hash(joint) and st == stats_hash(joint)
        run.acc["NoAdapt"] = _evaluate(cfg, ds, meta, Arm("NoAdapt", adapt=False, assignment="NoAdapt"), seed)
        run.acc["NotMatched"] = _evaluate(cfg, ds, meta, Arm("NotMatched", assignment="NotMatched"), seed)
        for size in (1, 4, 12, 32):
            run.acc[f"Matched@{size}"] = _evaluate(cfg, ds, meta, Arm("Matched"), seed, size)
        for name in ("Ours+TENT-Affine", "Ours+TENT-BN"):
            run.acc[name] = _evaluate(cfg, ds, meta, table4[name], seed)
        run.hashes_ok &= theta_hash(meta) == th and stats_hash(meta) == st
        runs.append(run)
        print(f"seed {seed}: " + " ".join(f"{k}={v:.1f}" for k, v in run.acc.items()), flush=True)
    return Benchmark(runs, time.perf_counter() - start)


def test_criterion_04_scope_discipline(benchmark):
    ok = all(r.hashes_ok for r in benchmark.runs)
    record(4, ok, f"theta and running-stat hashes unchanged through meta-train + adapt-eval on {sum(r.hashes_ok for r in benchmark.runs)}/5 seeds")
    assert ok


def test_criterion_05_matched_ordering(benchmark):
    m, n, s = benchmark.mean("Matched@12"), benchmark.mean("NoAdapt"), benchmark.mean("NotMatched")
    ok = m - n >= 2.0 and n - s >= 1.0 and benchmark.seconds < 600
    record(5, ok, f"Matched {m:.2f} / NoAdapt {n:.2f} / NotMatched {s:.2f} (gaps {m - n:+.2f}, {n - s:+.2f}); pipeline {benchmark.seconds:.0f}s")
    assert m - n >= 2.0 and n - s >= 1.0
    assert benchmark.seconds < 600


def test_criterion_06_ablation_directions(benchmark):
    aff, bn = benchmark.mean("4-Joint-Aff-Adapt"), benchmark.mean("3-Joint-BN-Adapt")
    adapted, frozen = benchmark.mean("Matched@12"), benchmark.mean("NoAdapt")
    a_ok, b_ok = aff - bn >= 1.0, adapted - frozen >= 1.0
    ok = a_ok and b_ok and benchmark.seconds < 600
    record(
        6,
        ok,
        f"affine {aff:.2f} vs full-BN {bn:.2f} ({aff - bn:+.2f}, {'ok' if a_ok else 'short'}); "
        f"meta adapted {adapted:.2f} vs not {frozen:.2f} ({adapted - frozen:+.2f}, {'ok' if b_ok else 'short'})",
    )
    assert a_ok, f"affine-only adaptation {aff:.2f} does not beat full-BN {bn:.2f} by 1 point"
    assert b_ok
    assert benchmark.seconds < 600


def test_criterion_07_entropy_refinement(benchmark):
    refined, alone = benchmark.per_seed("Ours+TENT-Affine"), benchmark.per_seed("Matched@12")
    wins = int(np.sum(refined >= alone))
    full, affine = benchmark.mean("Ours+TENT-BN"), benchmark.mean("Ours+TENT-Affine")
    a_ok, b_ok = wins >= 3, full < affine
    record(
        7,
        a_ok and b_ok,
        f"refined >= plain on {wins}/5 seeds ({'ok' if a_ok else 'short'}); "
        f"full-BN refine {full:.2f} vs affine refine {affine:.2f} ({'ok' if b_ok else 'no collapse'})",
    )
    assert a_ok, f"entropy refinement matched or improved only {wins}/5 seeds"
    assert b_ok, f"full-BN refinement {full:.2f} did not degrade relative to affine {affine:.2f}"


def test_criterion_08_support_size(benchmark):
    sizes = (1, 4, 12, 32)
    means = [benchmark.mean(f"Matched@{s}") for s in sizes]
    noadapt = benchmark.mean("NoAdapt")
    monotone = all(b >= a - 0.5 for a, b in zip(means, means[1:]))
    floor_ok = means[0] >= noadapt - 0.5
    curve = ", ".join(f"{s}:{m:.2f}" for s, m in zip(sizes, means))
    record(8, monotone and floor_ok, f"Matched by support size {curve}; NoAdapt {noadapt:.2f}")
    assert monotone, curve
    assert floor_ok, f"support size 1 gives {means[0]:.2f} < NoAdapt {noadapt:.2f} - 0.5"


def test_meta_query_loss_decreases(benchmark):
    drops = [r.query_first - r.query_last for r in benchmark.runs]
    print("query loss first-last per seed: " + " ".join(f"{d:+.4f}" for d in drops))
    assert np.mean(drops) > 0


# ---- 9: metric oracles ----------------------------------------------------


def test_criterion_09_metric_oracles():
    rng = np.random.default_rng(9)
    worst_f1 = worst_sk = worst_r = 0.0
    for _ in range(1000):
        n, k = int(rng.integers(1, 15)), int(rng.integers(2, 6))
        yt, yp = rng.integers(0, k, n), rng.integers(0, k, n)
        f = macro_f1(yt, yp)
        worst_f1 = max(worst_f1, abs(f - f1_oracle(yt.tolist(), yp.tolist())))
        present = np.union1d(yt, yp)
        worst_sk = max(worst_sk, abs(f - f1_score(yt, yp, labels=present, average="macro", zero_division=0)))
        a, b = rng.normal(size=max(n, 2)), rng.normal(size=max(n, 2))
        worst_r = max(worst_r, abs(pearson_r(a, b) - pearson_oracle(a.tolist(), b.tolist())))
    ok = max(worst_f1, worst_sk, worst_r) <= 1e-12
    record(9, ok, f"max deviation macro-F1 {worst_f1:.1e} (sklearn {worst_sk:.1e}), pearson {worst_r:.1e} over 1000 sets")
    assert ok


# ---- 10: determinism and serialization ------------------------------------

TINY = {
    "data": {
        "spec": {"image_size": 8, "samples_per_domain": 48, "channels": 2, "num_classes": 3, "seed": 4},
        "num_sources": 3,
        "num_targets": 2,
    },
    "model": {"widths": [4, 6], "ssl_hidden": 6},
    "joint": {"eta": 0.005, "epochs": 2, "batch_size": 16},
    "meta": {"alpha": 0.01, "delta": 0.002, "support_size": 4, "query_size": 8, "meta_batch": 2},
    "meta_epochs": 2,
    "eval": {"support_size": 4},
    "seeds": [0, 1],
}


def _pipeline(cfg_path: Path, out: Path) -> dict:
    steps = [
        ("gen-data", "data", []),
        ("train-joint", "joint", ["--data", out / "data" / "dataset.mabd"]),
        ("meta-train", "meta", ["--data", out / "data" / "dataset.mabd", "--ckpt", out / "joint" / "joint.ckpt"]),
        ("adapt-eval", "eval", ["--data", out / "data" / "dataset.mabd", "--ckpt", out / "meta" / "meta.ckpt"]),
    ]
    for verb, sub, extra in steps:
        code = cli_main([verb, "--config", str(cfg_path), "--out", str(out / sub)] + [str(e) for e in extra])
        assert code == 0, f"{verb} exited with {code}"
    files = ["data/dataset.mabd", "joint/joint.ckpt", "meta/meta.ckpt", "eval/metrics.csv", "eval/summary.json"]
    return {f: (out / f).read_bytes() for f in files}


def test_criterion_10_determinism_and_serialization(tmp_path):
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    first, second = _pipeline(cfg_path, tmp_path / "a"), _pipeline(cfg_path, tmp_path / "b")
    identical = [f for f in first if first[f] == second[f]]

    ds = gen_domains(DomainSpec(image_size=8, samples_per_domain=40, seed=2), 2, 2)
    save_dataset(ds, tmp_path / "d")
    roundtrip = load_dataset(tmp_path / "d") == ds
    model = load_checkpoint(tmp_path / "a" / "meta" / "meta.ckpt")
    save_checkpoint(model, tmp_path / "m.ckpt")
    roundtrip &= (tmp_path / "m.ckpt").read_bytes() == first["meta/meta.ckpt"]

    rejected = 0
    for name, loader in (("d", load_dataset), ("m.ckpt", load_checkpoint)):
        raw = bytearray((tmp_path / name).read_bytes())
        raw[len(raw) // 3] ^= 0x04
        (tmp_path / f"bad-{name}").write_bytes(bytes(raw))
        try:
            loader(tmp_path / f"bad-{name}")
        except CorruptFile:
            rejected += 1
    ok = len(identical) == len(first) and roundtrip and rejected == 2
    record(10, ok, f"{len(identical)}/{len(first)} artifacts byte-identical across reruns, roundtrips {'exact' if roundtrip else 'DIFFER'}, {rejected}/2 corruptions rejected")
    assert ok
