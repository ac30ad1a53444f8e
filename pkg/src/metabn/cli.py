"""Command-line entry point: ``metabn <verb> [--config PATH] [--seed N] [--out DIR] ...``.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric divergence,
5 contract violation.  The thread count is read from ``METABN_NUM_THREADS``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipeline
from .config import RunConfig, dump_config, load_config
from .data import DomainSet, load_dataset, save_dataset
from .errors import (
    ConfigError,
    CorruptFile,
    DivergenceDetected,
    MetaBNError,
    ModeViolation,
    NonFinite,
    ScopeViolation,
)
from .evaluation import Arm, run_arm
from .layers import Mode, Scope, load_checkpoint, save_checkpoint, set_mode, stats_hash, theta_hash
from .ssl import joint_loss, main_loss, ssl_loss
from .tensor import Tensor, no_grad

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE, EXIT_CONTRACT = 0, 2, 3, 4, 5
THREADS_ENV = "METABN_NUM_THREADS"


class ContractViolation(MetaBNError):
    pass


class OutputDir:
    """Exclusive ownership of an output directory through a lock file."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock = self.path / ".lock"

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OSError(f"{self.path} is locked by another run (remove {self.lock} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)

    def log(self, message: str) -> None:
        # timestamps live only here so every other output is reproducible
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        with (self.path / "run.log").open("a") as fh:
            fh.write(f"{stamp} {message}\n")


# ---- helpers --------------------------------------------------------------


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.command == "gen-data":
            cfg.data.spec.seed = args.seed
        cfg.seeds = [args.seed]
    if getattr(args, "scope", None):
        if args.command == "meta-train":
            if Scope(args.scope) is Scope.FULL_BN:
                raise ConfigError("--scope: meta-training supports affine or all")
            cfg.meta.scope = args.scope
    return cfg


def _dataset(args, cfg: RunConfig) -> DomainSet:
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return pipeline.build_dataset(cfg)


def _checkpoint(args):
    if not args.ckpt:
        raise ConfigError("--ckpt: a checkpoint path is required for this command")
    return load_checkpoint(args.ckpt)


def source_loss(model, dataset: DomainSet, cfg: RunConfig) -> float:
    """Joint loss over the pooled source training data with frozen statistics."""
    x = np.concatenate([d.train[0] for d in dataset.sources])
    y = np.concatenate([d.train[1] for d in dataset.sources])
    saved = [bn.mode for _, bn, _ in model.bn_layers()]
    set_mode(model, Mode.EVAL, include_target=True)
    try:
        with no_grad():
            xt = Tensor(x)
            ce = main_loss(model, xt, y)
            aux = ssl_loss(model, xt, cfg.ssl, np.random.default_rng(0))
            value = joint_loss(ce, aux, cfg.joint.lam).item()
    finally:
        for (_, bn, _), mode in zip(model.bn_layers(), saved):
            bn.mode = mode
    return value


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---- verbs ----------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig, out: OutputDir) -> int:
    ds = pipeline.build_dataset(cfg)
    path = out.path / "dataset.mabd"
    save_dataset(ds, path)
    for row in ds.manifest():
        gains = ",".join(f"{g:.3f}" for g in row["gain"])
        print(f"domain {row['domain_id']:>3} {row['role']:<6} n={row['n']} gain=[{gains}]")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train_joint(args, cfg: RunConfig, out: OutputDir) -> int:
    ds = _dataset(args, cfg)
    seed = cfg.seeds[0]
    telemetry = pipeline.telemetry_for(out.path, "telemetry_joint.csv")
    model = pipeline.joint_model(cfg, ds, seed, telemetry)
    set_mode(model, Mode.FROZEN)
    path = out.path / "joint.ckpt"
    save_checkpoint(model, path)
    final = source_loss(model, ds, cfg)
    _write_json(out.path / "train_joint.json", {"final_loss": final, "seed": seed, "theta_hash": theta_hash(model)})
    print(f"final source loss {final!r}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_meta_train(args, cfg: RunConfig, out: OutputDir) -> int:
    ds = _dataset(args, cfg)
    base = _checkpoint(args)
    seed = cfg.seeds[0]
    th_in, st_in = theta_hash(base), stats_hash(base)
    telemetry = pipeline.telemetry_for(out.path, "telemetry_meta.csv")
    model = pipeline.meta_model(cfg, ds, base, seed, telemetry)
    th_out = theta_hash(model)
    path = out.path / "meta.ckpt"
    save_checkpoint(model, path)
    print(f"theta hash in={th_in} out={th_out} equal={th_in == th_out}")
    means = telemetry.epoch_means("meta")
    if means:
        print(f"query loss first epoch mean={means[0]!r} last epoch mean={means[-1]!r}")
    print(f"wrote {path}")
    if Scope(cfg.meta.scope) is not Scope.ALL_PARAMS and (th_in != th_out or st_in != stats_hash(model)):
        raise ContractViolation("theta or running statistics changed during affine meta-training")
    return EXIT_OK


def cmd_adapt_eval(args, cfg: RunConfig, out: OutputDir) -> int:
    ds = _dataset(args, cfg)
    model = _checkpoint(args)
    scope = args.scope or "affine"
    if args.no_adapt:
        arm = Arm("NoAdapt", scope=scope, adapt=False, assignment="NoAdapt")
    else:
        arm = Arm("Matched", scope=scope)
    th, st = theta_hash(model), stats_hash(model)
    rows = []
    for seed in cfg.seeds:
        per_domain = run_arm(
            arm,
            model,
            ds.targets,
            pipeline.adapt_config(cfg, scope),
            cfg.ssl,
            seed,
            cfg.refine_lr,
            cfg.eval.refine_steps,
            cfg.eval.refine_batch,
        )
        rows += pipeline.metric_rows(arm.name, seed, per_domain)
    if theta_hash(model) != th or stats_hash(model) != st:
        raise ContractViolation("evaluation modified the meta model")
    csv_path, json_path = pipeline.write_metrics(rows, out.path)
    print(pipeline.format_table(pipeline.summarize(rows)))
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, out: OutputDir) -> int:
    ds = _dataset(args, cfg)
    joint = load_checkpoint(args.ckpt) if args.ckpt else None
    arms = cfg.arms()
    rows = pipeline.run_ablation(cfg, ds, arms, cfg.seeds, joint)
    csv_path, json_path = pipeline.write_metrics(rows, out.path)
    table = pipeline.format_table(pipeline.summarize(rows))
    (out.path / "table.txt").write_text(table + "\n")
    print(table)
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


VERBS = {
    "gen-data": cmd_gen_data,
    "train-joint": cmd_train_joint,
    "meta-train": cmd_meta_train,
    "adapt-eval": cmd_adapt_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metabn", description="Generate domains, train, adapt and evaluate BN-affine models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="JSON (or YAML) run configuration; defaults apply when omitted")
        p.add_argument("--seed", type=int, help="overrides the configured seeds (dataset seed for gen-data)")
        p.add_argument("--out", help="output directory (defaults to the configured out_dir)")
        if verb != "gen-data":
            p.add_argument("--data", help="dataset file; generated from the config when omitted")
        if verb in ("meta-train", "adapt-eval", "ablate"):
            p.add_argument("--ckpt", help="input checkpoint (joint model for ablate)")
        if verb in ("meta-train", "adapt-eval"):
            p.add_argument("--scope", choices=["affine", "fullbn", "all"])
        if verb == "adapt-eval":
            p.add_argument("--no-adapt", action="store_true", help="evaluate the meta model without adaptation")
    return parser


def _threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        out = OutputDir(args.out or cfg.out_dir)
        threads = _threads()
        with out, threadpool_limits(limits=threads):
            dump_config(cfg, out.path / "config.json")
            out.log(f"start {args.command} argv={sys.argv[1:] if argv is None else list(argv)}")
            code = VERBS[args.command](args, cfg, out)
            out.log(f"done {args.command} exit={code}")
            return code
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DivergenceDetected, NonFinite) as exc:
        return _fail(EXIT_DIVERGENCE, exc)
    except (ContractViolation, ScopeViolation, ModeViolation) as exc:
        return _fail(EXIT_CONTRACT, exc)
    except (OSError, CorruptFile) as exc:
        return _fail(EXIT_IO, exc)
    except MetaBNError as exc:
        return _fail(EXIT_CONFIG, exc)


def _fail(code: int, exc: BaseException) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
