"""Command-line surface: train, eval, export, bench, compare, dump.

Exit codes: 0 success, 1 runtime failure, 2 config/usage error. Every
command is deterministic under a fixed config and seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import modelio, packed, training
from .config import RunConfig, apply_estimator_spec
from .errors import BitgradError, ConfigError
from .networks import build_network, make_estimator
from .training import TrainConfig, checkpoint_load


def _set_threads(n: int | None):
    if not n:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        print("warning: threadpoolctl not installed, --threads ignored", file=sys.stderr)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "estimator", None):
        apply_estimator_spec(cfg, args.estimator)
    if getattr(args, "arch", None):
        cfg.set("model.arch", args.arch)
    if getattr(args, "epochs", None) is not None:
        cfg.set("train.epochs", args.epochs)
    if getattr(args, "data_dir", None):
        cfg.set("data.dir", args.data_dir)
    return cfg


def _load_data(cfg: RunConfig):
    root = data_mod.resolve_data_dir(cfg["data.dir"] or None)
    train_set, test_set = data_mod.load_named(cfg["data.set"], root)
    limit = cfg["data.limit_train"]
    if limit:
        train_set.images = train_set.images[:limit]
        train_set.labels = train_set.labels[:limit]
    if cfg["data.augment"] == "none":
        train_set.augment = "none"
    return train_set, test_set


def _train_config(cfg: RunConfig, seed: int | None = None) -> TrainConfig:
    bbc_lr = cfg["bbc.lr"]
    return TrainConfig(
        optimizer=cfg["train.optimizer"], momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"], lr0=cfg["train.lr0"],
        schedule=cfg["train.schedule"], epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["train.seed"] if seed is None else seed,
        eta_theta=None if bbc_lr < 0 else bbc_lr,
        estimator={"kind": cfg["estimator.kind"], **cfg.estimator_params()},
    ).validate()


def _build(cfg: RunConfig, train_cfg: TrainConfig, in_channels: int):
    est_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0xE57]))
    estimator = make_estimator(cfg["estimator.kind"], cfg.estimator_params(), rng=est_rng)
    return build_network(cfg["model.arch"], estimator, in_channels,
                         cfg["model.num_classes"], seed=train_cfg.seed)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train_cfg = _train_config(cfg)
    train_set, test_set = _load_data(cfg)
    net = _build(cfg, train_cfg, train_set.images.shape[1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved.cfg")
    metrics = training.train(net, train_set, test_set, train_cfg, out_dir=out)
    metrics.save(out / "metrics.csv")
    for row in metrics.rows:
        coeff = "" if row["coefficient"] is None else f" coeff={row['coefficient']:.4f}"
        print(f"epoch {row['epoch']}: loss={row['train_loss']:.4f} "
              f"acc={row['test_acc']:.4f} lr={row['lr']:.5f}{coeff}")
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.bbck'}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    specs = [s.strip() for s in args.estimators.split(",") if s.strip()]
    if not specs:
        raise ConfigError("--estimators must list at least one estimator")
    if len(set(specs)) != len(specs):
        raise ConfigError(f"duplicate estimator entries in {specs}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError("--seeds must list at least one seed")
    train_set, test_set = _load_data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved.cfg")
    lines = ["estimator,seed,final_acc,final_loss"]
    summary = []
    for spec in specs:
        run_cfg = RunConfig(dict(cfg.values))
        apply_estimator_spec(run_cfg, spec)
        accs = []
        for seed in seeds:
            train_cfg = _train_config(run_cfg, seed=seed)
            net = _build(run_cfg, train_cfg, train_set.images.shape[1])
            metrics = training.train(net, train_set, test_set, train_cfg)
            final = metrics.rows[-1]
            accs.append(final["test_acc"])
            lines.append(f"{spec},{seed},{final['test_acc']!r},{final['train_loss']!r}")
            print(f"{spec} seed={seed}: acc={final['test_acc']:.4f}")
        mean = float(np.mean(accs))
        std = float(np.std(accs))
        summary.append(f"{spec},mean,{mean!r},{std!r}")
    csv = "\n".join(lines + summary) + "\n"
    (out / "compare.csv").write_text(csv)
    print(f"wrote {out / 'compare.csv'}")
    return 0


def cmd_export(args) -> int:
    net, _, _, _ = checkpoint_load(args.checkpoint)
    records = modelio.export(net, args.out)
    print(f"wrote {args.out} ({len(records)} records)")
    for row in modelio.size_report(net):
        print(f"  {row['layer']:<14} {row['kind']:<10} fp32={row['fp32_bytes']:>9} "
              f"file={row['payload_bytes']:>9} ratio={row['ratio']:.1f}x")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    train_set, test_set = _load_data(cfg)
    ds = train_set if args.split == "train" else test_set
    magic = Path(args.model).open("rb").read(4)
    if magic == training.CHECKPOINT_MAGIC:
        net, _, _, _ = checkpoint_load(args.model)
        pred = net.predict(ds.images)
        path_kind = "checkpoint (float path)"
    else:
        model = modelio.import_model(args.model)
        pred = model.predict(ds.images)
        path_kind = "model file (packed path)"
    acc = float((pred == ds.labels).mean())
    print(f"{args.split} accuracy {acc:.4f} on {ds.num_samples} samples via {path_kind}")
    return 0


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    rows = packed.benchmark(sizes, rows=args.rows)
    csv = packed.benchmark_csv(rows)
    print(csv, end="")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench_kernels.csv").write_text(csv)
    if args.model:
        model = modelio.import_model(args.model)
        acct = packed.ops_accounting(model.steps, (args.input_size, args.input_size))
        acct_csv = packed.accounting_csv(acct)
        print(acct_csv, end="")
        if out:
            (out / "bench_ops.csv").write_text(acct_csv)
    return 0


def cmd_dump(args) -> int:
    print(modelio.dump(args.model), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bitgrad",
                                description="binary network training and deployment")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS thread count")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="flat key=value config file")
        sp.add_argument("--estimator", default=None,
                        help="estimator spec, e.g. ste or bbc:layers=2:activation=tanh")
        sp.add_argument("--arch", default=None)
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--data-dir", default=None)

    sp = sub.add_parser("train", help="train a network")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("compare", help="estimator x seed accuracy grid")
    common(sp)
    sp.add_argument("--estimators", required=True, help="comma-separated estimator specs")
    sp.add_argument("--seeds", required=True, help="comma-separated integer seeds")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("export", help="write a packed model file from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export)

    sp = sub.add_parser("eval", help="accuracy of a checkpoint or packed model")
    common(sp)
    sp.add_argument("--model", required=True, help="checkpoint .bbck or model .bbcm")
    sp.add_argument("--split", default="test", choices=("train", "test"))
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("bench", help="packed vs float throughput and OPs accounting")
    sp.add_argument("--sizes", default="256,1024,4096")
    sp.add_argument("--rows", type=int, default=128)
    sp.add_argument("--model", default=None, help="model file for per-layer accounting")
    sp.add_argument("--input-size", type=int, default=28)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("dump", help="print a model file's header and records")
    sp.add_argument("--model", required=True)
    sp.set_defaults(fn=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (BitgradError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
