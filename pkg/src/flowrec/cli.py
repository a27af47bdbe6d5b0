"""Command-line entry points: train, evaluate, recommend, ablate."""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from flowrec.config import ConfigError, RunConfig
from flowrec.dataset import DatasetError, leave_one_out_split, load_interactions
from flowrec.evaluation import MetricsReport, config_fingerprint, evaluate_split
from flowrec.inference import encode_prefixes, rank_items, reverse_sample
from flowrec.seqmodel import load_checkpoint
from flowrec.training import TrainingDiverged, build_model, fit

logger = logging.getLogger("flowrec")

ABLATION_PRESETS: dict[str, tuple[str, tuple[str, ...]]] = {
    "loss_target": ("train.loss_target", ("x_prediction", "v_prediction")),
    "trajectory": ("flow.trajectory", ("straight", "cosine")),
    "sampler": ("flow.timestep", ("mode", "uniform", "logit_normal", "cosmap")),
    "s": ("flow.s", ("-1.0", "-0.5", "0.0", "0.4", "1.0", "1.6")),
    "delta": ("flow.delta", ("0.0", "0.0001", "0.001", "0.01", "0.1")),
}


class CliError(RuntimeError):
    pass


def blob_hash(path: str | Path) -> str:
    """Content hash in the same form git uses for blobs."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    return cfg.replace(**overrides) if overrides else cfg


def _require_data(cfg: RunConfig) -> Path:
    if not cfg.data.path:
        raise ConfigError("missing config key: data.path")
    path = Path(cfg.data.path)
    if not path.exists():
        raise CliError(f"data.path does not exist: {path}")
    return path


def _evaluate_and_write(model, cfg: RunConfig, view, out_dir: Path, dataset_name: str) -> MetricsReport:
    report = evaluate_split(
        model, view, cfg.sampler, loss_target=cfg.train.loss_target,
        trajectory=cfg.flow.trajectory, delta=cfg.flow.delta,
        fingerprint=config_fingerprint(cfg.to_ini()),
    )
    (out_dir / "metrics.tsv").write_text(report.to_table())
    (out_dir / "metrics.kv").write_text(report.to_kv(dataset_name))
    return report


def train_run(cfg: RunConfig) -> tuple[Path, MetricsReport]:
    """Train one configuration into ``cfg.out_dir`` and score the test split."""
    data = _require_data(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    (out / "inputs.sha1").write_text(f"{blob_hash(data)}\t{data.name}\n")
    ds = load_interactions(data, cfg.data.format)
    split = leave_one_out_split(ds, cfg.train.augment_window)
    model = build_model(ds.num_items, cfg)
    fit(model, split, cfg, out_dir=out)
    return out, _evaluate_and_write(model, cfg, split.test, out, data.name)


def _checkpoint_path(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if args.run:
        run = Path(args.run)
        for name in ("best.ckpt", "last.ckpt"):
            if (run / name).exists():
                return run / name
        raise CliError(f"no checkpoint in {run}")
    raise CliError("pass --run or --checkpoint")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out, report = train_run(cfg)
    print(report.to_table(), end="")
    logger.info("run written to %s", out)
    return 0


def cmd_evaluate(args) -> int:
    ckpt = _checkpoint_path(args)
    model, cfg, _ = load_checkpoint(ckpt)
    if args.steps is not None:
        cfg = cfg.replace(**{"sampler.steps": args.steps})
    data = _require_data(cfg)
    split = leave_one_out_split(load_interactions(data, cfg.data.format), cfg.train.augment_window)
    view = split.test if args.split == "test" else split.valid
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    report = _evaluate_and_write(model, cfg, view, out, data.name)
    print(report.to_table(), end="")
    return 0


def cmd_recommend(args) -> int:
    model, cfg, _ = load_checkpoint(_checkpoint_path(args))
    if args.seed is not None:
        cfg = cfg.replace(**{"sampler.seed": args.seed})
    ds = load_interactions(_require_data(cfg), cfg.data.format)
    if args.user is not None:
        users = ds.user_index()
        if args.user not in users:
            raise CliError(f"unknown user: {args.user}")
        history = ds.users[users[args.user]].sequence.tolist()
    else:
        index = ds.item_index()
        raw = [s.strip() for s in args.items.split(",") if s.strip()]
        unknown = [s for s in raw if s not in index]
        if unknown:
            raise CliError(f"unknown item ids: {','.join(unknown)}")
        history = [index[s] for s in raw]
    ids = encode_prefixes([history], cfg.model.max_len, ds.num_items)
    x_hat = reverse_sample(model, ids, cfg.sampler, loss_target=cfg.train.loss_target,
                           trajectory=cfg.flow.trajectory, delta=cfg.flow.delta)
    for rank, (item, score) in enumerate(rank_items(x_hat[0], model.item_embeddings(), args.k), 1):
        print(f"{rank}\t{ds.item_ids[item]}\t{score:.6f}")
    return 0


def cmd_ablate(args) -> int:
    base = _load_config(args)
    key, values = ABLATION_PRESETS[args.preset]
    if args.values:
        values = tuple(v.strip() for v in args.values.split(","))
    root = Path(base.out_dir)
    rows = []
    for value in values:
        cfg = base.replace(**{key: value, "out_dir": str(root / f"{key}={value}")})
        _, report = train_run(cfg)
        rows.append((value, report))
        logger.info("%s=%s done: HR@10 %.2f%%", key, value, 100 * report.hr[10])
    header = [key] + [name for name, _ in rows[0][1].rows()]
    lines = ["\t".join(header)]
    lines += ["\t".join([value] + [f"{v:.2f}" for _, v in report.rows()]) for value, report in rows]
    table = "\n".join(lines) + "\n"
    root.mkdir(parents=True, exist_ok=True)
    (root / f"ablation_{args.preset}.tsv").write_text(table)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowrec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. flow.s=0.4")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory")

    p = sub.add_parser("train", help="train a model into a run directory")
    config_args(p)
    p.set_defaults(func=cmd_train)

    def ckpt_args(p):
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--run", help="run directory")
        group.add_argument("--checkpoint", help="checkpoint file")

    p = sub.add_parser("evaluate", help="score a checkpoint on the held-out split")
    ckpt_args(p)
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--steps", type=int, help="override the Euler step count")
    p.add_argument("--out", help="directory for metrics files")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-k items for a user or an item sequence")
    ckpt_args(p)
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--items", help="comma-separated raw item ids, oldest first")
    who.add_argument("--user", help="raw user id; their full history is used")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("ablate", help="train and compare one factor's variants")
    config_args(p)
    p.add_argument("--preset", choices=sorted(ABLATION_PRESETS), required=True)
    p.add_argument("--values", help="comma-separated values replacing the preset grid")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CliError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"flowrec {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
