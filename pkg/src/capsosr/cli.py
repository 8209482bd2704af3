"""Command line entry point: ``capsosr <subcommand> ...``.

Every subcommand that builds a model accepts ``--config FILE`` (YAML or JSON)
and repeated ``--set key=value`` overrides of any config key. The data root
defaults to ``$CAPSOSR_DATA_DIR``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config, parse_override


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file of config keys")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")


def _config(args):
    return load_config(args.config, args.overrides)


def _data_for(config, data_dir):
    from .training import prepare_data

    if data_dir is not None:
        config = config.replace(data_dir=str(data_dir))
    return prepare_data(config)


def cmd_splits(args) -> int:
    from .protocol import make_splits, save_splits

    classes = [int(c) for c in args.classes.split(",")] if args.classes else None
    splits = make_splits(args.dataset, args.n_splits, args.n_known, args.seed, classes)
    path = save_splits(splits, args.out)
    for i, s in enumerate(splits):
        print(f"split {i}\tknown={s.known}\tunknown={s.unknown}\topenness={s.openness:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import Checkpoint
    from .training import train

    config = _config(args)
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is not None:
        config = resume.config
    data = _data_for(config, None)
    ckpt = train(config, data, checkpoint=resume, log_path=args.log, until_step=args.until_step)
    ckpt.save(args.out)
    print(json.dumps({"checkpoint": str(args.out), "step": ckpt.step, "last_loss": ckpt.last_loss}, sort_keys=True))
    return 0


def cmd_calibrate(args) -> int:
    from .checkpoint import Checkpoint
    from .experiment import calibrate

    ckpt = Checkpoint.load(args.checkpoint)
    data = _data_for(ckpt.config, args.data_dir)
    calibrate(ckpt, data, report_path=args.report)
    ckpt.save(args.out or args.checkpoint)
    th = ckpt.thresholds
    print(json.dumps({"tau": th.tau, "tau_per_class": th.tau_per_class, "tau_l2": th.tau_l2,
                      "retention": th.retention}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import Checkpoint
    from .experiment import evaluate

    ckpt = Checkpoint.load(args.checkpoint)
    if args.overrides:
        ckpt.config = ckpt.config.replace(**dict(parse_override(o) for o in args.overrides))
    data = _data_for(ckpt.config, args.data_dir)
    report = evaluate(ckpt, data, scores_path=args.scores, report_path=args.metrics)
    print(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    table = run_ablation(args.grid, _config(args), log_dir=args.log_dir)
    path = table.save(args.out)
    sys.stdout.write(table.to_tsv())
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    from .report import make_report

    out = make_report(args.out_dir, scores=args.scores, log=args.log, ablation=args.ablation)
    for name, value in sorted(out.items(), key=lambda kv: kv[0]):
        print(f"{name}\t{value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsosr", description="Capsule-based open-set recognition.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("splits", help="write seeded known/unknown class splits")
    p.add_argument("--dataset", default="mnist")
    p.add_argument("--n-splits", type=int, default=5)
    p.add_argument("--n-known", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", help="comma-separated class ids for datasets without a built-in count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_splits)

    p = sub.add_parser("train", help="train on the known classes and write a checkpoint")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="append JSONL step records here")
    p.add_argument("--resume", help="continue from this checkpoint (its config wins)")
    p.add_argument("--until-step", type=int, help="stop after this global step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit detector thresholds and class Gaussians")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="output checkpoint (default: overwrite)")
    p.add_argument("--report", help="write the retention report JSON here")
    p.add_argument("--data-dir")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate on the open test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scores", help="per-sample CSV output")
    p.add_argument("--metrics", help="append the metrics JSON line here")
    p.add_argument("--data-dir")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override evaluation keys such as detector, score or open_set")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid and write its AUROC table")
    _add_config_args(p)
    p.add_argument("--grid", default="alpha_mk")
    p.add_argument("--out", required=True, help="TSV table path; a JSON with all metrics goes alongside")
    p.add_argument("--log-dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render figures and CSV tables from run artifacts")
    p.add_argument("--scores", help="scores CSV from eval")
    p.add_argument("--log", help="JSONL training log")
    p.add_argument("--ablation", help="TSV table from ablate")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
