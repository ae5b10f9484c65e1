"""Command line: ``amsnet {check,train,eval,ablate,gen-data}``.

Exit codes: 0 success, 1 failed checks, 2 usage or configuration error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from typing import List, Optional

from ..errors import AmsError, ConfigError, InputError, NumericalError
from .config import TrainConfig

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3
MAX_RANK = 20


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args) -> TrainConfig:
    base = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config} not found")
        base = TrainConfig.from_json(args.config).to_dict()
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        base[key.strip()] = _parse_value(value)
    for key in ("seed", "variant", "epochs", "precision", "group_count"):
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    return TrainConfig.from_dict(base)


def _load_data(args, cfg):
    from .data import load_datasets
    from .train import make_data
    return load_datasets(args.data) if getattr(args, "data", None) else make_data(cfg)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_log_csv(path, log):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss", "cls", "tri"])
        for e in log:
            w.writerow([e["epoch"], repr(e["lr"]), repr(e["loss"]), repr(e["cls"]), repr(e["tri"])])


def _cmd_check(args) -> int:
    from .checks import run_checks
    return EXIT_OK if run_checks() else EXIT_FAILED


def _cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .train import evaluate, train
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    data = _load_data(args, cfg)
    result = train(cfg, data, progress=None if args.quiet else
                   lambda e: print(f"epoch {e['epoch']:3d} lr={e['lr']:.3e} loss={e['loss']:.4f} "
                                   f"cls={e['cls']:.4f} tri={e['tri']:.4f}", file=sys.stderr))
    save_checkpoint(result.checkpoint, os.path.join(args.out, "model.ckpt"))
    metrics = {"config": cfg.to_dict(), "log": result.log}
    if result.test_set is not None:
        report = evaluate(result.checkpoint, result.test_set)
        metrics["unseen_domain"] = result.test_set.domain
        metrics["eval"] = report.to_dict(MAX_RANK)
        report.to_csv(os.path.join(args.out, "eval.csv"), MAX_RANK)
        print(f"unseen domain {result.test_set.domain}: mAP={report.map:.4f} "
              f"R1={report.rank(1):.4f}")
    _write_json(os.path.join(args.out, "metrics.json"), metrics)
    _write_log_csv(os.path.join(args.out, "metrics.csv"), result.log)
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate
    ckpt = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(ckpt.config)
    datasets = _load_data(args, cfg)
    domain = cfg.test_domain if args.domain is None else args.domain
    match = [d for d in datasets if d.domain == domain]
    if not match:
        raise InputError(f"domain {domain} not in the data")
    report = evaluate(ckpt, match[0], splits=args.splits, allow_seen_domain=args.allow_seen_domain)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "eval.json"), dict(report.to_dict(MAX_RANK), domain=domain))
    report.to_csv(os.path.join(args.out, "eval.csv"), MAX_RANK)
    print(f"domain {domain}: mAP={report.map:.4f} R1={report.rank(1):.4f}")
    return EXIT_OK


def _parse_seeds(text: str):
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    return int(text)


def _cmd_ablate(args) -> int:
    from .ablate import ablate, group_sweep
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    seeds = _parse_seeds(args.seeds)

    def progress(label, cell):
        status = cell["status"] if cell["status"] != "ok" else f"R1={cell['rank1']:.3f} mAP={cell['map']:.3f}"
        print(f"{label} seed={cell['seed']}: {status}", file=sys.stderr)

    variants = [v for v in args.variants.split(",") if v.strip()]
    table = ablate(variants, cfg, seeds, progress)
    table.to_csv(os.path.join(args.out, "ablation.csv"))
    table.to_json(os.path.join(args.out, "ablation.json"))
    print(table.to_csv(), end="")
    if args.groups:
        groups = [int(g) for g in args.groups.split(",")]
        widths = [int(w) for w in args.sweep_widths.split(",")] if args.sweep_widths else None
        sweep = group_sweep(cfg, groups, seeds, args.sweep_variant, widths, progress)
        sweep.to_csv(os.path.join(args.out, "group_sweep.csv"))
        sweep.to_json(os.path.join(args.out, "group_sweep.json"))
        print(sweep.to_csv(), end="")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    from .data import export_datasets
    from .train import make_data
    cfg = _load_config(args)
    path = export_datasets(make_data(cfg), args.out)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amsnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config (TrainConfig keys; unknown keys are rejected)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant")
        p.add_argument("--epochs", type=int)
        p.add_argument("--precision", choices=["float32", "float64"])
        p.add_argument("--group-count", dest="group_count", type=int)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("check", help="run invariant, oracle and gradient checks")
    common(p, out_required=False)
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("train", help="train on all but the test domain, then evaluate on it")
    common(p)
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one domain")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--domain", type=int)
    p.add_argument("--splits", type=int)
    p.add_argument("--allow-seen-domain", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="variant table and optional group-count sweep")
    common(p)
    p.add_argument("--variants", default="none,IN_GW,AMS", help="comma separated variant names")
    p.add_argument("--seeds", default="3", help="count or comma separated list (at least 3)")
    p.add_argument("--groups", help="comma separated group counts for the sweep")
    p.add_argument("--sweep-variant", default="IN_GW")
    p.add_argument("--sweep-widths", help="comma separated stage widths for the sweep")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gen-data", help="render the synthetic domains to a directory")
    common(p)
    p.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, InputError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except AmsError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
