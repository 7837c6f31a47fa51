"""Command-line entry point: ``unifier {generate,train,score,report}``.

Exit codes: 0 success, 2 user or configuration error, 3 internal invariant
violation. ``UNIFIER_OUT`` overrides the configured output directory;
an explicit ``--out`` flag overrides both.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .config import RunConfig, load_config, set_override
from .exceptions import ConfigError, ContractError, IntegrityError, ProtocolError, ShapeError

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 2, 3

log = logging.getLogger("unifier")

# flag -> dotted config key
FLAG_FIELDS = {
    "mode": "mode",
    "T": "T",
    "order_seed": "order_seed",
    "threshold": "threshold",
    "depth": "model.depth",
    "d1": "model.d1",
    "d2": "model.d2",
    "heads": "model.heads",
    "patch": "model.patch",
    "c_max": "model.c_max",
    "tau": "vcc.tau",
    "lambda_vcc": "vcc.lambda_vcc",
    "variant": "vcc.variant",
    "prototype_grad": "vcc.prototype_grad",
    "kl_direction": "vcc.kl_direction",
    "epochs_initial": "schedule.epochs_initial",
    "epochs_later": "schedule.epochs_later",
    "base_lr": "schedule.base_lr",
    "warmup_frac": "schedule.warmup_frac",
    "batch_size": "schedule.batch_size",
    "head_lr_scale": "schedule.head_lr_scale",
    "pretrain_samples": "schedule.pretrain_samples",
    "pretrain_epochs": "schedule.pretrain_epochs",
    "n_train": "data.n_train",
    "n_test": "data.n_test",
    "data_seed": "data.data_seed",
    "dataset_dir": "data.dataset_dir",
}
FLAG_TYPES = {"mode": str, "variant": str, "prototype_grad": str, "kl_direction": str, "dataset_dir": str}


def _add_config_flags(p):
    p.add_argument("--config", help="YAML config file (defaults are used for missing keys)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set model.d1=32")
    p.add_argument("--seed", type=int, action="append", dest="seeds", help="run seed (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--print-config", action="store_true", default=argparse.SUPPRESS,
                   help="print the effective config as YAML and exit")
    for flag, key in FLAG_FIELDS.items():
        typ = FLAG_TYPES.get(flag)
        p.add_argument(f"--{flag.replace('_', '-')}" if flag != "T" else "--T", dest=flag, default=None,
                       type=typ or str, help=f"sets {key}")


def build_parser():
    parser = argparse.ArgumentParser(prog="unifier", description="Continual multi-scenario VQA toolkit.")
    parser.add_argument("--print-config", action="store_true", help="print the effective config as YAML and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    g = sub.add_parser("generate", help="write per-scenario train/test JSONL datasets")
    _add_config_flags(g)

    t = sub.add_parser("train", help="run the continual protocol and write run records")
    _add_config_flags(t)
    t.add_argument("--jobs", type=int, default=1, help="parallel seeded runs")

    s = sub.add_parser("score", help="score a prediction file")
    s.add_argument("predictions", help="JSON records with prediction (and ground_truth unless GT is given)")
    s.add_argument("ground_truth", nargs="?", help="JSON records with ground_truth, joined on sample_id and kind")
    s.add_argument("--out", help="directory for score.json and score.csv")

    r = sub.add_parser("report", help="summarise run record CSVs into a CSV and SVG charts")
    r.add_argument("records", nargs="+", help="RunRecord CSV files")
    r.add_argument("--out", help="output directory")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for flag, key in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg = set_override(cfg, key, value)
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", field=item)
        key, value = item.split("=", 1)
        cfg = set_override(cfg, key.strip(), value)
    if getattr(args, "seeds", None):
        cfg.seeds = list(args.seeds)
    if os.environ.get("UNIFIER_OUT"):
        cfg.out_dir = os.environ["UNIFIER_OUT"]
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def cmd_generate(cfg):
    from .synth import dataset_checksum, generate_dataset, write_jsonl

    cfg.validate()
    root = os.path.join(cfg.out_dir, "data")
    manifest = {"data_seed": cfg.data.data_seed, "scenarios": {}}
    for scen in cfg.data.scenarios:
        train, test = generate_dataset(scen, cfg.data.n_train, cfg.data.n_test, cfg.data.data_seed)
        write_jsonl(train.samples, os.path.join(root, scen, "train.jsonl"))
        write_jsonl(test.samples, os.path.join(root, scen, "test.jsonl"))
        manifest["scenarios"][scen] = {
            "train": {"n": len(train), "sha256": dataset_checksum(train.samples)},
            "test": {"n": len(test), "sha256": dataset_checksum(test.samples)},
        }
        print(f"{scen}: {len(train)} train / {len(test)} test -> {os.path.join(root, scen)}")
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def _run_one(cfg, seed, out_dir):
    from .harness import run_protocol

    record = run_protocol(cfg, seed=seed, out_dir=out_dir).record
    return record.rows


def _print_table(rows):
    scenarios = sorted({r["scenario"] for r in rows})
    print("step  " + "  ".join(f"{s:>13s}" for s in scenarios))
    for t in sorted({r["step"] for r in rows}):
        cells = {r["scenario"]: r for r in rows if r["step"] == t}
        print(f"{t:4d}  " + "  ".join(f"{cells[s]['vqa']:5.1f} / {cells[s]['f1']:5.1f}" for s in scenarios))


def cmd_train(cfg, jobs=1):
    cfg.validate()
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1", field="jobs")
    out_dir = os.path.join(cfg.out_dir, "runs")
    if jobs == 1 or len(cfg.seeds) == 1:
        results = [_run_one(cfg, seed, out_dir) for seed in cfg.seeds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, [cfg] * len(cfg.seeds), cfg.seeds, [out_dir] * len(cfg.seeds)))
    for seed, rows in zip(cfg.seeds, results):
        print(f"mode={cfg.mode} seed={seed}  (VQA / F1)")
        _print_table(rows)
        print(f"record: {os.path.join(out_dir, f'{cfg.mode}-seed{seed}.csv')}")
    return EXIT_OK


def cmd_score(pred, gt=None, out=None):
    from .scorer import report_csv, score_files

    report = score_files(pred, gt)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    out = out or os.environ.get("UNIFIER_OUT")
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "score.json"), "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(os.path.join(out, "score.csv"), "w", encoding="utf-8") as fh:
            fh.write(report_csv(report))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(paths, out=None):
    from .harness import RunRecord
    from .report import write_report

    records = []
    for path in paths:
        try:
            records.append(RunRecord.from_csv(path))
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}", field=path) from None
    out = out or os.path.join(os.environ.get("UNIFIER_OUT") or "runs", "report")
    for path in write_report(records, out):
        print(path)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.print_config:
            cfg = resolve_config(args)
            sys.stdout.write(cfg.to_yaml())
            return EXIT_OK
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USER
        if args.command == "generate":
            return cmd_generate(resolve_config(args))
        if args.command == "train":
            return cmd_train(resolve_config(args), jobs=args.jobs)
        if args.command == "score":
            return cmd_score(args.predictions, args.ground_truth, args.out)
        return cmd_report(args.records, args.out)
    except ConfigError as exc:
        where = f" [field: {exc.field}]" if exc.field else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_USER
    except (ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (IntegrityError, ProtocolError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - anything unexpected is an internal fault
        log.debug("unhandled", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
