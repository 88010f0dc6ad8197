"""Command-line front end for the pipeline.

Verbs: gen, pretrain, probe, supervised, baseline, eval, sweep, report.
Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .dsp import fit_channel_stats
from .harness import (
    SCALES,
    ConfigError,
    StageError,
    baseline_stage,
    ensure_dataset,
    load_run_config,
    load_split_arrays,
    low_data_sweep,
    make_config,
    pretrain_all_stage,
    pretrain_stage,
    probe_stage,
    run_pipeline,
    supervised_stage,
    validate_report,
)
from .nn.encoder import clone_state

log = logging.getLogger("sonolearn.cli")


def _common_flags(parser, suppress):
    """The global flags; `suppress` keeps subparser defaults from clobbering
    values already parsed at the top level."""
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, metavar="PATH",
                        help="INI run config (see README for the schema)")
    parser.add_argument("--seed", type=int, default=d,
                        help="replace the config's seed list with this one seed")
    parser.add_argument("--deterministic", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="zero wall-time in reports for byte-identical output")
    parser.add_argument("--scale", choices=SCALES, default=d,
                        help="preset: desk (default) or paper")
    parser.add_argument("--out", default=d, metavar="DIR",
                        help="output root for data/checkpoints/models/reports")
    parser.add_argument("--tasks", default=d, metavar="T1,T2",
                        help="comma-separated task subset")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="log stage progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sonolearn",
        description="Contact-audio behavior learning: synthesize datasets, "
                    "pretrain encoders, fit probes and baselines, evaluate.",
    )
    _common_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _common_flags(p, suppress=True)
        return p

    add("gen", "synthesize the configured datasets")
    add("pretrain", "self-supervised encoder pretraining")
    add("probe", "pretrain (or reuse) encoders and fit linear probes")
    p_sup = add("supervised", "train the end-to-end supervised baseline")
    p_sup.add_argument("--augment", action="store_true",
                       help="apply random-resize-crop augmentation")
    p_base = add("baseline", "fit the random or oracle baseline")
    p_base.add_argument("--kind", choices=("random", "oracle"), required=True)
    add("eval", "run the full pipeline and write the evaluation report")
    add("sweep", "low-data sweep: nested train slices, probe vs supervised")
    p_rep = add("report", "validate and summarize an existing report file")
    p_rep.add_argument("path", help="path to a report JSON file")
    return parser


def _build_config(args):
    overrides = {}
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    if getattr(args, "tasks", None):
        overrides["tasks"] = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    scale = getattr(args, "scale", None)
    if getattr(args, "config", None):
        return load_run_config(args.config, scale=scale, **overrides)
    return make_config(scale=scale or "desk", **overrides)


def _per_task_data(cfg, task_id):
    ds = ensure_dataset(cfg, task_id)
    train = load_split_arrays(ds, "train")
    stats = fit_channel_stats(train.specs)
    return ds, train, stats


def _pretrained_states(cfg):
    """(task_id, seed) -> encoder state, honoring the cross-task variant."""
    states = {}
    if cfg.variant == "BYOL_ALL":
        data = {t: _per_task_data(cfg, t)[1:] for t in cfg.tasks}
        for seed in cfg.seeds:
            shared = pretrain_all_stage(cfg, seed, data)
            for t in cfg.tasks:
                _, stats = data[t]
                states[(t, seed)] = clone_state(shared).with_stats(stats.mean, stats.std)
        return states, data
    data = {}
    for t in cfg.tasks:
        _, train, stats = _per_task_data(cfg, t)
        data[t] = (train, stats)
        for seed in cfg.seeds:
            states[(t, seed)] = pretrain_stage(cfg, t, seed, train, stats)
    return states, data


def _cmd_gen(args, cfg):
    for task_id in cfg.tasks:
        ds = ensure_dataset(cfg, task_id)
        print(f"{task_id}: {len(ds)} clips in {ds.root}")
    return 0


def _cmd_pretrain(args, cfg):
    _pretrained_states(cfg)
    print(f"pretrained {cfg.variant} encoders for "
          f"{len(cfg.tasks)} task(s) x {len(cfg.seeds)} seed(s) "
          f"under {Path(cfg.out_dir) / 'checkpoints'}")
    return 0


def _cmd_probe(args, cfg):
    states, data = _pretrained_states(cfg)
    for task_id in cfg.tasks:
        train, _ = data[task_id]
        for seed in cfg.seeds:
            model = probe_stage(cfg, task_id, seed, states[(task_id, seed)], train)
            loss = model.meta.get("probe_train_loss")
            print(f"{task_id} seed {seed}: probe train loss {loss:.6f}")
    return 0


def _cmd_supervised(args, cfg):
    for task_id in cfg.tasks:
        _, train, stats = _per_task_data(cfg, task_id)
        for seed in cfg.seeds:
            model = supervised_stage(cfg, task_id, seed, train, stats,
                                     augment=args.augment)
            print(f"{task_id} seed {seed}: {model.kind} trained "
                  f"({cfg.supervised_epochs} epochs)")
    return 0


def _cmd_baseline(args, cfg):
    for task_id in cfg.tasks:
        _, train, _ = _per_task_data(cfg, task_id)
        for seed in cfg.seeds:
            baseline_stage(cfg, task_id, args.kind, train, seed=seed)
            print(f"{task_id} seed {seed}: {args.kind} baseline ready")
            if args.kind == "oracle":
                break  # seed-independent
    return 0


def _print_report(report):
    tasks = list(report["tasks"])
    methods = []
    for entry in report["tasks"].values():
        for m in entry["methods"]:
            if m not in methods:
                methods.append(m)
    print(f"config {report['config_hash']}  scale {report['scale']}  "
          f"seeds {report['seeds']}  wall {report['wall_time_s']:.1f}s")
    name_w = max(len(t) for t in tasks) + 2

    def cell(task_id, col, metric):
        if col == "ground_truth":
            return report["tasks"][task_id].get("ground_truth_dtw")
        return report["tasks"][task_id]["methods"].get(col, {}).get(metric)

    for metric, label in (("mse_raw", "MSE (raw)"),
                          ("dtw_normalized_mean", "normalized DTW")):
        cols = list(methods)
        if metric == "dtw_normalized_mean":
            cols = ["ground_truth"] + cols
        if not any(cell(t, c, metric) is not None for t in tasks for c in cols):
            continue
        print(f"\n{label}:")
        print(" " * name_w + "".join(f"{c:>16}" for c in cols))
        for t in tasks:
            row = "".join(
                f"{v:>16.5f}" if (v := cell(t, c, metric)) is not None
                else f"{'-':>16}" for c in cols
            )
            print(f"{t:<{name_w}}{row}")
    return 0


def _cmd_eval(args, cfg):
    report, path = run_pipeline(cfg)
    _print_report(report)
    print(f"\nreport: {path}")
    return 0


def _cmd_sweep(args, cfg):
    for task_id in cfg.tasks:
        rows = low_data_sweep(cfg, task_id, seed=cfg.seeds[0])
        print(f"\n{task_id}:")
        print(f"{'slice':>8}{'method':>16}{'mse_raw':>14}{'mse_norm':>14}")
        for r in rows:
            print(f"{r['slice']:>8}{r['method']:>16}"
                  f"{r['mse_raw']:>14.5f}{r['mse_normalized']:>14.5f}")
    return 0


def _cmd_report(args, cfg):
    path = Path(args.path)
    if not path.exists():
        raise ConfigError(f"report file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            report = json.load(fh)
        validate_report(report)
    except (ValueError, OSError) as e:
        raise ConfigError(f"invalid report {path}: {e}") from e
    _print_report(report)
    return 0


_HANDLERS = {
    "gen": _cmd_gen,
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "supervised": _cmd_supervised,
    "baseline": _cmd_baseline,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        cfg = _build_config(args)
        return _HANDLERS[args.verb](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(str(e), file=sys.stderr)
        return 3
    except Exception as e:  # operational failure outside a guarded stage
        if getattr(args, "verbose", False):
            traceback.print_exc()
        print(f"stage failure ({args.verb}): {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
