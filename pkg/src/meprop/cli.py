"""Command line entry points: train, bench, report, sweep."""

import argparse
import json
import sys

from .errors import ConfigError
from .harness import ExperimentConfig, bench_backprop, report, run, sweep


def _add_config_flags(parser):
    parser.add_argument("--config", metavar="PATH",
                        help="JSON config file; flags override its fields")
    parser.add_argument("--name")
    parser.add_argument("--task", choices=("mnist_mlp", "synth_lstm", "synth_timing"))
    parser.add_argument("--mode", choices=("baseline", "meprop", "mesimp", "meact"))
    parser.add_argument("--k", type=int)
    parser.add_argument("--hidden", help="comma-separated hidden sizes, e.g. 500,500")
    parser.add_argument("--prune-rate", type=float, dest="prune_rate")
    parser.add_argument("--prune-interval", type=int, dest="prune_interval")
    parser.add_argument("--cycle-epochs", type=int, dest="cycle_epochs")
    parser.add_argument("--simplify-epochs", type=int, dest="simplify_epochs")
    parser.add_argument("--meact-p", type=float, dest="meact_p")
    parser.add_argument("--meact-e", type=int, dest="meact_e")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--selection", choices=("per_example", "unified"))
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--mnist-dir", dest="mnist_dir")
    parser.add_argument("--out", metavar="DIR", dest="out_dir")
    parser.add_argument("--no-timing", action="store_true",
                        help="write zero wall times for byte-reproducible CSVs")


def _config_from_args(args):
    data = {}
    if args.config:
        with open(args.config) as fh:
            data.update(json.load(fh))
    for field in ("name", "task", "mode", "k", "prune_rate", "prune_interval",
                  "cycle_epochs", "simplify_epochs", "meact_p", "meact_e",
                  "epochs", "batch_size", "seed", "selection", "dropout",
                  "mnist_dir", "out_dir"):
        value = getattr(args, field, None)
        if value is not None:
            data[field] = value
    if getattr(args, "hidden", None):
        data["hidden_sizes"] = [int(h) for h in args.hidden.split(",")]
    if getattr(args, "no_timing", False):
        data["measure_time"] = False
    return ExperimentConfig.from_dict(data)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="meprop",
        description="Sparsified-backpropagation training engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    _add_config_flags(p_train)

    p_bench = sub.add_parser("bench", help="time full vs top-k backward passes")
    p_bench.add_argument("--sizes", default="500x500",
                         help="comma-separated NxM layer sizes, e.g. 500x500,4096x4096")
    p_bench.add_argument("--k", default="80", help="comma-separated k values")
    p_bench.add_argument("--reps", type=int, default=25)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", metavar="PATH", dest="out_path",
                         help="also write the rows as JSON")

    p_report = sub.add_parser("report", help="tabulate summary JSON files")
    p_report.add_argument("summaries", nargs="*", metavar="SUMMARY.json")

    p_sweep = sub.add_parser("sweep", help="run one config across seeds")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--seeds", type=int, default=3,
                         help="number of seeds (0..N-1 offsets from --seed)")
    p_sweep.add_argument("--workers", type=int, default=1)

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            config = _config_from_args(args)
            summary, _, _ = run(config)
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "bench":
            sizes = []
            for token in args.sizes.split(","):
                n, _, m = token.partition("x")
                sizes.append((int(n), int(m) if m else int(n)))
            ks = [int(v) for v in args.k.split(",")]
            rows = bench_backprop(sizes, ks, repetitions=args.reps,
                                  seed=args.seed)
            if args.out_path:
                with open(args.out_path, "w") as fh:
                    json.dump(rows, fh, indent=2)
                    fh.write("\n")
            for row in rows:
                print(f"n={row['n']} m={row['m']} k={row['k']}  "
                      f"full={row['full_ms']:.3f}ms  "
                      f"meprop={row['meprop_ms']:.3f}ms  "
                      f"speedup={row['speedup']:.2f}x  "
                      f"flop_ratio={row['flop_ratio']:.4f}")
        elif args.command == "report":
            print(report(args.summaries))
        elif args.command == "sweep":
            config = _config_from_args(args)
            seeds = [config.seed + i for i in range(args.seeds)]
            summary = sweep(config, seeds, workers=args.workers)
            print(json.dumps(
                {key: summary[key] for key in
                 ("seeds", "best_seed", "best_dev_accuracy",
                  "test_accuracy_at_best")},
                indent=2, sort_keys=True))
    except (ConfigError, OSError, ValueError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
