"""Experiment runner: configuration, training orchestration for the four
modes, the backward-pass microbenchmark, and summary reporting.

Every run is a pure function of (config, seed): data order, parameter
initialization, and dropout draws all derive from the seed, so the
emitted metrics are reproducible byte for byte apart from measured wall
time (and including it when timing is disabled).
"""

import json
import os
import statistics
import time

import numpy as np

from . import activate, simplify
from .checkpoint import save_checkpoint
from .data import (
    BatchIterator,
    load_mnist,
    split_dev,
    synth_linear_timing,
    synth_sequence_task,
)
from .errors import ConfigError
from .layers import MLP, LinearLayer, linear_backward_full, linear_backward_meprop, linear_forward
from .numerics import FlopCounter
from .optim import AdamState
from .recurrent import BiLstmTagger
from .training import (
    evaluate_mlp,
    evaluate_tagger,
    train_mlp_epoch,
    train_tagger_epoch,
)

TASKS = ("mnist_mlp", "synth_lstm", "synth_timing")
MODES = ("baseline", "meprop", "mesimp", "meact")
SELECTIONS = ("per_example", "unified")

_CONFIG_FIELDS = {
    "name": None,
    "task": "mnist_mlp",
    "mode": "baseline",
    "hidden_sizes": (500, 500),
    "k": None,
    "selection": "per_example",
    "prune_rate": None,
    "prune_interval": None,
    "cycle_epochs": 10,
    "simplify_epochs": 5,
    "min_keep": None,
    "meact_p": None,
    "meact_e": None,
    "epochs": 10,
    "batch_size": 10,
    "seed": 0,
    "dropout": 0.0,
    "mnist_dir": None,
    "out_dir": None,
    "measure_time": True,
    "activation": "relu",
    # synthetic-task knobs
    "synth_features": 64,
    "synth_classes": 10,
    "synth_examples": 4000,
    "vocab": 12,
    "seq_len": 12,
    "seq_examples": 2000,
}


class ExperimentConfig:
    """A complete run description; validates mode-required fields."""

    __slots__ = tuple(_CONFIG_FIELDS)

    def __init__(self, **kwargs):
        for field, default in _CONFIG_FIELDS.items():
            value = kwargs.pop(field, default)
            setattr(self, field, value)
        if kwargs:
            raise ConfigError(f"unknown config fields: {sorted(kwargs)}")
        self.hidden_sizes = [int(h) for h in self.hidden_sizes]
        self._validate()

    def _validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.selection not in SELECTIONS:
            raise ConfigError(
                f"selection must be one of {SELECTIONS}, got {self.selection!r}"
            )
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError(f"hidden_sizes must be positive, got {self.hidden_sizes}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.mode in ("meprop", "mesimp"):
            if self.k is None:
                raise ConfigError(f"mode {self.mode!r} requires k")
            if int(self.k) < 1:
                raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.mode == "mesimp":
            if self.prune_rate is None:
                raise ConfigError("mode 'mesimp' requires prune_rate")
            if not 0.0 < float(self.prune_rate) < 1.0:
                raise ConfigError(
                    f"prune_rate must be in (0, 1), got {self.prune_rate}"
                )
            if not 1 <= self.simplify_epochs <= self.cycle_epochs:
                raise ConfigError(
                    f"need 1 <= simplify_epochs <= cycle_epochs, got "
                    f"{self.simplify_epochs}/{self.cycle_epochs}"
                )
        if self.mode == "meact":
            if self.meact_p is None:
                raise ConfigError("mode 'meact' requires meact_p")
            if not 0.0 < float(self.meact_p) < 1.0:
                raise ConfigError(f"meact_p must be in (0, 1), got {self.meact_p}")
            if self.meact_e is None:
                raise ConfigError("mode 'meact' requires meact_e")
            if not 1 <= int(self.meact_e) < self.epochs:
                raise ConfigError(
                    f"meact_e must be >= 1 and below epochs, got {self.meact_e}"
                )
            if self.task == "synth_lstm":
                raise ConfigError("mode 'meact' supports the MLP tasks only")
        if self.task == "mnist_mlp" and self.mnist_dir is None:
            raise ConfigError("task 'mnist_mlp' requires mnist_dir")

    @property
    def label(self):
        if self.name:
            return self.name
        parts = [self.task, self.mode]
        if self.k is not None:
            parts.append(f"k{self.k}")
        parts.append(f"seed{self.seed}")
        return "-".join(parts)

    def to_dict(self):
        return {field: getattr(self, field) for field in _CONFIG_FIELDS}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


CSV_HEADER = ("epoch,split,accuracy,loss,backprop_wall_time_ms,"
              "backprop_flops,hidden_sizes,mean_update")


class MetricsRow:
    __slots__ = ("epoch", "split", "accuracy", "loss", "backprop_wall_time_ms",
                 "backprop_flops", "hidden_sizes", "mean_update")

    def __init__(self, epoch, split, accuracy, loss, backprop_wall_time_ms=0.0,
                 backprop_flops=0, hidden_sizes=(), mean_update=0.0):
        self.epoch = int(epoch)
        self.split = split
        self.accuracy = float(accuracy)
        self.loss = float(loss)
        self.backprop_wall_time_ms = float(backprop_wall_time_ms)
        self.backprop_flops = int(backprop_flops)
        self.hidden_sizes = list(hidden_sizes)
        self.mean_update = float(mean_update)

    def to_csv(self):
        sizes = ";".join(str(s) for s in self.hidden_sizes)
        return (f"{self.epoch},{self.split},{self.accuracy!r},{self.loss!r},"
                f"{self.backprop_wall_time_ms!r},{self.backprop_flops},"
                f"{sizes},{self.mean_update!r}")


def _mnist_path(directory, stem):
    for suffix in (".gz", ""):
        path = os.path.join(directory, stem + suffix)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"missing MNIST file {stem}[.gz] under {directory}")


def load_task_data(config):
    """Returns (train, dev, test) datasets for the configured task."""
    if config.task == "mnist_mlp":
        d = config.mnist_dir
        full = load_mnist(
            _mnist_path(d, "train-images-idx3-ubyte"),
            _mnist_path(d, "train-labels-idx1-ubyte"),
        )
        test = load_mnist(
            _mnist_path(d, "t10k-images-idx3-ubyte"),
            _mnist_path(d, "t10k-labels-idx1-ubyte"),
            split="test",
        )
        train, dev = split_dev(full)
        return train, dev, test
    if config.task == "synth_timing":
        n = config.synth_examples
        n_dev = max(n // 5, 1)
        full = synth_linear_timing(
            config.synth_features, config.synth_classes, n + 2 * n_dev,
            config.seed * 7919 + 17,
        )
        from .data import Dataset
        train = Dataset(full.features[:n], full.labels[:n], full.num_classes, "train")
        dev = Dataset(full.features[n:n + n_dev], full.labels[n:n + n_dev],
                      full.num_classes, "dev")
        test = Dataset(full.features[n + n_dev:], full.labels[n + n_dev:],
                       full.num_classes, "test")
        return train, dev, test
    if config.task == "synth_lstm":
        n = config.seq_examples
        n_dev = max(n // 5, 1)
        full = synth_sequence_task(
            config.vocab, config.seq_len, n + 2 * n_dev, config.seed * 7919 + 17,
        )
        from .data import Dataset
        train = Dataset(full.features[:n], full.labels[:n], full.num_classes,
                        "train", vocab=full.vocab)
        dev = Dataset(full.features[n:n + n_dev], full.labels[n:n + n_dev],
                      full.num_classes, "dev", vocab=full.vocab)
        test = Dataset(full.features[n + n_dev:], full.labels[n + n_dev:],
                       full.num_classes, "test", vocab=full.vocab)
        return train, dev, test
    raise ConfigError(f"unknown task {config.task!r}")


def build_model(config, train_data):
    rng = np.random.default_rng(config.seed)
    k = config.k if config.mode == "meprop" else None
    if config.task == "synth_lstm":
        return BiLstmTagger.create(
            train_data.vocab, config.hidden_sizes[0], train_data.num_classes,
            rng, meprop_k=k,
        )
    input_size = train_data.features.shape[1]
    sizes = [input_size] + list(config.hidden_sizes) + [train_data.num_classes]
    return MLP.create(sizes, rng, meprop_k=k, activation=config.activation,
                      dropout_rate=config.dropout)


def run(config):
    """Train per the config; returns the summary dict.

    Writes metrics.csv, summary.json, and model.ckpt under out_dir when
    set (plus pretrain.ckpt and masks.bin for meact runs). The best
    epoch is chosen by dev accuracy and its test accuracy reported.
    """
    train, dev, test = load_task_data(config)
    model = build_model(config, train)
    optimizer = AdamState(model.parameters())
    batch_iter = BatchIterator(train, config.batch_size, config.seed)
    flops = FlopCounter()
    rng = np.random.default_rng([config.seed, 0xD6])
    rows = []
    extras = {}
    is_lstm = config.task == "synth_lstm"
    evaluate = evaluate_tagger if is_lstm else evaluate_mlp

    def emit_epoch(epoch, stats, sizes, mean_update=0.0):
        flops_now = flops.multiply_adds
        delta_flops = flops_now - emit_epoch.last_flops
        emit_epoch.last_flops = flops_now
        dev_loss, dev_acc = evaluate(model, dev)
        test_loss, test_acc = evaluate(model, test)
        rows.append(MetricsRow(epoch, "train", stats.accuracy, stats.loss,
                               stats.backprop_ns / 1e6, delta_flops, sizes,
                               mean_update))
        rows.append(MetricsRow(epoch, "dev", dev_acc, dev_loss,
                               hidden_sizes=sizes))
        rows.append(MetricsRow(epoch, "test", test_acc, test_loss,
                               hidden_sizes=sizes))

    emit_epoch.last_flops = 0

    if config.mode in ("baseline", "meprop"):
        for epoch in range(config.epochs):
            if is_lstm:
                stats = train_tagger_epoch(
                    model, optimizer, batch_iter, epoch, flops=flops,
                    measure_time=config.measure_time,
                )
            else:
                stats = train_mlp_epoch(
                    model, optimizer, batch_iter, epoch,
                    selection=config.selection, flops=flops, rng=rng,
                    measure_time=config.measure_time,
                )
            emit_epoch(epoch, stats, model.hidden_sizes)
    elif config.mode == "mesimp":
        interval = config.prune_interval or len(train)
        min_keep = config.min_keep if config.min_keep is not None \
            else max(config.k, 1)
        prune_cfg = simplify.PruneConfig(
            interval, config.prune_rate, min_keep=min_keep,
            cycle_epochs=config.cycle_epochs,
            simplify_epochs=config.simplify_epochs,
        )

        def on_epoch(report, stats):
            emit_epoch(report.epoch, stats, report.hidden_sizes)

        stage_reports, prune_log = simplify.cycled_train(
            model, optimizer, batch_iter, dev, k=config.k,
            prune_config=prune_cfg, epochs=config.epochs,
            selection=config.selection, flops=flops,
            measure_time=config.measure_time, rng=rng, on_epoch=on_epoch,
        )
        extras["prune_events"] = [
            {"layer": r.layer_id, "before": r.size_before, "after": r.size_after}
            for r in prune_log
        ]
        extras["stage_schedule"] = [r.stage for r in stage_reports]
    elif config.mode == "meact":
        e = int(config.meact_e)

        def on_pretrain_epoch(epoch, stats):
            emit_epoch(epoch, stats, model.hidden_sizes)

        records, _ = activate.pretrain_and_record(
            model, optimizer, train, batch_iter, e, flops=flops,
            measure_time=config.measure_time, on_epoch=on_pretrain_epoch,
        )
        if config.out_dir:
            os.makedirs(config.out_dir, exist_ok=True)
            save_checkpoint(os.path.join(config.out_dir, "pretrain.ckpt"),
                            model, optimizer)
        masks = activate.build_masks(records, float(config.meact_p))
        extras["avg_unmasked_per_example"] = masks.average_unmasked()
        if config.out_dir:
            activate.save_masks(os.path.join(config.out_dir, "masks.bin"), masks)

        def on_masked_epoch(epoch, stats, dev_loss, dev_acc):
            emit_epoch(epoch, stats, model.hidden_sizes, stats.mean_update)

        activate.masked_train(
            model, optimizer, masks, dev, batch_iter, config.epochs - e,
            start_epoch=e, flops=flops, probe=True,
            measure_time=config.measure_time, on_epoch=on_masked_epoch,
        )
    else:
        raise ConfigError(f"unhandled mode {config.mode!r}")

    dev_rows = [r for r in rows if r.split == "dev"]
    best = max(dev_rows, key=lambda r: (r.accuracy, -r.epoch))
    test_at_best = next(
        r for r in rows if r.split == "test" and r.epoch == best.epoch
    )
    summary = {
        "config": config.to_dict(),
        "label": config.label,
        "best_epoch": best.epoch,
        "best_dev_accuracy": best.accuracy,
        "test_accuracy_at_best": test_at_best.accuracy,
        "final_hidden_sizes": list(model.hidden_sizes),
        "total_backprop_ms": sum(
            r.backprop_wall_time_ms for r in rows if r.split == "train"
        ),
        "total_backprop_flops": int(flops.multiply_adds),
        **extras,
    }
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        csv_path = os.path.join(config.out_dir, "metrics.csv")
        with open(csv_path, "w") as fh:
            fh.write(CSV_HEADER + "\n")
            for row in rows:
                fh.write(row.to_csv() + "\n")
        with open(os.path.join(config.out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        save_checkpoint(os.path.join(config.out_dir, "model.ckpt"), model,
                        optimizer)
    return summary, rows, model


def bench_backprop(layer_sizes, k_values, repetitions=25, seed=0):
    """Median wall time of full vs top-k backward for linear layers.

    Only the backward call sits in the timed region; inputs, caches, and
    gradient vectors are prepared outside it. FLOP counts come from the
    library's own counters, so the reported ratio is exact.
    """
    rng = np.random.default_rng(seed)
    results = []
    for n, m in layer_sizes:
        layer = LinearLayer.create(n, m, rng)
        x = rng.standard_normal(m)
        grad = rng.standard_normal(n)
        _, cache = linear_forward(layer, x)
        fc_full = FlopCounter()
        linear_backward_full(layer, cache, grad, fc_full)
        inner = max(1, 2_000_000 // (n * m))
        for k in k_values:
            k_eff = min(int(k), n)
            fc_sparse = FlopCounter()
            linear_backward_meprop(layer, cache, grad, k_eff, fc_sparse)
            for _ in range(3):  # warmup
                linear_backward_full(layer, cache, grad)
                linear_backward_meprop(layer, cache, grad, k_eff)
            t_full, t_sparse = [], []
            for _ in range(repetitions):
                t0 = time.perf_counter_ns()
                for _ in range(inner):
                    linear_backward_full(layer, cache, grad)
                t_full.append((time.perf_counter_ns() - t0) / inner)
                t0 = time.perf_counter_ns()
                for _ in range(inner):
                    linear_backward_meprop(layer, cache, grad, k_eff)
                t_sparse.append((time.perf_counter_ns() - t0) / inner)
            med_full = statistics.median(t_full)
            med_sparse = statistics.median(t_sparse)
            q1f, q3f = np.percentile(t_full, [25, 75])
            q1s, q3s = np.percentile(t_sparse, [25, 75])
            results.append({
                "n": n, "m": m, "k": k_eff,
                "full_ms": med_full / 1e6,
                "full_iqr_ms": (q3f - q1f) / 1e6,
                "meprop_ms": med_sparse / 1e6,
                "meprop_iqr_ms": (q3s - q1s) / 1e6,
                "speedup": med_full / med_sparse,
                "flops_full": fc_full.multiply_adds,
                "flops_meprop": fc_sparse.multiply_adds,
                "flop_ratio": fc_sparse.multiply_adds / fc_full.multiply_adds,
            })
    return results


_REPORT_COLUMNS = (
    ("label", "run"),
    ("task", "task"),
    ("mode", "mode"),
    ("k", "k"),
    ("best_epoch", "best_epoch"),
    ("best_dev_accuracy", "dev%"),
    ("test_accuracy_at_best", "test%"),
    ("total_backprop_ms", "backprop_ms"),
    ("final_hidden_sizes", "sizes"),
)


def report(summary_paths):
    """Render summary JSONs as one aligned text table, sorted by run name."""
    rows = []
    for path in summary_paths:
        with open(path) as fh:
            summary = json.load(fh)
        cfg = summary.get("config", {})
        record = {}
        for key, _ in _REPORT_COLUMNS:
            if key in summary:
                value = summary[key]
            else:
                value = cfg.get(key)
            if key in ("best_dev_accuracy", "test_accuracy_at_best") \
                    and value is not None:
                value = f"{100.0 * value:.2f}"
            elif key == "total_backprop_ms" and value is not None:
                value = f"{value:.1f}"
            elif key == "final_hidden_sizes" and value is not None:
                value = ";".join(str(v) for v in value)
            record[key] = "-" if value is None else str(value)
        rows.append(record)
    rows.sort(key=lambda r: r["label"])
    headers = [title for _, title in _REPORT_COLUMNS]
    keys = [key for key, _ in _REPORT_COLUMNS]
    widths = [
        max(len(header), *(len(r[key]) for r in rows)) if rows else len(header)
        for key, header in zip(keys, headers)
    ]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    for r in rows:
        lines.append(
            "  ".join(r[key].ljust(w) for key, w in zip(keys, widths)).rstrip()
        )
    return "\n".join(lines)


def sweep(config, seeds, workers=1):
    """Run one config across seeds; pick the best by dev accuracy.

    Each seed writes into out_dir/seed_<s>/ when out_dir is set. Returns
    the sweep summary dict.
    """
    seed_list = list(seeds)
    if not seed_list:
        raise ConfigError("sweep needs at least one seed")
    base = config.to_dict()
    results = []

    def run_one(seed):
        cfg_dict = dict(base)
        cfg_dict["seed"] = int(seed)
        if base.get("out_dir"):
            cfg_dict["out_dir"] = os.path.join(base["out_dir"], f"seed_{seed}")
        summary, _, _ = run(ExperimentConfig.from_dict(cfg_dict))
        return summary

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker,
                                    [(base, int(s)) for s in seed_list]))
    else:
        results = [run_one(s) for s in seed_list]
    best = max(results, key=lambda s: s["best_dev_accuracy"])
    sweep_summary = {
        "config": base,
        "seeds": [int(s) for s in seed_list],
        "best_seed": best["config"]["seed"],
        "best_dev_accuracy": best["best_dev_accuracy"],
        "test_accuracy_at_best": best["test_accuracy_at_best"],
        "runs": results,
    }
    if base.get("out_dir"):
        os.makedirs(base["out_dir"], exist_ok=True)
        path = os.path.join(base["out_dir"], "sweep_summary.json")
        with open(path, "w") as fh:
            json.dump(sweep_summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return sweep_summary


def _sweep_worker(args):
    base, seed = args
    cfg_dict = dict(base)
    cfg_dict["seed"] = seed
    if base.get("out_dir"):
        cfg_dict["out_dir"] = os.path.join(base["out_dir"], f"seed_{seed}")
    summary, _, _ = run(ExperimentConfig.from_dict(cfg_dict))
    return summary
