"""Counter-based structured pruning with cycled training.

Each hidden neuron's top-k membership is counted over a prune interval
of m examples; neurons with fewer than theta = m * p hits are removed,
together with their weight rows, biases, the matching columns of the
next layer, and the mirrored optimizer state. Training alternates
stages of sparsified-and-pruned epochs with normal epochs, resetting
the optimizer at every stage boundary.
"""

import copy

import numpy as np

from .errors import DimensionMismatch
from .layers import MLP, activation_forward
from .numerics import IndexSet
from .recurrent import GATES, BiLstmTagger, lstm_step_forward
from .training import (
    evaluate_mlp,
    evaluate_tagger,
    mlp_forward_batch,
    train_mlp_epoch,
    train_tagger_epoch,
)


class UpdateCounter:
    """Per-neuron count of top-k membership since the last prune."""

    __slots__ = ("counts", "examples_seen")

    def __init__(self, size):
        self.counts = np.zeros(int(size), dtype=np.int64)
        self.examples_seen = 0

    def __len__(self):
        return int(self.counts.shape[0])

    def record(self, index_set):
        """One example's selection."""
        if index_set.universe != len(self):
            raise DimensionMismatch(
                f"index universe {index_set.universe} does not match counter "
                f"length {len(self)}"
            )
        self.counts[index_set.indices] += 1
        self.examples_seen += 1

    def record_examples(self, index_arrays):
        """A batch of per-example selections (one index array per example)."""
        for idx in index_arrays:
            self.counts[idx] += 1
        self.examples_seen += len(index_arrays)

    def record_unified(self, index_set, batch_size):
        """A shared selection counts once per example in the batch."""
        if index_set.universe != len(self):
            raise DimensionMismatch(
                f"index universe {index_set.universe} does not match counter "
                f"length {len(self)}"
            )
        self.counts[index_set.indices] += int(batch_size)
        self.examples_seen += int(batch_size)

    def record_mask(self, selected_mask):
        """One example's selection as a boolean mask (sequence models count
        an index once per example when any timestep selected it)."""
        self.counts[selected_mask] += 1
        self.examples_seen += 1

    def reset(self, size=None):
        if size is None:
            size = len(self)
        self.counts = np.zeros(int(size), dtype=np.int64)
        self.examples_seen = 0


class PruneConfig:
    """Hyper-parameters of the pruning schedule.

    theta = prune_interval_examples * prune_rate is the minimum hit
    count a neuron needs to survive a prune.
    """

    __slots__ = ("prune_interval_examples", "prune_rate", "min_keep",
                 "cycle_epochs", "simplify_epochs")

    def __init__(self, prune_interval_examples, prune_rate, min_keep=1,
                 cycle_epochs=10, simplify_epochs=5):
        if prune_interval_examples < 1:
            raise ValueError("prune interval must be a positive example count")
        if not 0.0 < prune_rate < 1.0:
            raise ValueError(f"prune rate must be in (0, 1), got {prune_rate}")
        if min_keep < 1:
            raise ValueError("min_keep must be >= 1")
        if not 1 <= simplify_epochs <= cycle_epochs:
            raise ValueError(
                f"need 1 <= simplify_epochs <= cycle_epochs, got "
                f"{simplify_epochs}/{cycle_epochs}"
            )
        self.prune_interval_examples = int(prune_interval_examples)
        self.prune_rate = float(prune_rate)
        self.min_keep = int(min_keep)
        self.cycle_epochs = int(cycle_epochs)
        self.simplify_epochs = int(simplify_epochs)

    @property
    def theta(self):
        return self.prune_interval_examples * self.prune_rate


class PruneReport:
    __slots__ = ("layer_id", "removed", "kept", "size_before", "size_after")

    def __init__(self, layer_id, removed, kept):
        self.layer_id = layer_id
        self.removed = removed
        self.kept = kept
        self.size_before = removed.universe
        self.size_after = len(kept)

    def __repr__(self):
        return (f"PruneReport({self.layer_id}: {self.size_before} -> "
                f"{self.size_after})")


def select_survivors(counts, theta, min_keep):
    """Keep neurons with counts >= theta; never fewer than min_keep.

    When the threshold would leave too few, the min_keep highest-count
    neurons survive instead (count ties toward the lower index).
    """
    counts = np.asarray(counts)
    n = counts.shape[0]
    keep_mask = counts >= theta
    if int(keep_mask.sum()) < min_keep:
        order = np.argsort(-counts, kind="stable")[:min_keep]
        keep_mask = np.zeros(n, dtype=bool)
        keep_mask[order] = True
    kept = IndexSet(np.flatnonzero(keep_mask), n)
    removed = IndexSet(np.flatnonzero(~keep_mask), n)
    return kept, removed


def prune_layer(model, layer_index, counter, config, optimizer=None):
    """Remove inactive neurons from one hidden layer of an MLP.

    Deletes their weight rows and bias entries, the corresponding
    columns of the following layer, and (when given) the optimizer rows
    and columns, then resets the counter at the new length.
    """
    if not isinstance(model, MLP):
        raise TypeError("prune_layer expects an MLP")
    if not 0 <= layer_index < len(model.layers) - 1:
        raise ValueError(
            f"layer {layer_index} is the output layer or out of range; only "
            f"hidden layers are pruned"
        )
    if len(counter) != model.layers[layer_index].n_out:
        raise DimensionMismatch(
            f"counter length {len(counter)} does not match layer size "
            f"{model.layers[layer_index].n_out}"
        )
    kept, removed = select_survivors(counter.counts, config.theta, config.min_keep)
    if len(removed):
        model.prune_hidden(layer_index, kept)
        if optimizer is not None:
            optimizer.prune_rows(f"layers.{layer_index}.W", kept.indices)
            optimizer.prune_rows(f"layers.{layer_index}.b", kept.indices)
            optimizer.prune_cols(f"layers.{layer_index + 1}.W", kept.indices)
    counter.reset(len(kept))
    return PruneReport(f"layers.{layer_index}", removed, kept)


def prune_lstm_joint(model, direction, gate_counters, config, optimizer=None):
    """Jointly prune one direction of a bidirectional tagger.

    A hidden index's merged count is the max over the four gates, so a
    path stays if any gate kept selecting it. Survivors keep their rows
    in every gate, the matching recurrent columns, and the matching
    output-projection columns; optimizer state shrinks in lockstep.
    """
    if not isinstance(model, BiLstmTagger):
        raise TypeError("prune_lstm_joint expects a BiLstmTagger")
    cell = model.fwd if direction == "fwd" else model.bwd
    h = cell.hidden
    for g in GATES:
        if len(gate_counters[g]) != h:
            raise DimensionMismatch(
                f"gate {g!r} counter length {len(gate_counters[g])} does not "
                f"match hidden size {h}"
            )
    merged = np.maximum.reduce([gate_counters[g].counts for g in GATES])
    kept, removed = select_survivors(merged, config.theta, config.min_keep)
    if len(removed):
        cols = model.prune_direction(direction, kept)
        if optimizer is not None:
            for g in GATES:
                optimizer.prune_rows(f"{direction}.{g}.Wx", kept.indices)
                optimizer.prune_rows(f"{direction}.{g}.Wh", kept.indices)
                optimizer.prune_cols(f"{direction}.{g}.Wh", kept.indices)
                optimizer.prune_rows(f"{direction}.{g}.b", kept.indices)
            optimizer.prune_cols("out.W", cols)
    for g in GATES:
        gate_counters[g].reset(len(kept))
    return PruneReport(direction, removed, kept)


def mlp_forward_zero_masked(model, X, zero_sets):
    """Reference forward with chosen hidden activations forced to zero.

    ``zero_sets`` maps hidden layer index -> index array in that layer's
    coordinates. Pruning must match this oracle on the pre-prune model.
    """
    h = np.asarray(X, dtype=np.float64)
    for i, (layer, kind) in enumerate(zip(model.layers, model.activations)):
        y = h @ layer.W.T + layer.b
        z = activation_forward(kind, y)
        if i in zero_sets and len(zero_sets[i]):
            z = z.copy()
            z[..., zero_sets[i]] = 0.0
        h = z
    return h


def tagger_forward_zero_masked(model, tokens, zero_sets):
    """Reference tagger forward with chosen hidden units zeroed per step.

    Zeroing h after every step is equivalent to removing the unit: its
    recurrent and output contributions vanish while other units evolve
    unchanged.
    """
    xs = [model._one_hot(t) for t in tokens]
    outputs = {}
    for direction, cell in (("fwd", model.fwd), ("bwd", model.bwd)):
        seq = xs if direction == "fwd" else xs[::-1]
        dead = zero_sets.get(direction)
        h = np.zeros(cell.hidden)
        c = np.zeros(cell.hidden)
        hs = []
        for x in seq:
            h, c, _ = lstm_step_forward(cell, x, h, c)
            if dead is not None and len(dead):
                h = h.copy()
                h[dead] = 0.0
            hs.append(h)
        outputs[direction] = hs if direction == "fwd" else hs[::-1]
    T = len(xs)
    concat = np.empty((T, model.out.n_in))
    for t in range(T):
        concat[t, : model.fwd.hidden] = outputs["fwd"][t]
        concat[t, model.fwd.hidden :] = outputs["bwd"][t]
    return concat @ model.out.W.T + model.out.b


def check_prune_state(model, optimizer, counters):
    """Post-prune invariants: mirrored optimizer shapes, zeroed counters."""
    for name, param in model.parameters():
        slot = optimizer.slots[name]
        if slot.m.shape != param.shape or slot.v.shape != param.shape:
            raise AssertionError(
                f"optimizer slot {name!r} shape {slot.m.shape} does not "
                f"mirror parameter shape {param.shape}"
            )
    for counter in counters:
        if counter.examples_seen != 0 or counter.counts.any():
            raise AssertionError("counter was not reset after pruning")


class StageReport:
    __slots__ = ("epoch", "stage", "train_loss", "train_accuracy", "dev_loss",
                 "dev_accuracy", "hidden_sizes", "prune_reports")

    def __init__(self, epoch, stage, train_loss, train_accuracy, dev_loss,
                 dev_accuracy, hidden_sizes, prune_reports):
        self.epoch = epoch
        self.stage = stage
        self.train_loss = train_loss
        self.train_accuracy = train_accuracy
        self.dev_loss = dev_loss
        self.dev_accuracy = dev_accuracy
        self.hidden_sizes = hidden_sizes
        self.prune_reports = prune_reports


def stage_of(epoch, config):
    return "simplify" if epoch % config.cycle_epochs < config.simplify_epochs \
        else "normal"


def cycled_train(model, optimizer, train_iter, dev_data, *, k, prune_config,
                 epochs, selection="per_example", flops=None,
                 measure_time=True, validate=False, rng=None, on_epoch=None):
    """Alternate sparsified-and-pruned stages with normal stages.

    During simplify epochs the hidden layers (or LSTM gates) run top-k
    backward with the given k, counters record selections, and a prune
    fires at the first batch boundary at or after every
    prune_interval examples. Normal epochs run full backprop with no
    recording. The optimizer is reset and counters cleared at every
    stage boundary. With ``validate`` on, every prune event is checked
    against the zero-masked forward of a pre-prune snapshot and the
    optimizer/counter postconditions.

    Returns (per-epoch StageReports, all PruneReports in order).
    """
    is_mlp = isinstance(model, MLP)
    if is_mlp:
        hidden = list(range(len(model.layers) - 1))
        counters = {i: UpdateCounter(model.layers[i].n_out) for i in hidden}
        counter_list = list(counters.values())
    else:
        counters = {
            d: {g: UpdateCounter(cell.hidden) for g in GATES}
            for d, cell in (("fwd", model.fwd), ("bwd", model.bwd))
        }
        counter_list = [counters[d][g] for d in counters for g in GATES]
    reports = []
    prune_log = []
    previous_stage = None
    probe_rng = np.random.default_rng(0xC0FFEE)

    def set_mode(stage):
        budget = k if stage == "simplify" else None
        if is_mlp:
            for i in hidden:
                model.layers[i].meprop_k = budget
        else:
            model.fwd.meprop_k = budget
            model.bwd.meprop_k = budget

    def prune_now():
        snapshot = copy.deepcopy(model) if validate else None
        zero_sets = {}
        if is_mlp:
            for i in hidden:
                report = prune_layer(model, i, counters[i], prune_config, optimizer)
                prune_log.append(report)
                zero_sets[i] = report.removed.indices
            if validate:
                X = probe_rng.standard_normal((100, model.input_size))
                want = mlp_forward_zero_masked(snapshot, X, zero_sets)
                got, _ = mlp_forward_batch(model, X)
                diff = float(np.abs(want - got).max())
                if diff >= 1e-12:
                    raise AssertionError(
                        f"pruned forward deviates from zero-masked forward "
                        f"by {diff:g}"
                    )
        else:
            for d in ("fwd", "bwd"):
                report = prune_lstm_joint(model, d, counters[d], prune_config,
                                          optimizer)
                prune_log.append(report)
                zero_sets[d] = report.removed.indices
            if validate:
                tokens = probe_rng.integers(0, model.vocab, size=12)
                want = tagger_forward_zero_masked(snapshot, tokens, zero_sets)
                got, _ = model.forward_sequence(tokens)
                diff = float(np.abs(want - got).max())
                if diff >= 1e-12:
                    raise AssertionError(
                        f"pruned forward deviates from zero-masked forward "
                        f"by {diff:g}"
                    )
        if validate:
            check_prune_state(model, optimizer, counter_list)

    def lead_counter():
        return counters[hidden[0]] if is_mlp else counters["fwd"][GATES[0]]

    def maybe_prune():
        if lead_counter().examples_seen >= prune_config.prune_interval_examples:
            prune_now()

    for epoch in range(epochs):
        stage = stage_of(epoch, prune_config)
        if stage != previous_stage:
            optimizer.reset()
            for counter in counter_list:
                counter.reset()
            set_mode(stage)
            previous_stage = stage
        simplifying = stage == "simplify"
        log_start = len(prune_log)
        if is_mlp:
            stats = train_mlp_epoch(
                model, optimizer, train_iter, epoch,
                selection=selection, flops=flops,
                counters=counters if simplifying else None,
                rng=rng, measure_time=measure_time,
                after_batch=maybe_prune if simplifying else None,
            )
            dev_loss, dev_acc = evaluate_mlp(model, dev_data)
        else:
            stats = train_tagger_epoch(
                model, optimizer, train_iter, epoch, flops=flops,
                counters=counters if simplifying else None,
                measure_time=measure_time,
                after_batch=maybe_prune if simplifying else None,
            )
            dev_loss, dev_acc = evaluate_tagger(model, dev_data)
        report = StageReport(
            epoch, stage, stats.loss, stats.accuracy, dev_loss, dev_acc,
            list(model.hidden_sizes), prune_log[log_start:],
        )
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report, stats)
    return reports, prune_log
