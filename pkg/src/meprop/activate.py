"""Per-example neuron masking driven by accumulated gradients.

The model first trains normally while accumulating, per (example,
neuron), the absolute post-activation gradient. Neurons whose share of
an example's accumulated gradient falls below p are then frozen for
that example: their forward value is pinned to the recorded constant
and no gradient flows through them. Evaluation always runs mask-free.
"""

import struct

import numpy as np

from .layers import MLP
from .optim import AdamState
from .training import evaluate_mlp, mlp_forward_batch, train_mlp_epoch


class PerExampleRecord:
    """Accumulated |gradient| and recorded activation per (example, neuron)."""

    __slots__ = ("layer_id", "g", "a")

    def __init__(self, layer_id, num_examples, layer_size):
        self.layer_id = int(layer_id)
        self.g = np.zeros((num_examples, layer_size))
        self.a = np.zeros((num_examples, layer_size))


class ActMask:
    """Per-example frozen neurons for each hidden layer.

    ``masked[layer]`` is a boolean (num_examples, layer_size) matrix;
    ``frozen[layer]`` holds the constant replacing each masked neuron's
    activation.
    """

    def __init__(self, layer_ids, masked, frozen):
        self.layer_ids = tuple(layer_ids)
        self.masked = dict(masked)
        self.frozen = dict(frozen)

    @property
    def num_examples(self):
        first = self.masked[self.layer_ids[0]]
        return first.shape[0]

    def apply(self, layer_id, ids, z):
        """Replace masked activations with their frozen constants."""
        if ids is None:
            raise ValueError("activation masks need example ids")
        rows = self.masked[layer_id][ids]
        return np.where(rows, self.frozen[layer_id][ids], z)

    def zero_masked(self, layer_id, ids, grad_z):
        """Frozen neurons are constants: no gradient flows through them."""
        return np.where(self.masked[layer_id][ids], 0.0, grad_z)

    def unmasked_counts(self, layer_id):
        """Unmasked neurons per example for one layer."""
        return (~self.masked[layer_id]).sum(axis=1)

    def average_unmasked(self):
        """Mean over layers of the mean per-example unmasked neuron count."""
        per_layer = [self.unmasked_counts(l).mean() for l in self.layer_ids]
        return float(np.mean(per_layer))


def pretrain_and_record(model, optimizer, train_data, batch_iter, epochs, *,
                        flops=None, measure_time=True, on_epoch=None):
    """Train normally for e epochs while accumulating per-example
    gradient magnitudes, then record activations in one final sweep.

    The gradient accumulator for hidden layer l sums |dL/dz_l| of each
    example's own loss across every pretraining epoch; the recorded
    activation is the layer's post-activation output at the end of
    pretraining. Returns one PerExampleRecord per hidden layer.
    """
    if epochs < 1:
        raise ValueError(f"pretraining needs at least 1 epoch, got {epochs}")
    if not isinstance(model, MLP):
        raise TypeError("pretrain_and_record expects an MLP")
    N = len(train_data)
    hidden = list(range(len(model.layers) - 1))
    records = {
        l: PerExampleRecord(l, N, model.layers[l].n_out) for l in hidden
    }

    def recorder(layer_index, ids, grad_z):
        # grad_z carries the mean-loss scale; restore per-example scale
        records[layer_index].g[ids] += np.abs(grad_z) * ids.shape[0]

    stats_log = []
    for epoch in range(epochs):
        stats = train_mlp_epoch(
            model, optimizer, batch_iter, epoch, flops=flops,
            grad_z_recorder=recorder, measure_time=measure_time,
        )
        stats_log.append(stats)
        if on_epoch is not None:
            on_epoch(epoch, stats)
    # final sweep: activations of the converged pretrained model
    chunk = 1024
    for start in range(0, N, chunk):
        X = train_data.features[start:start + chunk]
        _, caches = mlp_forward_batch(model, X, training=False)
        for l in hidden:
            records[l].a[start:start + X.shape[0]] = caches[l].z
    return [records[l] for l in hidden], stats_log


def build_masks(records, p):
    """Mask neuron i for example j when g_ij < p * sum_i g_ij.

    The rule is scale-invariant per example. If it would mask every
    neuron of an example, the single highest-g neuron is kept so the
    layer never goes fully constant for that example.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"activation threshold p must be in (0, 1), got {p}")
    layer_ids, masked, frozen = [], {}, {}
    for record in records:
        g = record.g
        thresholds = p * g.sum(axis=1, keepdims=True)
        mask = g < thresholds
        all_masked = mask.all(axis=1)
        if all_masked.any():
            rows = np.flatnonzero(all_masked)
            top = np.argmax(g[rows], axis=1)
            mask[rows, top] = False
        layer_ids.append(record.layer_id)
        masked[record.layer_id] = mask
        frozen[record.layer_id] = record.a.copy()
    return ActMask(layer_ids, masked, frozen)


def masked_train(model, optimizer, masks, dev_data, batch_iter, epochs, *,
                 start_epoch=0, flops=None, probe=True, measure_time=True,
                 on_epoch=None):
    """Continue training with per-example frozen neurons.

    Masked neurons keep their recorded constants in the forward pass and
    contribute no gradient; their incoming weight rows are updated only
    by batches containing an example that leaves them unmasked.
    Evaluation forward passes are mask-free.
    """
    history = []
    for epoch in range(start_epoch, start_epoch + epochs):
        stats = train_mlp_epoch(
            model, optimizer, batch_iter, epoch, masks=masks, flops=flops,
            probe=probe, measure_time=measure_time,
        )
        dev_loss, dev_acc = evaluate_mlp(model, dev_data)
        history.append((stats, dev_loss, dev_acc))
        if on_epoch is not None:
            on_epoch(epoch, stats, dev_loss, dev_acc)
    return history


def update_magnitude_probe(params_before, params_after):
    """Mean absolute parameter change between two model states.

    Accepts models (anything with .parameters()) or (name, array) lists.
    """
    if hasattr(params_before, "parameters"):
        params_before = params_before.parameters()
    if hasattr(params_after, "parameters"):
        params_after = params_after.parameters()
    before = dict(params_before)
    after = dict(params_after)
    if before.keys() != after.keys():
        raise ValueError("parameter sets do not match")
    total = 0.0
    count = 0
    for name, b in before.items():
        a = after[name]
        if a.shape != b.shape:
            raise ValueError(
                f"parameter {name!r} changed shape {b.shape} -> {a.shape}"
            )
        total += float(np.abs(a - b).sum())
        count += a.size
    return total / count


_MASK_MAGIC = b"MAMK"


def save_masks(path, masks):
    """Binary table: per layer, per example, masked indices and constants."""
    with open(path, "wb") as fh:
        fh.write(_MASK_MAGIC)
        fh.write(struct.pack(">II", 1, len(masks.layer_ids)))
        fh.write(struct.pack(">I", masks.num_examples))
        for layer_id in masks.layer_ids:
            mask = masks.masked[layer_id]
            frozen = masks.frozen[layer_id]
            fh.write(struct.pack(">II", layer_id, mask.shape[1]))
            for j in range(mask.shape[0]):
                idx = np.flatnonzero(mask[j]).astype(np.int64)
                fh.write(struct.pack(">I", idx.shape[0]))
                fh.write(idx.astype(">i8").tobytes())
                fh.write(frozen[j, idx].astype(">f8").tobytes())


def load_masks(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MASK_MAGIC:
            raise ValueError(f"{path} is not an activation-mask file")
        version, n_layers = struct.unpack(">II", fh.read(8))
        if version != 1:
            raise ValueError(f"unsupported mask file version {version}")
        (num_examples,) = struct.unpack(">I", fh.read(4))
        layer_ids, masked, frozen = [], {}, {}
        for _ in range(n_layers):
            layer_id, size = struct.unpack(">II", fh.read(8))
            mask = np.zeros((num_examples, size), dtype=bool)
            vals = np.zeros((num_examples, size))
            for j in range(num_examples):
                (count,) = struct.unpack(">I", fh.read(4))
                idx = np.frombuffer(fh.read(8 * count), dtype=">i8").astype(np.int64)
                v = np.frombuffer(fh.read(8 * count), dtype=">f8")
                mask[j, idx] = True
                vals[j, idx] = v
            layer_ids.append(layer_id)
            masked[layer_id] = mask
            frozen[layer_id] = vals
    return ActMask(layer_ids, masked, frozen)
