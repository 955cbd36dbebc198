"""Batch-level training loops for the MLP and the bidirectional tagger.

Forward passes run batched (dense matrix products). Backward passes
dispatch per layer: full gradients use batched products, per-example
top-k selection gathers and scatters just the selected rows for each
example, and unified selection shares one index set across the batch.
The summed batch gradients are exactly the sum of the per-example
reference operations; tests pin that equivalence.
"""

import time

import numpy as np

from .layers import (
    activation_derivative,
    activation_forward,
    dropout_forward,
    softmax_cross_entropy_batch,
    unified_topk_select,
)
from .numerics import top_k_indices
from .recurrent import GATES, CellGradients


class BatchCache:
    __slots__ = ("x", "y", "z", "drop_mask")

    def __init__(self, x, y, z, drop_mask=None):
        self.x = x
        self.y = y
        self.z = z
        self.drop_mask = drop_mask


class LayerBatchGradients:
    """Summed batch gradient of one layer.

    ``rows`` is None for a dense gradient; otherwise it lists the union
    of selected rows and dW/db cover just those rows.
    """

    __slots__ = ("rows", "dW", "db")

    def __init__(self, rows, dW, db):
        self.rows = rows
        self.dW = dW
        self.db = db


class EpochStats:
    __slots__ = ("loss", "accuracy", "examples", "backprop_ns", "update_sum",
                 "update_steps")

    def __init__(self):
        self.loss = 0.0
        self.accuracy = 0.0
        self.examples = 0
        self.backprop_ns = 0
        self.update_sum = 0.0
        self.update_steps = 0

    @property
    def mean_update(self):
        return self.update_sum / self.update_steps if self.update_steps else 0.0


def _topk_rows(v, k):
    """Row indices of the k largest magnitudes; same tie rule as
    numerics.top_k_indices but without the IndexSet wrapper."""
    n = v.shape[0]
    if k >= n:
        return np.arange(n, dtype=np.intp)
    mag = np.abs(v)
    kth = np.partition(mag, n - k)[n - k]
    chosen = np.flatnonzero(mag > kth)
    short = k - chosen.shape[0]
    if short > 0:
        ties = np.flatnonzero(mag == kth)[:short]
        chosen = np.sort(np.concatenate([chosen, ties]))
    return chosen


def mlp_forward_batch(model, X, training=False, rng=None, masks=None, ids=None):
    """Batched forward pass; applies activation masks when given."""
    caches = []
    h = np.asarray(X, dtype=np.float64)
    last = len(model.layers) - 1
    for i, (layer, kind) in enumerate(zip(model.layers, model.activations)):
        y = h @ layer.W.T + layer.b
        z = activation_forward(kind, y)
        drop_mask = None
        if training and i < last:
            if model.dropout_rate > 0.0:
                z, drop_mask = dropout_forward(z, model.dropout_rate, True, rng)
            if masks is not None and i in masks.layer_ids:
                z = masks.apply(i, ids, z)
        caches.append(BatchCache(h, y, z, drop_mask))
        h = z
    return h, caches


def mlp_backward_batch(model, caches, grad_logits, *, selection="per_example",
                       flops=None, counters=None, masks=None, ids=None,
                       grad_z_recorder=None):
    """Batched backward pass under each layer's configured policy.

    Returns per-layer LayerBatchGradients holding the batch-summed
    gradients. ``counters`` records top-k membership per example;
    ``grad_z_recorder(layer_index, ids, grad_z)`` sees each hidden
    layer's post-activation gradient; ``masks`` zeroes the gradient of
    frozen neurons per example.
    """
    n_layers = len(model.layers)
    grads = [None] * n_layers
    grad_z = np.asarray(grad_logits, dtype=np.float64)
    B = grad_z.shape[0]
    for i in range(n_layers - 1, -1, -1):
        layer, kind, cache = model.layers[i], model.activations[i], caches[i]
        if i < n_layers - 1:
            if grad_z_recorder is not None:
                grad_z_recorder(i, ids, grad_z)
            if masks is not None and i in masks.layer_ids:
                grad_z = masks.zero_masked(i, ids, grad_z)
            if cache.drop_mask is not None:
                grad_z = grad_z * cache.drop_mask
        grad_y = grad_z * activation_derivative(kind, cache.y, cache.z)
        k = layer.meprop_k
        sparse = k is not None and k < layer.n_out
        if not sparse:
            dW = grad_y.T @ cache.x
            db = grad_y.sum(axis=0)
            grad_z = grad_y @ layer.W
            if flops is not None:
                flops.add(2 * B * layer.n_out * layer.n_in)
            grads[i] = LayerBatchGradients(None, dW, db)
        elif selection == "unified":
            S = unified_topk_select(grad_y, k)
            sel = S.indices
            gk = grad_y[:, sel]
            dW = gk.T @ cache.x
            db = gk.sum(axis=0)
            grad_z = gk @ layer.W[sel]
            if flops is not None:
                flops.add(2 * B * sel.shape[0] * layer.n_in)
            if counters is not None and i in counters:
                counters[i].record_unified(S, B)
            grads[i] = LayerBatchGradients(sel, dW, db)
        else:
            per_example = [_topk_rows(grad_y[e], k) for e in range(B)]
            union = np.unique(np.concatenate(per_example))
            dW = np.zeros((union.shape[0], layer.n_in))
            db = np.zeros(union.shape[0])
            new_grad = np.empty((B, layer.n_in))
            for e in range(B):
                sel = per_example[e]
                pos = np.searchsorted(union, sel)
                vals = grad_y[e, sel]
                dW[pos] += vals[:, None] * cache.x[e]
                db[pos] += vals
                new_grad[e] = layer.W[sel].T @ vals
            grad_z = new_grad
            if flops is not None:
                flops.add(2 * B * k * layer.n_in)
            if counters is not None and i in counters:
                counters[i].record_examples(per_example)
            grads[i] = LayerBatchGradients(union, dW, db)
    return grads


def apply_mlp_updates(model, optimizer, grads, probe=False):
    """One optimizer step from batch gradients; returns sum |delta| if probing."""
    total = 0.0
    for i, g in enumerate(grads):
        layer = model.layers[i]
        wname, bname = f"layers.{i}.W", f"layers.{i}.b"
        rows = g.rows
        if rows is not None and rows.shape[0] == layer.n_out:
            # the union covered every row; the dense path is identical
            rows = None
        if rows is None:
            dw = optimizer.step_dense(wname, layer.W, g.dW, probe)
            dbd = optimizer.step_dense(bname, layer.b, g.db, probe)
        else:
            dw = optimizer.step_sparse(wname, layer.W, rows, g.dW, probe)
            dbd = optimizer.step_sparse(bname, layer.b, rows, g.db, probe)
        if probe:
            total += dw + dbd
    return total


def parameter_count(model):
    return sum(arr.size for _, arr in model.parameters())


def train_mlp_epoch(model, optimizer, batch_iter, epoch, *, selection="per_example",
                    flops=None, counters=None, masks=None, rng=None,
                    grad_z_recorder=None, probe=False, measure_time=True,
                    after_batch=None):
    """One training epoch over the iterator's batches.

    The timed region covers gradient computation only (top-k selection
    included), not the forward pass or the optimizer step.
    """
    stats = EpochStats()
    correct = 0
    n_params = parameter_count(model) if probe else 0
    for ids, X, y in batch_iter.batches(epoch):
        B = X.shape[0]
        logits, caches = mlp_forward_batch(
            model, X, training=True, rng=rng, masks=masks, ids=ids
        )
        losses, grad_logits = softmax_cross_entropy_batch(logits, y)
        stats.loss += float(losses.sum())
        correct += int((np.argmax(logits, axis=1) == y).sum())
        stats.examples += B
        grad_logits /= B
        t0 = time.perf_counter_ns() if measure_time else 0
        grads = mlp_backward_batch(
            model, caches, grad_logits, selection=selection, flops=flops,
            counters=counters, masks=masks, ids=ids,
            grad_z_recorder=grad_z_recorder,
        )
        if measure_time:
            stats.backprop_ns += time.perf_counter_ns() - t0
        delta = apply_mlp_updates(model, optimizer, grads, probe)
        if probe:
            stats.update_sum += delta / n_params
            stats.update_steps += 1
        if after_batch is not None:
            after_batch()
    stats.loss /= max(stats.examples, 1)
    stats.accuracy = correct / max(stats.examples, 1)
    return stats


def evaluate_mlp(model, dataset, batch_size=512):
    """Mask-free, dropout-free forward accuracy and mean loss."""
    total_loss = 0.0
    correct = 0
    N = len(dataset)
    for start in range(0, N, batch_size):
        X = dataset.features[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        logits, _ = mlp_forward_batch(model, X, training=False)
        losses, _ = softmax_cross_entropy_batch(logits, y)
        total_loss += float(losses.sum())
        correct += int((np.argmax(logits, axis=1) == y).sum())
    return total_loss / N, correct / N


def train_tagger_epoch(model, optimizer, batch_iter, epoch, *, flops=None,
                       counters=None, probe=False, measure_time=True,
                       after_batch=None):
    """One epoch over token sequences, accumulating gradients per batch.

    ``counters`` maps direction -> gate -> UpdateCounter; an index counts
    once per example when any timestep of that example selected it.
    """
    stats = EpochStats()
    correct = 0
    words = 0
    n_params = parameter_count(model) if probe else 0
    for ids, tokens_batch, tags_batch in batch_iter.batches(epoch):
        B = len(tokens_batch)
        acc = {"fwd": CellGradients(model.fwd), "bwd": CellGradients(model.bwd)}
        out_dW = np.zeros_like(model.out.W)
        out_db = np.zeros_like(model.out.b)
        t0 = time.perf_counter_ns() if measure_time else 0
        for tokens, tags in zip(tokens_batch, tags_batch):
            loss, seq, n_correct = model.loss_and_gradients(tokens, tags, flops)
            stats.loss += loss
            correct += n_correct
            words += len(tags)
            for direction, cell_grads in (("fwd", seq.fwd), ("bwd", seq.bwd)):
                tgt = acc[direction]
                for g in GATES:
                    tgt.dWx[g] += cell_grads.dWx[g]
                    tgt.dWh[g] += cell_grads.dWh[g]
                    tgt.db[g] += cell_grads.db[g]
                    tgt.rows[g] |= cell_grads.rows[g]
                    if counters is not None:
                        counters[direction][g].record_mask(cell_grads.rows[g])
            out_dW += seq.out_dW
            out_db += seq.out_db
        if measure_time:
            stats.backprop_ns += time.perf_counter_ns() - t0
        scale = 1.0 / B
        delta = 0.0
        for direction, cell in (("fwd", model.fwd), ("bwd", model.bwd)):
            grads = acc[direction]
            for g in GATES:
                rows = np.flatnonzero(grads.rows[g])
                for field, param, grad in (
                    ("Wx", cell.Wx[g], grads.dWx[g]),
                    ("Wh", cell.Wh[g], grads.dWh[g]),
                    ("b", cell.b[g], grads.db[g]),
                ):
                    name = f"{direction}.{g}.{field}"
                    if rows.shape[0] == param.shape[0]:
                        d = optimizer.step_dense(name, param, grad * scale, probe)
                    else:
                        d = optimizer.step_sparse(
                            name, param, rows, grad[rows] * scale, probe
                        )
                    if probe:
                        delta += d
        d = optimizer.step_dense("out.W", model.out.W, out_dW * scale, probe)
        if probe:
            delta += d
        d = optimizer.step_dense("out.b", model.out.b, out_db * scale, probe)
        if probe:
            delta += d
            stats.update_sum += delta / n_params
            stats.update_steps += 1
        stats.examples += B
        if after_batch is not None:
            after_batch()
    # per-sequence losses are already per-word means
    stats.loss /= max(stats.examples, 1)
    stats.accuracy = correct / max(words, 1)
    return stats


def evaluate_tagger(model, dataset):
    """Per-word accuracy and mean per-word loss over a sequence dataset."""
    correct = 0
    words = 0
    total_loss = 0.0
    for tokens, tags in zip(dataset.features, dataset.labels):
        logits, _ = model.forward_sequence(tokens)
        losses, _ = softmax_cross_entropy_batch(logits, np.asarray(tags))
        pred = np.argmax(logits, axis=1)
        correct += int((pred == np.asarray(tags)).sum())
        words += len(tags)
        total_loss += float(losses.sum())
    return total_loss / max(words, 1), correct / max(words, 1)
