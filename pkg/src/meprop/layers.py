"""Linear layers, activations, dropout, softmax cross-entropy, and the MLP.

Forward propagation is always dense. The backward pass of a linear layer
comes in two flavours: the ordinary full gradient, and the top-k
sparsified gradient that touches only the selected output rows.
"""

import numpy as np

from .errors import DimensionMismatch
from .numerics import (
    IndexSet,
    SparseRowGradient,
    masked_transpose_matvec,
    outer,
    sparse_outer,
    top_k_indices,
    transpose_matvec,
)

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


def glorot_uniform(n_out, n_in, rng):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


class LinearLayer:
    """Dense layer ``y = W x + b`` with an optional top-k backward budget.

    ``meprop_k`` absent means full backpropagation; values >= the output
    size degrade to full as well, so k acts as a pure dial.
    """

    __slots__ = ("W", "b", "meprop_k")

    def __init__(self, W, b, meprop_k=None):
        W = np.ascontiguousarray(W, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
            raise DimensionMismatch(
                f"weight shape {W.shape} does not match bias shape {b.shape}"
            )
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise ValueError("layer parameters must be finite")
        if meprop_k is not None and int(meprop_k) < 1:
            raise ValueError(f"meprop_k must be >= 1, got {meprop_k}")
        self.W = W
        self.b = b
        self.meprop_k = None if meprop_k is None else int(meprop_k)

    @classmethod
    def create(cls, n_out, n_in, rng, meprop_k=None):
        return cls(glorot_uniform(n_out, n_in, rng), np.zeros(n_out), meprop_k)

    @property
    def n_out(self):
        return self.W.shape[0]

    @property
    def n_in(self):
        return self.W.shape[1]

    def __repr__(self):
        return f"LinearLayer({self.n_out}x{self.n_in}, meprop_k={self.meprop_k})"


class ForwardCache:
    """Values retained by a forward pass: input x, pre-activation y,
    post-activation z, and the dropout mask if one was drawn."""

    __slots__ = ("x", "y", "z", "drop_mask")

    def __init__(self, x, y, z=None, drop_mask=None):
        self.x = x
        self.y = y
        self.z = z
        self.drop_mask = drop_mask


class LayerGradients:
    """Backward-pass output of one linear layer.

    ``dW`` is dense for a full backward and a SparseRowGradient for a
    top-k backward; ``db`` is nonzero only at the selected rows; ``dx``
    is always a dense-valued vector. ``index_set`` is None for full
    backward.
    """

    __slots__ = ("dW", "db", "dx", "index_set")

    def __init__(self, dW, db, dx, index_set=None):
        self.dW = dW
        self.db = db
        self.dx = dx
        self.index_set = index_set


def linear_forward(layer, x, flops=None):
    """Dense forward ``y = W x + b``. Works on one vector or a batch matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != layer.n_in:
            raise DimensionMismatch(
                f"linear_forward: layer shape {layer.W.shape} is incompatible "
                f"with input shape {x.shape}"
            )
        y = layer.W @ x + layer.b
    elif x.ndim == 2:
        if x.shape[1] != layer.n_in:
            raise DimensionMismatch(
                f"linear_forward: layer shape {layer.W.shape} is incompatible "
                f"with batch shape {x.shape}"
            )
        y = x @ layer.W.T + layer.b
    else:
        raise DimensionMismatch(f"linear_forward: bad input shape {x.shape}")
    if flops is not None:
        flops.add(layer.n_out * layer.n_in * (1 if x.ndim == 1 else x.shape[0]))
    return y, ForwardCache(x, y)


def linear_backward_full(layer, cache, grad_y, flops=None):
    """Full gradients: dW = grad_y x^T, db = grad_y, dx = W^T grad_y."""
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != (layer.n_out,):
        raise DimensionMismatch(
            f"linear_backward_full: gradient shape {grad_y.shape} does not "
            f"match layer output size {layer.n_out}"
        )
    dW = outer(grad_y, cache.x, flops)
    db = grad_y.copy()
    dx = transpose_matvec(layer.W, grad_y, flops)
    return LayerGradients(dW, db, dx)


def linear_backward_meprop(layer, cache, grad_y, k, flops=None):
    """Top-k gradients, doing only |S| rows of work.

    S is the set of k largest-magnitude entries of grad_y. The weight
    gradient holds just those rows, the bias gradient is zero outside S,
    and dx is accumulated from the selected rows of W alone; nothing is
    computed densely and masked afterwards.
    """
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != (layer.n_out,):
        raise DimensionMismatch(
            f"linear_backward_meprop: gradient shape {grad_y.shape} does not "
            f"match layer output size {layer.n_out}"
        )
    if int(k) >= layer.n_out:
        # degenerate to full backprop: same cost, same values
        S = IndexSet.full(layer.n_out)
        dW = SparseRowGradient(S, outer(grad_y, cache.x, flops))
        db = grad_y.copy()
        dx = transpose_matvec(layer.W, grad_y, flops)
        return LayerGradients(dW, db, dx, index_set=S)
    S = top_k_indices(grad_y, k)
    dW = sparse_outer(grad_y, cache.x, S, flops)
    db = np.zeros_like(grad_y)
    db[S.indices] = grad_y[S.indices]
    dx = masked_transpose_matvec(layer.W, grad_y, S, flops)
    return LayerGradients(dW, db, dx, index_set=S)


def activation_forward(kind, y):
    if kind == "relu":
        return np.maximum(y, 0.0)
    if kind == "tanh":
        return np.tanh(y)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-y))
    if kind == "identity":
        return y
    raise ValueError(f"unknown activation kind {kind!r}")


def activation_derivative(kind, y, z):
    """sigma'(y), written in terms of whichever of y/z is cheapest."""
    if kind == "relu":
        return (y > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - z * z
    if kind == "sigmoid":
        return z * (1.0 - z)
    if kind == "identity":
        return np.ones_like(y)
    raise ValueError(f"unknown activation kind {kind!r}")


def activation_backward(kind, cache, grad_z):
    """Element-wise chain rule; never sparsified."""
    return grad_z * activation_derivative(kind, cache.y, cache.z)


def dropout_forward(x, rate, training, rng):
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time.

    Returns (output, mask); the mask is None whenever dropout was a no-op,
    and otherwise already folds in the 1/(1-rate) scale so backward is a
    plain multiply.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(np.float64) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad, mask):
    return grad if mask is None else grad * mask


def softmax_cross_entropy(logits, target):
    """Stable softmax cross-entropy for one example.

    Returns (loss, gradient w.r.t. logits); the gradient entries sum to 0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise ValueError(
            f"target {target} out of range for {logits.shape[0]} classes"
        )
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    total = exps.sum()
    loss = np.log(total) - shifted[target]
    grad = exps / total
    grad[target] -= 1.0
    return float(loss), grad


def softmax_cross_entropy_batch(logits, targets):
    """Row-wise softmax cross-entropy. Returns (losses, gradients)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    totals = exps.sum(axis=1, keepdims=True)
    rows = np.arange(logits.shape[0])
    losses = np.log(totals[:, 0]) - shifted[rows, targets]
    grads = exps / totals
    grads[rows, targets] -= 1.0
    return losses, grads


def unified_topk_select(batch_grads, k):
    """One shared index set for a whole mini-batch.

    Selection runs on the per-neuron mean of |grad| across the batch, so
    every example then reuses the same S.
    """
    G = np.asarray(batch_grads, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError(f"batch of gradients must be non-empty, got shape {G.shape}")
    return top_k_indices(np.abs(G).mean(axis=0), k)


class MLP:
    """A chain of linear layers with element-wise activations.

    The final layer produces logits (identity activation); hidden layers
    may carry a top-k backward budget. Dropout, when enabled, applies to
    hidden post-activations at training time only.
    """

    def __init__(self, layers, activations, dropout_rate=0.0):
        if len(layers) != len(activations):
            raise ValueError("need one activation kind per layer")
        for kind in activations:
            if kind not in ACTIVATIONS:
                raise ValueError(f"unknown activation kind {kind!r}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise DimensionMismatch(
                    f"layer output size {prev.n_out} does not chain into "
                    f"layer input size {nxt.n_in}"
                )
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
        self.layers = list(layers)
        self.activations = list(activations)
        self.dropout_rate = float(dropout_rate)

    @classmethod
    def create(cls, sizes, rng, meprop_k=None, activation="relu", dropout_rate=0.0):
        """Build sizes[0] -> ... -> sizes[-1]; hidden layers get meprop_k,
        the output layer always backpropagates fully."""
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        layers = []
        acts = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(
                LinearLayer.create(n_out, n_in, rng, None if last else meprop_k)
            )
            acts.append("identity" if last else activation)
        return cls(layers, acts, dropout_rate)

    @property
    def hidden_sizes(self):
        return [layer.n_out for layer in self.layers[:-1]]

    @property
    def input_size(self):
        return self.layers[0].n_in

    def parameters(self):
        """Stable (name, array) pairs for the optimizer and checkpoints."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layers.{i}.W", layer.W))
            out.append((f"layers.{i}.b", layer.b))
        return out

    def forward_example(self, x, training=False, rng=None):
        """Forward one example; returns (logits, caches)."""
        caches = []
        h = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, (layer, kind) in enumerate(zip(self.layers, self.activations)):
            y, cache = linear_forward(layer, h)
            z = activation_forward(kind, y)
            if i < last and self.dropout_rate > 0.0 and training:
                z, mask = dropout_forward(z, self.dropout_rate, training, rng)
                cache.drop_mask = mask
            cache.z = z
            caches.append(cache)
            h = z
        return h, caches

    def backward_example(self, caches, grad_logits, flops=None):
        """Backward one example under each layer's configured policy.

        Returns per-layer LayerGradients, ordered like the layers. The
        gradient flowing into layer l-1 is the dx of layer l: dense in
        value, sparsely computed when the layer uses top-k.
        """
        grads = [None] * len(self.layers)
        grad_z = np.asarray(grad_logits, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            layer, kind, cache = self.layers[i], self.activations[i], caches[i]
            try:
                grad_z = dropout_backward(grad_z, cache.drop_mask)
                grad_y = activation_backward(kind, cache, grad_z)
                if layer.meprop_k is not None and layer.meprop_k < layer.n_out:
                    grads[i] = linear_backward_meprop(
                        layer, cache, grad_y, layer.meprop_k, flops
                    )
                else:
                    grads[i] = linear_backward_full(layer, cache, grad_y, flops)
            except (DimensionMismatch, ValueError) as err:
                raise type(err)(f"layer {i}: {err}") from err
            grad_z = grads[i].dx
        return grads

    def loss_and_gradients(self, x, target, flops=None, training=True, rng=None):
        """Convenience wrapper: forward, softmax cross-entropy, backward."""
        logits, caches = self.forward_example(x, training=training, rng=rng)
        loss, grad_logits = softmax_cross_entropy(logits, target)
        return loss, self.backward_example(caches, grad_logits, flops)

    def prune_hidden(self, layer_index, keep):
        """Drop hidden neurons: rows of this layer, columns of the next.

        ``keep`` is an IndexSet over the layer's current output size. The
        caller is responsible for pruning optimizer state in lockstep.
        """
        if not 0 <= layer_index < len(self.layers) - 1:
            raise ValueError(
                f"layer {layer_index} is not a hidden layer of this model"
            )
        layer = self.layers[layer_index]
        if keep.universe != layer.n_out:
            raise DimensionMismatch(
                f"keep-set universe {keep.universe} does not match layer "
                f"output size {layer.n_out}"
            )
        if len(keep) < 1:
            raise ValueError("cannot prune a layer below 1 neuron")
        sel = keep.indices
        layer.W = np.ascontiguousarray(layer.W[sel])
        layer.b = np.ascontiguousarray(layer.b[sel])
        nxt = self.layers[layer_index + 1]
        nxt.W = np.ascontiguousarray(nxt.W[:, sel])
