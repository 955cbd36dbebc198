"""LSTM cell with hand-derived backward passes and a bidirectional tagger.

The four gates are kept as separate weight groups so that the top-k
backward can select rows per gate independently, while structural
pruning later removes a hidden index from every gate at once.
"""

import numpy as np

from .errors import DimensionMismatch
from .layers import (
    LinearLayer,
    glorot_uniform,
    linear_forward,
    softmax_cross_entropy_batch,
)
from .numerics import (
    masked_transpose_matvec,
    outer,
    sparse_outer,
    top_k_indices,
    transpose_matvec,
)

GATES = ("input", "forget", "output", "candidate")


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


class LstmCell:
    """Standard LSTM recurrences; sigmoid gates, tanh candidate and output.

    Each gate g owns an input weight Wx[g] of shape (h, d), a recurrent
    weight Wh[g] of shape (h, h), and a bias b[g] of length h.
    """

    __slots__ = ("Wx", "Wh", "b", "meprop_k")

    def __init__(self, Wx, Wh, b, meprop_k=None):
        h = b[GATES[0]].shape[0]
        d = Wx[GATES[0]].shape[1]
        for g in GATES:
            if Wx[g].shape != (h, d) or Wh[g].shape != (h, h) or b[g].shape != (h,):
                raise DimensionMismatch(
                    f"gate {g!r}: shapes {Wx[g].shape}/{Wh[g].shape}/{b[g].shape} "
                    f"do not agree on hidden size {h} and input size {d}"
                )
        self.Wx = {g: np.ascontiguousarray(Wx[g], dtype=np.float64) for g in GATES}
        self.Wh = {g: np.ascontiguousarray(Wh[g], dtype=np.float64) for g in GATES}
        self.b = {g: np.ascontiguousarray(b[g], dtype=np.float64) for g in GATES}
        self.meprop_k = None if meprop_k is None else int(meprop_k)

    @classmethod
    def create(cls, hidden, input_dim, rng, meprop_k=None):
        Wx = {g: glorot_uniform(hidden, input_dim, rng) for g in GATES}
        Wh = {g: glorot_uniform(hidden, hidden, rng) for g in GATES}
        b = {g: np.zeros(hidden) for g in GATES}
        return cls(Wx, Wh, b, meprop_k)

    @property
    def hidden(self):
        return self.b[GATES[0]].shape[0]

    @property
    def input_dim(self):
        return self.Wx[GATES[0]].shape[1]


class LstmStepCache:
    __slots__ = ("x", "h_prev", "c_prev", "pre", "act", "c", "tanh_c")

    def __init__(self, x, h_prev, c_prev, pre, act, c, tanh_c):
        self.x = x
        self.h_prev = h_prev
        self.c_prev = c_prev
        self.pre = pre
        self.act = act
        self.c = c
        self.tanh_c = tanh_c


class LstmStepGradients:
    """Per-gate weight/bias gradients plus dx, dh_prev, dc_prev.

    ``index_sets[g]`` names the rows selected for gate g, or None when the
    step was backpropagated fully.
    """

    __slots__ = ("dWx", "dWh", "db", "dx", "dh_prev", "dc_prev", "index_sets")

    def __init__(self, dWx, dWh, db, dx, dh_prev, dc_prev, index_sets):
        self.dWx = dWx
        self.dWh = dWh
        self.db = db
        self.dx = dx
        self.dh_prev = dh_prev
        self.dc_prev = dc_prev
        self.index_sets = index_sets


def lstm_step_forward(cell, x_t, h_prev, c_prev, flops=None):
    """One LSTM step; returns (h_t, c_t, cache with gate pre-activations)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    h = cell.hidden
    if x_t.shape != (cell.input_dim,) or h_prev.shape != (h,) or c_prev.shape != (h,):
        raise DimensionMismatch(
            f"lstm_step_forward: input shapes {x_t.shape}/{h_prev.shape}/"
            f"{c_prev.shape} do not match cell ({h}, {cell.input_dim})"
        )
    pre = {}
    for g in GATES:
        pre[g] = cell.Wx[g] @ x_t + cell.Wh[g] @ h_prev + cell.b[g]
        if flops is not None:
            flops.add(h * cell.input_dim + h * h)
    act = {
        "input": _sigmoid(pre["input"]),
        "forget": _sigmoid(pre["forget"]),
        "output": _sigmoid(pre["output"]),
        "candidate": np.tanh(pre["candidate"]),
    }
    c_t = act["forget"] * c_prev + act["input"] * act["candidate"]
    tanh_c = np.tanh(c_t)
    h_t = act["output"] * tanh_c
    return h_t, c_t, LstmStepCache(x_t, h_prev, c_prev, pre, act, c_t, tanh_c)


def _gate_preactivation_grads(cache, grad_h, grad_c):
    """Element-wise part of the step backward; shared by full and top-k."""
    i, f, o, g = (cache.act[name] for name in GATES)
    da = {}
    da["output"] = grad_h * cache.tanh_c * o * (1.0 - o)
    dc_total = grad_c + grad_h * o * (1.0 - cache.tanh_c * cache.tanh_c)
    da["input"] = dc_total * g * i * (1.0 - i)
    da["forget"] = dc_total * cache.c_prev * f * (1.0 - f)
    da["candidate"] = dc_total * i * (1.0 - g * g)
    dc_prev = dc_total * f
    return da, dc_prev


def lstm_step_backward_full(cell, cache, grad_h, grad_c, flops=None):
    """Full backward for one step."""
    da, dc_prev = _gate_preactivation_grads(cache, grad_h, grad_c)
    dWx, dWh, db = {}, {}, {}
    dx = np.zeros(cell.input_dim)
    dh_prev = np.zeros(cell.hidden)
    for g in GATES:
        dWx[g] = outer(da[g], cache.x, flops)
        dWh[g] = outer(da[g], cache.h_prev, flops)
        db[g] = da[g].copy()
        dx += transpose_matvec(cell.Wx[g], da[g], flops)
        dh_prev += transpose_matvec(cell.Wh[g], da[g], flops)
    return LstmStepGradients(dWx, dWh, db, dx, dh_prev, dc_prev,
                             {g: None for g in GATES})


def lstm_step_backward_meprop(cell, cache, grad_h, grad_c, k, flops=None):
    """Top-k backward for one step, selected per gate independently.

    Each gate's pre-activation gradient gets its own top-k index set
    before that gate's weight outer products and its contribution to dx
    and dh_prev. The element-wise cell-state path stays exact.
    """
    da, dc_prev = _gate_preactivation_grads(cache, grad_h, grad_c)
    dWx, dWh, db, sets = {}, {}, {}, {}
    dx = np.zeros(cell.input_dim)
    dh_prev = np.zeros(cell.hidden)
    for g in GATES:
        S = top_k_indices(da[g], k)
        sets[g] = S
        dWx[g] = sparse_outer(da[g], cache.x, S, flops)
        dWh[g] = sparse_outer(da[g], cache.h_prev, S, flops)
        masked = np.zeros_like(da[g])
        masked[S.indices] = da[g][S.indices]
        db[g] = masked
        dx += masked_transpose_matvec(cell.Wx[g], da[g], S, flops)
        dh_prev += masked_transpose_matvec(cell.Wh[g], da[g], S, flops)
    return LstmStepGradients(dWx, dWh, db, dx, dh_prev, dc_prev, sets)


class CellGradients:
    """Gate gradients accumulated over a whole sequence.

    ``rows[g]`` is a boolean mask of the hidden indices any step selected
    for gate g (all True for full backward); the arrays themselves are
    dense accumulators that only those rows ever wrote to.
    """

    __slots__ = ("dWx", "dWh", "db", "rows")

    def __init__(self, cell):
        h, d = cell.hidden, cell.input_dim
        self.dWx = {g: np.zeros((h, d)) for g in GATES}
        self.dWh = {g: np.zeros((h, h)) for g in GATES}
        self.db = {g: np.zeros(h) for g in GATES}
        self.rows = {g: np.zeros(h, dtype=bool) for g in GATES}

    def add_step(self, step):
        for g in GATES:
            S = step.index_sets[g]
            if S is None:
                self.dWx[g] += step.dWx[g]
                self.dWh[g] += step.dWh[g]
                self.db[g] += step.db[g]
                self.rows[g][:] = True
            else:
                sel = S.indices
                self.dWx[g][sel] += step.dWx[g].block
                self.dWh[g][sel] += step.dWh[g].block
                self.db[g][sel] += step.db[g][sel]
                self.rows[g][sel] = True

    def scale(self, factor):
        for g in GATES:
            self.dWx[g] *= factor
            self.dWh[g] *= factor
            self.db[g] *= factor


class SequenceGradients:
    __slots__ = ("fwd", "bwd", "out_dW", "out_db")

    def __init__(self, fwd, bwd, out_dW, out_db):
        self.fwd = fwd
        self.bwd = bwd
        self.out_dW = out_dW
        self.out_db = out_db


class BiLstmTagger:
    """Bidirectional LSTM over one-hot tokens with a per-position softmax.

    The output projection consumes [h_fwd ; h_bwd] and always
    backpropagates fully; the cells honour their meprop_k budget.
    """

    def __init__(self, fwd, bwd, out, vocab):
        if out.n_in != fwd.hidden + bwd.hidden:
            raise DimensionMismatch(
                f"output layer input size {out.n_in} does not match "
                f"hidden sizes {fwd.hidden}+{bwd.hidden}"
            )
        self.fwd = fwd
        self.bwd = bwd
        self.out = out
        self.vocab = int(vocab)

    @classmethod
    def create(cls, vocab, hidden, n_tags, rng, meprop_k=None):
        fwd = LstmCell.create(hidden, vocab, rng, meprop_k)
        bwd = LstmCell.create(hidden, vocab, rng, meprop_k)
        out = LinearLayer.create(n_tags, 2 * hidden, rng)
        return cls(fwd, bwd, out, vocab)

    @property
    def hidden_sizes(self):
        return [self.fwd.hidden, self.bwd.hidden]

    def parameters(self):
        out = []
        for prefix, cell in (("fwd", self.fwd), ("bwd", self.bwd)):
            for g in GATES:
                out.append((f"{prefix}.{g}.Wx", cell.Wx[g]))
                out.append((f"{prefix}.{g}.Wh", cell.Wh[g]))
                out.append((f"{prefix}.{g}.b", cell.b[g]))
        out.append(("out.W", self.out.W))
        out.append(("out.b", self.out.b))
        return out

    def _one_hot(self, token):
        x = np.zeros(self.vocab)
        x[int(token)] = 1.0
        return x

    def _run_direction(self, cell, xs):
        h = np.zeros(cell.hidden)
        c = np.zeros(cell.hidden)
        hs, caches = [], []
        for x in xs:
            h, c, cache = lstm_step_forward(cell, x, h, c)
            hs.append(h)
            caches.append(cache)
        return hs, caches

    def forward_sequence(self, tokens):
        """Forward a token sequence; returns (logits (T, n_tags), caches)."""
        xs = [self._one_hot(t) for t in tokens]
        hs_f, caches_f = self._run_direction(self.fwd, xs)
        hs_b_rev, caches_b = self._run_direction(self.bwd, xs[::-1])
        hs_b = hs_b_rev[::-1]
        T = len(xs)
        concat = np.empty((T, self.out.n_in))
        for t in range(T):
            concat[t, : self.fwd.hidden] = hs_f[t]
            concat[t, self.fwd.hidden :] = hs_b[t]
        logits, out_cache = linear_forward(self.out, concat)
        return logits, (caches_f, caches_b, out_cache, concat)

    def predict_sequence(self, tokens):
        logits, _ = self.forward_sequence(tokens)
        return np.argmax(logits, axis=1)

    def _bptt(self, cell, caches, dh_per_step, flops):
        grads = CellGradients(cell)
        dx_steps = [None] * len(caches)
        dh_carry = np.zeros(cell.hidden)
        dc_carry = np.zeros(cell.hidden)
        sparse = cell.meprop_k is not None and cell.meprop_k < cell.hidden
        for t in range(len(caches) - 1, -1, -1):
            dh = dh_per_step[t] + dh_carry
            if sparse:
                step = lstm_step_backward_meprop(
                    cell, caches[t], dh, dc_carry, cell.meprop_k, flops
                )
            else:
                step = lstm_step_backward_full(cell, caches[t], dh, dc_carry, flops)
            grads.add_step(step)
            dx_steps[t] = step.dx
            dh_carry = step.dh_prev
            dc_carry = step.dc_prev
        return grads, dx_steps

    def loss_and_gradients(self, tokens, tags, flops=None):
        """Mean per-position cross-entropy, all parameter gradients, and the
        number of correctly tagged positions."""
        logits, (caches_f, caches_b, out_cache, concat) = self.forward_sequence(tokens)
        T = logits.shape[0]
        tags = np.asarray(tags)
        correct = int((np.argmax(logits, axis=1) == tags).sum())
        losses, grad_logits = softmax_cross_entropy_batch(logits, tags)
        grad_logits /= T
        out_dW = grad_logits.T @ concat
        out_db = grad_logits.sum(axis=0)
        dconcat = grad_logits @ self.out.W
        if flops is not None:
            flops.add(2 * T * self.out.n_out * self.out.n_in)
        h_f = self.fwd.hidden
        dh_f = [dconcat[t, :h_f] for t in range(T)]
        dh_b = [dconcat[t, h_f:] for t in range(T)]
        fwd_grads, _ = self._bptt(self.fwd, caches_f, dh_f, flops)
        bwd_grads, _ = self._bptt(self.bwd, caches_b, dh_b[::-1], flops)
        loss = float(losses.mean())
        return loss, SequenceGradients(fwd_grads, bwd_grads, out_dW, out_db), correct

    def prune_direction(self, direction, keep):
        """Jointly drop hidden indices of one direction from every gate.

        Removes the rows of all four gates' weights and biases, the
        matching recurrent-weight columns, and the matching columns of
        the output projection. Returns the output-layer column selection
        so optimizer state can shrink in lockstep.
        """
        cell = self.fwd if direction == "fwd" else self.bwd
        if keep.universe != cell.hidden:
            raise DimensionMismatch(
                f"keep-set universe {keep.universe} does not match hidden "
                f"size {cell.hidden}"
            )
        if len(keep) < 1:
            raise ValueError("cannot prune a direction below 1 neuron")
        sel = keep.indices
        for g in GATES:
            cell.Wx[g] = np.ascontiguousarray(cell.Wx[g][sel])
            cell.Wh[g] = np.ascontiguousarray(cell.Wh[g][np.ix_(sel, sel)])
            cell.b[g] = np.ascontiguousarray(cell.b[g][sel])
        if direction == "fwd":
            cols = np.concatenate(
                [sel, keep.universe + np.arange(self.bwd.hidden)]
            )
        else:
            cols = np.concatenate([np.arange(self.fwd.hidden), self.fwd.hidden + sel])
        self.out.W = np.ascontiguousarray(self.out.W[:, cols])
        return cols
