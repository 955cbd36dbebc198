"""Adam with lazily advanced per-row state for sparse row gradients.

When a step names a row subset, only those rows have their moments
decayed, their step counts advanced, and their values changed; every
other row keeps its exact bytes. A non-lazy mode (moments decay
everywhere, one global step count) exists for sensitivity checks.

The row-wise update is the hottest kernel in training; when numba is
installed it runs as a fused single pass, otherwise a vectorized numpy
path with identical operation order is used.
"""

import numpy as np

from .errors import DimensionMismatch

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None

DEFAULT_HYPER = {"lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


if njit is not None:

    @njit(cache=True)
    def _adam_rows_kernel(param, grad, rows, m, v, steps, lr, b1, b2, eps,
                          probe):
        total = 0.0
        for ri in range(rows.shape[0]):
            r = rows[ri]
            steps[r] += 1
            t = float(steps[r])
            bc1 = 1.0 - b1 ** t
            bc2 = 1.0 - b2 ** t
            for j in range(param.shape[1]):
                g = grad[ri, j]
                mm = b1 * m[r, j] + (1.0 - b1) * g
                vv = b2 * v[r, j] + (1.0 - b2) * (g * g)
                m[r, j] = mm
                v[r, j] = vv
                delta = mm / bc1 / (np.sqrt(vv / bc2) + eps) * lr
                param[r, j] -= delta
                if probe:
                    total += abs(delta)
        return total

else:
    _adam_rows_kernel = None


def _as_2d(array):
    return array if array.ndim == 2 else array.reshape(-1, 1)


class _Slot:
    __slots__ = ("m", "v", "steps", "t1", "t2")

    def __init__(self, m, v, steps):
        self.m = m
        self.v = v
        self.steps = steps
        # scratch for the numpy dense path; rebuilt after pruning surgery
        self.t1 = np.empty_like(m)
        self.t2 = np.empty_like(m)


class AdamState:
    """Optimizer state for a fixed set of named parameters.

    ``params`` is an iterable of (name, array); moments mirror each
    parameter's shape at all times, including through pruning surgery.
    """

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8,
                 lazy=True):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.lazy = bool(lazy)
        self.slots = {}
        for name, array in params:
            self.slots[name] = _Slot(
                np.zeros_like(array, dtype=np.float64),
                np.zeros_like(array, dtype=np.float64),
                np.zeros(array.shape[0], dtype=np.int64) if self.lazy else 0,
            )

    @property
    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps}

    def _slot_for(self, name, param):
        slot = self.slots[name]
        if slot.m.shape != param.shape:
            raise DimensionMismatch(
                f"optimizer slot {name!r} has shape {slot.m.shape} but the "
                f"parameter has shape {param.shape}"
            )
        return slot

    def _run_kernel(self, slot, param, grad, rows, probe):
        total = _adam_rows_kernel(
            _as_2d(param), _as_2d(np.ascontiguousarray(grad)), rows,
            _as_2d(slot.m), _as_2d(slot.v), slot.steps,
            self.lr, self.beta1, self.beta2, self.eps, bool(probe),
        )
        return float(total) if probe else None

    def step_dense(self, name, param, grad, probe=False):
        """Bias-corrected Adam update on every entry of one parameter."""
        slot = self._slot_for(name, param)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise DimensionMismatch(
                f"gradient shape {grad.shape} does not match parameter "
                f"shape {param.shape} for {name!r}"
            )
        if self.lazy and _adam_rows_kernel is not None:
            rows = np.arange(param.shape[0], dtype=np.intp)
            return self._run_kernel(slot, param, grad, rows, probe)
        b1, b2 = self.beta1, self.beta2
        slot.steps += 1
        if self.lazy:
            first = slot.steps[0]
            if (slot.steps == first).all():
                t = float(first)
            else:
                t = slot.steps.astype(np.float64)
                if param.ndim == 2:
                    t = t[:, None]
        else:
            t = float(slot.steps)
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        if slot.t1.shape != param.shape:
            slot.t1 = np.empty_like(slot.m)
            slot.t2 = np.empty_like(slot.m)
        m, v, t1, t2 = slot.m, slot.v, slot.t1, slot.t2
        m *= b1
        np.multiply(grad, 1.0 - b1, out=t1)
        m += t1
        v *= b2
        np.multiply(grad, grad, out=t1)
        t1 *= 1.0 - b2
        v += t1
        np.divide(v, bc2, out=t2)
        np.sqrt(t2, out=t2)
        t2 += self.eps
        np.divide(m, bc1, out=t1)
        t1 /= t2
        t1 *= self.lr
        param -= t1
        if probe:
            return float(np.abs(t1).sum())
        return None

    def step_sparse(self, name, param, rows, grad_rows, probe=False):
        """Adam update restricted to the given rows.

        ``rows`` is a sorted index array over the parameter's leading
        dimension and ``grad_rows`` the gradient for just those rows.
        Rows not listed are untouched bit-for-bit (lazy mode).
        """
        slot = self._slot_for(name, param)
        rows = np.asarray(rows, dtype=np.intp)
        if rows.size == 0:
            return 0.0 if probe else None
        if rows[0] < 0 or rows[-1] >= param.shape[0]:
            raise IndexError(
                f"row indices out of range for parameter {name!r} with "
                f"{param.shape[0]} rows"
            )
        grad_rows = np.asarray(grad_rows, dtype=np.float64)
        if grad_rows.shape != (rows.size,) + param.shape[1:]:
            raise DimensionMismatch(
                f"sparse gradient shape {grad_rows.shape} does not match "
                f"{rows.size} rows of parameter shape {param.shape}"
            )
        if not self.lazy:
            dense = np.zeros_like(param)
            dense[rows] = grad_rows
            return self.step_dense(name, param, dense, probe)
        if _adam_rows_kernel is not None:
            return self._run_kernel(slot, param, grad_rows, rows, probe)
        b1, b2 = self.beta1, self.beta2
        slot.steps[rows] += 1
        t = slot.steps[rows].astype(np.float64)
        if param.ndim == 2:
            t = t[:, None]
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        # same operation order as the dense path, so a full row set gives
        # an identical trajectory
        m = b1 * slot.m[rows]
        m += grad_rows * (1.0 - b1)
        v = b2 * slot.v[rows]
        v += (grad_rows * grad_rows) * (1.0 - b2)
        slot.m[rows] = m
        slot.v[rows] = v
        denom = np.sqrt(v / bc2)
        denom += self.eps
        delta = m / bc1
        delta /= denom
        delta *= self.lr
        param[rows] -= delta
        if probe:
            return float(np.abs(delta).sum())
        return None

    def prune_rows(self, name, keep):
        """Shrink a slot to the kept rows, preserving their values."""
        slot = self.slots[name]
        sel = np.asarray(keep, dtype=np.intp)
        slot.m = np.ascontiguousarray(slot.m[sel])
        slot.v = np.ascontiguousarray(slot.v[sel])
        if self.lazy:
            slot.steps = np.ascontiguousarray(slot.steps[sel])
        slot.t1 = np.empty_like(slot.m)
        slot.t2 = np.empty_like(slot.m)

    def prune_cols(self, name, keep):
        """Shrink a matrix slot to the kept columns."""
        slot = self.slots[name]
        sel = np.asarray(keep, dtype=np.intp)
        slot.m = np.ascontiguousarray(slot.m[:, sel])
        slot.v = np.ascontiguousarray(slot.v[:, sel])
        slot.t1 = np.empty_like(slot.m)
        slot.t2 = np.empty_like(slot.m)

    def reset(self):
        """Zero all moments and step counts; hyperparameters survive."""
        for slot in self.slots.values():
            slot.m[:] = 0.0
            slot.v[:] = 0.0
            if self.lazy:
                slot.steps[:] = 0
            else:
                slot.steps = 0

    def state_arrays(self):
        """Deterministically ordered (key, array) pairs for serialization."""
        out = []
        for name in sorted(self.slots):
            slot = self.slots[name]
            out.append((f"{name}.m", slot.m))
            out.append((f"{name}.v", slot.v))
            if self.lazy:
                out.append((f"{name}.steps", slot.steps))
        return out

    def global_step_counts(self):
        """Per-slot global counts; only meaningful in non-lazy mode."""
        if self.lazy:
            return {}
        return {name: int(slot.steps) for name, slot in self.slots.items()}

    def load_state_arrays(self, arrays, global_steps=None):
        for key, value in arrays.items():
            name, _, field = key.rpartition(".")
            slot = self.slots[name]
            setattr(slot, field, np.ascontiguousarray(value))
            if field in ("m", "v"):
                slot.t1 = np.empty_like(slot.m)
                slot.t2 = np.empty_like(slot.m)
        if not self.lazy and global_steps:
            for name, count in global_steps.items():
                self.slots[name].steps = int(count)
