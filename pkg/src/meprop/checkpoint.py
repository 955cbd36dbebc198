"""Self-describing binary container for models and optimizer state.

Layout: magic, a big-endian header length, a canonical JSON header
(sorted keys, no whitespace), then the raw little-endian array payloads
in header order. Writing is fully deterministic, so save -> load ->
save reproduces the file byte for byte.
"""

import json
import struct

import numpy as np

from .layers import MLP, LinearLayer
from .optim import AdamState
from .recurrent import GATES, BiLstmTagger, LstmCell

_MAGIC = b"MPCK"
_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _model_header(model):
    if isinstance(model, MLP):
        return {
            "kind": "mlp",
            "activations": list(model.activations),
            "dropout_rate": model.dropout_rate,
            "meprop_k": [layer.meprop_k for layer in model.layers],
        }
    if isinstance(model, BiLstmTagger):
        return {
            "kind": "bilstm_tagger",
            "vocab": model.vocab,
            "meprop_k": {"fwd": model.fwd.meprop_k, "bwd": model.bwd.meprop_k},
        }
    raise TypeError(f"cannot checkpoint model of type {type(model).__name__}")


def save_checkpoint(path, model, optimizer=None):
    entries = [(f"model:{name}", arr) for name, arr in model.parameters()]
    header = {"format_version": _VERSION, "model": _model_header(model)}
    if optimizer is not None:
        header["optimizer"] = {
            "hyper": optimizer.hyper,
            "lazy": optimizer.lazy,
            "global_steps": optimizer.global_step_counts(),
        }
        entries.extend(
            (f"optim:{key}", arr) for key, arr in optimizer.state_arrays()
        )
    else:
        header["optimizer"] = None
    manifest = []
    blobs = []
    for key, arr in entries:
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
        manifest.append({"key": key, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(arr.tobytes())
    header["arrays"] = manifest
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(">II", _VERSION, len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)


def _rebuild_model(spec, arrays):
    if spec["kind"] == "mlp":
        layers = []
        i = 0
        while f"model:layers.{i}.W" in arrays:
            layers.append(
                LinearLayer(
                    arrays[f"model:layers.{i}.W"],
                    arrays[f"model:layers.{i}.b"],
                    spec["meprop_k"][i],
                )
            )
            i += 1
        return MLP(layers, spec["activations"], spec["dropout_rate"])
    if spec["kind"] == "bilstm_tagger":
        cells = {}
        for direction in ("fwd", "bwd"):
            Wx = {g: arrays[f"model:{direction}.{g}.Wx"] for g in GATES}
            Wh = {g: arrays[f"model:{direction}.{g}.Wh"] for g in GATES}
            b = {g: arrays[f"model:{direction}.{g}.b"] for g in GATES}
            cells[direction] = LstmCell(Wx, Wh, b, spec["meprop_k"][direction])
        out = LinearLayer(arrays["model:out.W"], arrays["model:out.b"])
        return BiLstmTagger(cells["fwd"], cells["bwd"], out, spec["vocab"])
    raise ValueError(f"unknown model kind {spec['kind']!r}")


def load_checkpoint(path):
    """Returns (model, optimizer); the optimizer is None if absent."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, header_len = struct.unpack(">II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode())
        arrays = {}
        for entry in header["arrays"]:
            dtype = _DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated array payload")
            arrays[entry["key"]] = np.frombuffer(raw, dtype=dtype).reshape(
                entry["shape"]
            ).copy()
    model = _rebuild_model(header["model"], arrays)
    optimizer = None
    if header["optimizer"] is not None:
        spec = header["optimizer"]
        optimizer = AdamState(model.parameters(), lazy=spec["lazy"], **spec["hyper"])
        optim_arrays = {
            key[len("optim:"):]: value
            for key, value in arrays.items()
            if key.startswith("optim:")
        }
        optimizer.load_state_arrays(optim_arrays, spec.get("global_steps"))
    return model, optimizer
