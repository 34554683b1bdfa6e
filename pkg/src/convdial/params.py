"""Parameter registry and the binary checkpoint format.

Checkpoint layout (documented in docs/formats.md):

    bytes 0-7    magic ``b"CVDLCKPT"``
    bytes 8-11   little-endian uint32: manifest byte length
    manifest     UTF-8 JSON with format version, architecture hash, dtype,
                 seed, and the ordered entry list (name, shape, trainable)
    payload      for each entry in declaration order, the raw values as
                 little-endian floats (or int64 for counters), row-major
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .autodiff import Tensor

MAGIC = b"CVDLCKPT"
FORMAT_VERSION = 1


class ParameterStore:
    """Ordered registry of named tensors and buffers for one model."""

    def __init__(self):
        self._entries: dict[str, tuple[object, bool]] = {}

    def register(self, name: str, value, trainable: bool = True):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._entries[name] = (value, trainable)

    def register_layer(self, prefix: str, layer):
        for name, tensor in layer.parameters():
            self.register(f"{prefix}.{name}", tensor, trainable=True)
        for name, arr in layer.buffers():
            self.register(f"{prefix}.{name}", arr, trainable=False)

    def names(self):
        return list(self._entries)

    def trainable(self) -> list[Tensor]:
        return [v for v, t in self._entries.values() if t]

    def entries(self):
        return [(n, v, t) for n, (v, t) in self._entries.items()]

    def gradient_arrays(self):
        """Gradients of trainable parameters; zeros where none was produced."""
        out = {}
        for name, (value, trainable) in self._entries.items():
            if trainable:
                g = value.grad
                out[name] = np.zeros_like(value.data) if g is None else g
        return out

    def zero_grad(self):
        for value, trainable in self._entries.values():
            if trainable:
                value.grad = None

    def architecture_hash(self, extra: dict | None = None) -> str:
        desc = {
            "entries": [(n, [int(s) for s in _array_of(v).shape], bool(t), str(_array_of(v).dtype))
                        for n, v, t in self.entries()],
            "extra": extra or {},
        }
        blob = json.dumps(desc, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _array_of(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else value


def save_checkpoint(store: ParameterStore, path, seed: int, arch_extra: dict | None = None,
                    meta: dict | None = None):
    entries = store.entries()
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch_hash": store.architecture_hash(arch_extra),
        "dtype": str(_array_of(entries[0][1]).dtype) if entries else "float32",
        "seed": int(seed),
        "entries": [{"name": n, "shape": [int(s) for s in _array_of(v).shape],
                     "dtype": str(_array_of(v).dtype), "trainable": bool(t)}
                    for n, v, t in entries],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).astype("<u4").tobytes())
        fh.write(blob)
        for _, value, _ in entries:
            arr = _array_of(value)
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a convdial checkpoint (bad magic)")
        length = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        return json.loads(fh.read(length).decode("utf-8"))


def load_checkpoint(store: ParameterStore, path, arch_extra: dict | None = None) -> dict:
    """Fill ``store`` in place from a checkpoint; returns the manifest."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a convdial checkpoint (bad magic)")
        length = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        manifest = json.loads(fh.read(length).decode("utf-8"))
        expected = store.architecture_hash(arch_extra)
        if manifest["arch_hash"] != expected:
            raise ValueError(
                f"{path}: checkpoint architecture hash {manifest['arch_hash'][:12]} does not match "
                f"model {expected[:12]}")
        entries = store.entries()
        if len(entries) != len(manifest["entries"]):
            raise ValueError(f"{path}: entry count mismatch")
        for (name, value, _), spec in zip(entries, manifest["entries"]):
            if name != spec["name"]:
                raise ValueError(f"{path}: entry order mismatch at {name!r} vs {spec['name']!r}")
            arr = _array_of(value)
            raw = fh.read(arr.nbytes)
            loaded = np.frombuffer(raw, dtype=np.dtype(spec["dtype"]).newbyteorder("<"))
            loaded = loaded.reshape(spec["shape"]).astype(arr.dtype)
            arr[...] = loaded
    return manifest
