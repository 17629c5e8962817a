"""Versioned parameter checkpoints stored as ``.npz`` archives."""
from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata record.

    Output bytes depend only on the arrays and metadata, so identical models
    give identical files.
    """
    payload = {name: np.asarray(a) for name, a in arrays.items()}
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "names": list(payload)}
    payload[_META_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(_strip_zip_timestamps(buf.getvalue()))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data[_META_KEY]).decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        arrays = {name: data[name].copy() for name in header["names"]}
    return arrays, header["meta"]


def _strip_zip_timestamps(blob: bytes) -> bytes:
    import zipfile

    src = zipfile.ZipFile(io.BytesIO(blob))
    out = io.BytesIO()
    with zipfile.ZipFile(out, "w", compression=zipfile.ZIP_STORED) as dst:
        for info in src.infolist():
            fixed = zipfile.ZipInfo(info.filename, date_time=(1980, 1, 1, 0, 0, 0))
            fixed.external_attr = 0o600 << 16
            dst.writestr(fixed, src.read(info.filename))
    return out.getvalue()


def module_state(module, prefix: str = "") -> dict[str, np.ndarray]:
    state = {f"{prefix}{k}": p.data for k, p in module.parameters().items()}
    state.update({f"{prefix}{k}": b for k, b in module.buffers().items()})
    return state


def load_module_state(module, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
    for k, p in module.parameters().items():
        arr = state[f"{prefix}{k}"]
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    for k, b in module.buffers().items():
        b[...] = state[f"{prefix}{k}"]
