"""Field dumps: flat little-endian float64 arrays with a JSON sidecar."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .groups import group_from_spec
from .heat import GridField

SIDECAR_SCHEMA = "fujita_lab.field/1"


def save_field(base, u: GridField) -> Path:
    """Write ``base.bin`` and ``base.json``; returns the .bin path."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    binp = base.with_suffix(".bin")
    np.ascontiguousarray(u.values, dtype="<f8").tofile(binp)
    meta = {
        "schema": SIDECAR_SCHEMA,
        "dtype": "<f8",
        "order": "C",
        "shape": list(u.values.shape),
        "spacing": list(u.model.spacing),
        "time": u.time,
        "group": u.model.spec(),
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return binp


def load_field(path) -> GridField:
    """Read a dump written by save_field (either the .bin or .json path)."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    g = group_from_spec(meta["group"])
    values = np.fromfile(path.with_suffix(".bin"), dtype=meta.get("dtype", "<f8"))
    shape = tuple(meta["shape"])
    if values.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {values.size} values do not fill shape {shape}")
    return GridField(values.reshape(shape), g, time=meta.get("time"))
