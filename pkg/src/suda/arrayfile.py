"""Tiny binary container: one JSON header line, then raw little-endian f64 data.

Layout::

    <json header, utf-8, single line>\n
    <array 0 bytes><array 1 bytes>...

The header is ``{"meta": {...}, "arrays": [{"name", "shape"}, ...]}``; every
array is C-order float64, little-endian, stored in header order.  Good enough
for dataset and reference-optimum caches without pulling in a heavier format.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    header = {
        "meta": meta or {},
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(count * 8)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(spec["shape"]).copy()
    return arrays, header["meta"]
