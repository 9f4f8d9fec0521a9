"""Versioned text dumps of named numpy arrays.

Format::

    # gensemrec arrays v1
    @ name dtype d0,d1,...
    v v v ...

Floats are written with ``repr`` so they round-trip bit-exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

HEADER = "# gensemrec arrays v1"


def dump_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    lines = [HEADER]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        kind = "int" if np.issubdtype(arr.dtype, np.integer) else "float"
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"@ {name} {kind} {shape}")
        flat = arr.ravel()
        lines.append(" ".join(str(int(v)) if kind == "int" else repr(float(v)) for v in flat))
    Path(path).write_text("\n".join(lines) + "\n")


def load_arrays(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != HEADER:
        raise FormatError(f"{path}: missing array-dump header")
    out = {}
    i = 1
    while i < len(lines):
        if not lines[i].startswith("@ "):
            raise FormatError(f"{path}:{i + 1}: expected an array header")
        _, name, kind, shape = (lines[i].split(" ") + [""])[:4]
        dims = tuple(int(s) for s in shape.split(",") if s)
        body = lines[i + 1].split() if i + 1 < len(lines) else []
        if kind == "int":
            arr = np.array([int(v) for v in body], dtype=np.int64)
        else:
            arr = np.array([float(v) for v in body], dtype=float)
        out[name] = arr.reshape(dims)
        i += 2
    return out
