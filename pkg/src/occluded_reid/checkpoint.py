"""FRTM1 text checkpoints.

Layout: a ``FRTM1`` line, then ``meta key=value`` lines, then one block per
parameter: ``param <name> <rows> <cols>`` followed by ``rows`` lines of
``cols`` shortest round-trip floats. Vectors are stored as a single row.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import RunConfig
from .objective import Model, init_model

MAGIC = "FRTM1"
_SHAPE_KEYS = ("c", "c_raw", "n_classes", "gcn_layers", "steps", "frt_layers", "frt_hidden")


class CheckpointError(ValueError):
    pass


def save(path, model: Model) -> None:
    lines = [MAGIC]
    for k, v in model.meta.items():
        if "\n" in str(v) or "=" in k:
            raise CheckpointError(f"meta entry {k!r} cannot be serialised")
        lines.append(f"meta {k}={v}")
    for name, p in model.params.params.items():
        arr = np.atleast_2d(p.value)
        if arr.ndim != 2:
            raise CheckpointError(f"parameter {name} has {p.value.ndim} dimensions")
        lines.append(f"param {name} {arr.shape[0]} {arr.shape[1]}")
        lines.extend(" ".join(repr(float(x)) for x in row) for row in arr)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _template(meta) -> Model:
    try:
        kw = {k: int(meta[k]) for k in _SHAPE_KEYS}
    except KeyError as exc:
        raise CheckpointError(f"meta lacks {exc.args[0]}") from None
    except ValueError:
        raise CheckpointError("non-integer shape entry in meta") from None
    cfg = RunConfig(c=kw["c"], gcn_layers=kw["gcn_layers"], steps=kw["steps"],
                    frt_layers=kw["frt_layers"], frt_hidden=kw["frt_hidden"])
    return init_model(kw["c_raw"], kw["n_classes"], cfg)


def load(path) -> Model:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if not lines or lines[0].strip() != MAGIC:
        raise CheckpointError(f"{path}: not an {MAGIC} checkpoint")
    meta, values = {}, {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        if line.startswith("meta "):
            key, sep, val = line[5:].partition("=")
            if not sep:
                raise CheckpointError(f"line {i + 1}: meta entry without '='")
            meta[key] = val
            i += 1
        elif line.startswith("param "):
            head = line.split()
            if len(head) != 4:
                raise CheckpointError(f"line {i + 1}: expected 'param <name> <rows> <cols>'")
            name = head[1]
            try:
                rows, cols = int(head[2]), int(head[3])
            except ValueError:
                raise CheckpointError(f"line {i + 1}: bad shape") from None
            body = lines[i + 1:i + 1 + rows]
            if len(body) != rows:
                raise CheckpointError(f"parameter {name}: truncated")
            try:
                arr = np.array([[float(x) for x in r.split()] for r in body], dtype=np.float64)
            except ValueError:
                raise CheckpointError(f"parameter {name}: non-numeric entry") from None
            if arr.shape != (rows, cols):
                raise CheckpointError(f"parameter {name}: expected {rows}x{cols} values")
            if name in values:
                raise CheckpointError(f"parameter {name} appears twice")
            values[name] = arr
            i += 1 + rows
        else:
            raise CheckpointError(f"line {i + 1}: unrecognised entry")
    model = _template(meta)
    model.meta = meta
    expected = set(model.params.names())
    if set(values) != expected:
        missing = sorted(expected - set(values))
        extra = sorted(set(values) - expected)
        raise CheckpointError(f"parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, arr in values.items():
        p = model.params.params[name]
        if arr.size != p.value.size:
            raise CheckpointError(f"parameter {name}: size {arr.size}, expected {p.value.size}")
        p.value = arr.reshape(p.value.shape)
    return model
