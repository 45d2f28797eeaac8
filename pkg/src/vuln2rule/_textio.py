"""Shared decimal-text persistence: a format marker line, ``# key value``
metadata, then named matrices.  Floats are written with repr() so that
load(save(x)) round-trips exactly."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatVersionMismatch, MalformedRecord, UnreadableFile


def write_model(
    path: str | Path,
    marker: str,
    meta: dict[str, str],
    matrices: dict[str, np.ndarray],
) -> None:
    lines = [marker]
    lines += [f"# {key} {value}" for key, value in meta.items()]
    for name, matrix in matrices.items():
        arr = np.atleast_2d(np.asarray(matrix, dtype=float))
        lines.append(f"matrix {name} {arr.shape[0]} {arr.shape[1]}")
        lines += [" ".join(repr(float(v)) for v in row) for row in arr]
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


def read_model(
    path: str | Path, marker: str
) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    try:
        lines = path.read_text("utf-8").splitlines()
    except OSError as exc:
        raise UnreadableFile(str(exc)) from exc
    if not lines or lines[0].strip() != marker:
        raise FormatVersionMismatch(f"{path}: expected {marker!r} on the first line")
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].strip().partition(" ")
        meta[key] = value
        i += 1
    matrices: dict[str, np.ndarray] = {}
    while i < len(lines):
        header = lines[i].split()
        if len(header) != 4 or header[0] != "matrix":
            raise MalformedRecord(f"{path}: bad matrix header {lines[i]!r}")
        name, rows, cols = header[1], int(header[2]), int(header[3])
        block = lines[i + 1 : i + 1 + rows]
        if len(block) != rows:
            raise MalformedRecord(f"{path}: matrix {name} truncated")
        arr = np.empty((rows, cols))
        for r, line in enumerate(block):
            values = line.split()
            if len(values) != cols:
                raise MalformedRecord(
                    f"{path}: matrix {name} row {r} has {len(values)} values"
                )
            arr[r] = [float(v) for v in values]
        matrices[name] = arr
        i += 1 + rows
    return meta, matrices
