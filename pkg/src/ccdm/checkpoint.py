"""Flat binary checkpoint container.

Layout::

    CCDM-CKPT 1\\n
    <header length in bytes, decimal>\\n
    <header: UTF-8 text, one line per entry>
    <payload: little-endian float64 values, concatenated>

The header holds one ``meta <json>`` line followed by one line per tensor,
``<name>\\t<dim>,<dim>,...\\t<byte offset>``, where offsets are relative to the
start of the payload. A scalar has an empty shape field. Entries are written in
insertion order, so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CCDM-CKPT 1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    lines = ["meta " + json.dumps(meta or {}, sort_keys=True)]
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        lines.append(f"{name}\t{','.join(str(d) for d in arr.shape)}\t{offset}")
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = ("\n".join(lines) + "\n").encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(header)}\n".encode())
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_header(path) -> tuple[dict, list[tuple[str, tuple[int, ...], int]], int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    meta, entries, start = _parse_header(raw, path)
    return meta, entries, start


def _parse_header(raw: bytes, path):
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic at byte 0")
    pos = len(MAGIC)
    nl = raw.find(b"\n", pos)
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header length at byte {pos}")
    try:
        hlen = int(raw[pos:nl])
    except ValueError:
        raise CheckpointError(f"{path}: bad header length at byte {pos}") from None
    start = nl + 1
    header = raw[start:start + hlen].decode()
    if len(header.encode()) != hlen:
        raise CheckpointError(f"{path}: truncated header at byte {start}")
    lines = header.splitlines()
    if not lines or not lines[0].startswith("meta "):
        raise CheckpointError(f"{path}: missing meta line at byte {start}")
    meta = json.loads(lines[0][5:])
    entries = []
    for line in lines[1:]:
        name, shape, off = line.split("\t")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        entries.append((name, dims, int(off)))
    return meta, entries, start + hlen


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    meta, entries, start = _parse_header(raw, path)
    tensors = {}
    for name, dims, off in entries:
        count = int(np.prod(dims, dtype=np.int64))
        begin = start + off
        end = begin + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: tensor {name!r} truncated at byte {len(raw)}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=begin) \
            .reshape(dims).astype(np.float64)
    return tensors, meta
