"""Binary file containers: JSON-headed float64 block files and RLE mask files.

The block container is a little-endian uint64 header length, a UTF-8 JSON
header, then raw little-endian float64 blocks back to back. Checkpoints and
dataset caches both use it; round-trips are bit-exact because blocks are
written with ``tobytes`` and reread with ``frombuffer``.
"""

from __future__ import annotations

import json
import struct

import numpy as np

_LEN_FMT = "<Q"
_LEN_SIZE = struct.calcsize(_LEN_FMT)


class ContainerError(ValueError):
    """Raised for malformed container or mask files."""


def write_blocks(path, header: dict, blocks) -> None:
    """Write a container file; block shapes are recorded in the header."""
    blocks = [np.ascontiguousarray(b, dtype="<f8") for b in blocks]
    full_header = dict(header)
    full_header["block_shapes"] = [list(b.shape) for b in blocks]
    payload = json.dumps(full_header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack(_LEN_FMT, len(payload)))
        f.write(payload)
        for b in blocks:
            f.write(b.tobytes())


def read_blocks(path):
    """Read a container file, returning (header, [float64 arrays])."""
    with open(path, "rb") as f:
        raw_len = f.read(_LEN_SIZE)
        if len(raw_len) != _LEN_SIZE:
            raise ContainerError(f"{path}: truncated header length")
        (hlen,) = struct.unpack(_LEN_FMT, raw_len)
        payload = f.read(hlen)
        if len(payload) != hlen:
            raise ContainerError(f"{path}: truncated header")
        try:
            header = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: bad header: {exc}") from None
        shapes = header.get("block_shapes")
        if shapes is None:
            raise ContainerError(f"{path}: header missing block_shapes")
        blocks = []
        for shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise ContainerError(f"{path}: truncated block of shape {shape}")
            blocks.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
    return header, blocks


def write_masks(path, masks: np.ndarray) -> None:
    """Write boolean rasters as run-length counts with a JSON header.

    Runs alternate starting from False over the flattened (C-order) raster
    stack, so an all-False stack is the single run [size].
    """
    masks = np.asarray(masks, dtype=bool)
    flat = masks.ravel()
    if flat.size == 0:
        runs = []
    else:
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0]:
            runs = [0] + runs  # preserve the False-first convention
    header = {
        "format": "cdep-masks",
        "shape": list(masks.shape),
        "count": int(masks.shape[0]) if masks.ndim else 0,
        "runs": runs,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(header, f, sort_keys=True)


def read_masks(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        try:
            header = json.load(f)
        except json.JSONDecodeError as exc:
            raise ContainerError(f"{path}: bad mask header: {exc}") from None
    if header.get("format") != "cdep-masks":
        raise ContainerError(f"{path}: not a mask file")
    shape = tuple(header["shape"])
    total = int(np.prod(shape)) if shape else 0
    runs = header["runs"]
    if sum(runs) != total:
        raise ContainerError(f"{path}: run lengths sum to {sum(runs)}, expected {total}")
    flat = np.zeros(total, dtype=bool)
    pos, value = 0, False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(shape)
