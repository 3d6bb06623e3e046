"""STRMTNSR tensor dumps and parameter manifests.

Layout: 8-byte magic ``STRMTNSR``, u32 rank, rank x u64 extents, then the
little-endian float64 payload in row-major order.
"""

import json
import re
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STRMTNSR"


class TensorFormatError(ValueError):
    pass


def dumps_tensor(array):
    array = np.ascontiguousarray(array, dtype="<f8")
    head = MAGIC + struct.pack("<I", array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + array.tobytes(order="C")


def loads_tensor(blob):
    if blob[:8] != MAGIC:
        raise TensorFormatError("bad magic")
    (rank,) = struct.unpack_from("<I", blob, 8)
    shape = struct.unpack_from(f"<{rank}Q", blob, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(blob) - offset != 8 * count:
        raise TensorFormatError(f"payload holds {len(blob) - offset} bytes, expected {8 * count}")
    return np.frombuffer(blob, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def write_tensor(path, array):
    Path(path).write_bytes(dumps_tensor(array))


def read_tensor(path):
    return loads_tensor(Path(path).read_bytes())


_BLOCK_RE = re.compile(r"block(\d+)\.")


def save_checkpoint(directory, params):
    """Write one tensor file per parameter plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        fname = name.replace("/", "_") + ".strmtnsr"
        write_tensor(directory / fname, params[name])
        m = _BLOCK_RE.search(name)
        entries.append({
            "name": name,
            "file": fname,
            "block": int(m.group(1)) if m else None,
            "shape": list(np.shape(params[name])),
        })
    (directory / "manifest.json").write_text(json.dumps({"tensors": entries}, indent=2))
    return directory / "manifest.json"


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = {}
    for entry in manifest["tensors"]:
        arr = read_tensor(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise TensorFormatError(f"{entry['name']}: shape {arr.shape} != manifest {entry['shape']}")
        params[entry["name"]] = arr
    return params
