"""Single-file tensor container.

Layout: u64 little-endian header length, UTF-8 JSON header, then the raw
little-endian f32 data of every tensor, back to back in header order. The
header maps tensor names to `{"shape": [...], "offset": bytes, "nbytes": n}`
and carries any extra metadata (model config, vocabulary, ...) under
`"meta"`.
"""

import json
from pathlib import Path

import numpy as np

from fewvlm.utils.errors import BadMagic, ShapeMismatch

MAGIC = "fewvlm-ckpt-1"


def save_checkpoint(path: Path | str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = {}
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        offset += len(blob)
        blobs.append(blob)

    header = json.dumps(
        {"magic": MAGIC, "tensors": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(np.array([len(header)], dtype="<u8").tobytes())
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    """
    Read a checkpoint written by `save_checkpoint`.

    Returns
    -------
    tuple[dict[str, np.ndarray], dict]
        Float32 tensors keyed by name (header order) and the `meta` mapping.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise BadMagic(f"{path} is too short to be a checkpoint")
    hlen = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise BadMagic(f"{path} has no readable checkpoint header") from err
    if header.get("magic") != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, got {header.get('magic')!r}")

    data = raw[8 + hlen :]
    tensors = {}
    for name, e in header["tensors"].items():
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * n or e["offset"] + e["nbytes"] > len(data):
            raise ShapeMismatch(f"{path}: tensor {name} does not fit its declared shape {e['shape']}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=e["offset"])
        tensors[name] = arr.reshape(e["shape"]).astype(np.float32)
    return tensors, header["meta"]
