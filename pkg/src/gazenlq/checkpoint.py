"""Single-file checkpoint blobs: magic, JSON header, raw little-endian arrays."""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GNLQCKPT"
GAZE_VERSION = "gazenlq-gaze-v1"
GROUND_VERSION = "gazenlq-ground-v1"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "bool": "|b1"}


class CheckpointError(ValueError):
    pass


def _as_numpy(value):
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.asarray(value)


def save_checkpoint(path, version, config, arrays, meta=None):
    """Write ``arrays`` (name -> array/tensor) with a version string and config echo."""
    entries, blobs = [], []
    for name, value in arrays.items():
        arr = _as_numpy(value)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "nbytes": len(raw)})
        blobs.append(raw)
    header = json.dumps(
        {"version": version, "config": config, "meta": meta or {}, "arrays": entries},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path, expected_version=None):
    """Return ``(version, config, arrays, meta)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a gazenlq checkpoint")
    off = len(MAGIC)
    if len(data) < off + 4:
        raise CheckpointError("truncated checkpoint header")
    (n_header,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + n_header].decode("utf-8"))
    off += n_header
    version = header["version"]
    if expected_version is not None and version != expected_version:
        raise CheckpointError(f"expected checkpoint version {expected_version!r}, found {version!r}")
    arrays = {}
    for entry in header["arrays"]:
        end = off + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"truncated checkpoint data at {entry['name']}")
        arr = np.frombuffer(data[off:end], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
        off = end
    return version, header["config"], arrays, header["meta"]


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_to_arrays(module, prefix=""):
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_state(module, arrays, prefix=""):
    state = {
        k[len(prefix) :]: torch.from_numpy(np.array(v))
        for k, v in arrays.items()
        if k.startswith(prefix)
    }
    module.load_state_dict(state)
