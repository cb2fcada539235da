"""Deterministic JSON bundles with exact float64 array payloads.

Arrays are stored as base64 little-endian buffers so save/load round trips
are bit-exact and output files are byte-identical across reruns.
"""

import base64
import hashlib
import json

import numpy as np


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(d) -> np.ndarray:
    buf = base64.b64decode(d["data"])
    return np.frombuffer(buf, dtype=np.float64).reshape(d["shape"]).copy()


def dump_json(obj, path):
    text = json.dumps(obj, indent=1, sort_keys=True)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
