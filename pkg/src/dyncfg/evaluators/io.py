"""Binary evaluator artifacts: magic, header length, JSON header, raw float64 payload."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .learned import AlignmentScorer, CapabilityRegressor, DiscriminatorScorer, RewardScorer

MAGIC = b"DCFGEV01"
_KINDS = {cls.kind: cls for cls in (AlignmentScorer, DiscriminatorScorer, RewardScorer, CapabilityRegressor)}


class ArtifactError(ValueError):
    pass


def _json_params(ev) -> dict:
    params = ev.get_params(deep=False)
    params.pop("warm_start_from", None)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


def config_hash(params: dict) -> str:
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()


def evaluator_bytes(ev) -> bytes:
    params = _json_params(ev)
    arrays = ev.state_arrays()
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {
        "format": 1,
        "kind": ev.kind,
        "dims": {"d": ev.n_features_in_, "n_classes": ev.n_classes_},
        "seed": params["seed"],
        "config_hash": config_hash(params),
        "params": params,
        "dtype": "<f8",
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_evaluator(ev, path) -> str:
    """Write ``ev`` atomically; returns the sha256 of the file contents."""
    data = evaluator_bytes(ev)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ArtifactError(f"{path}: not an evaluator artifact")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_evaluator(path):
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ArtifactError(f"{path}: not an evaluator artifact")
    (n,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start: start + n].decode("utf-8"))
    payload = data[start + n:]
    cls = _KINDS.get(header["kind"])
    if cls is None:
        raise ArtifactError(f"{path}: unknown evaluator kind {header['kind']!r}")
    params = dict(header["params"])
    if "hidden" in params:
        params["hidden"] = tuple(params["hidden"])
    if config_hash(header["params"]) != header["config_hash"]:
        raise ArtifactError(f"{path}: config hash does not match header parameters")
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"]: e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ArtifactError(f"{path}: truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).copy()
    ev = cls(**params)
    return ev.load_state(header["dims"]["d"], header["dims"]["n_classes"], arrays)
