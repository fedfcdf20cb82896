"""Binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"CTXKGE\\x00\\x01"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header
    rest          payload: the arrays listed in the header, raw C-order <f8

Header keys: ``format`` (1), ``model_kind``, ``dim``, ``vocab_hash``,
``n_entities``, ``n_relations``, ``config``, ``loss_curve``, ``arrays``
(list of ``{name, dtype, shape, offset, nbytes}`` with offsets relative to
the payload start) and ``payload_sha256``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from ..graph import ContextGraph
from .models import MODEL_KINDS, KgeModel

MAGIC = b"CTXKGE\x00\x01"


class CheckpointError(Exception):
    pass


class VocabularyMismatchError(CheckpointError):
    pass


def save_checkpoint(model: KgeModel, path, loss_curve: Sequence[float] = ()) -> None:
    arrays = model.arrays()
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "dtype": "<f8", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": 1,
        "model_kind": model.kind,
        "dim": model.dim,
        "vocab_hash": model.vocab_hash(),
        "n_entities": len(model.entity_ids),
        "n_relations": len(model.relation_ids),
        "config": model.config,
        "loss_curve": [float(x) for x in loss_curve],
        "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload)


def read_header(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = blob[16 + hlen:]
    expected = sum(e["nbytes"] for e in header.get("arrays", []))
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    return header, payload


def load_checkpoint(path, graph: ContextGraph) -> tuple[KgeModel, dict]:
    """Load a model for ``graph``; the graph's vocabulary hash must match."""
    header, payload = read_header(path)
    graph.freeze()
    if header["vocab_hash"] != graph.vocab_hash():
        raise VocabularyMismatchError(
            f"{path}: checkpoint vocabulary {header['vocab_hash'][:12]} != graph vocabulary {graph.vocab_hash()[:12]}")
    cls = MODEL_KINDS.get(header["model_kind"])
    if cls is None:
        raise CheckpointError(f"{path}: unknown model kind {header['model_kind']!r}")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float64)
    model = cls(graph.entity_ids, graph.relation_ids, arrays["entity"], arrays["relation"], header.get("config"))
    return model, header
