"""Versioned binary parameter snapshots plus a JSON metadata sidecar.

Byte layout (all integers little-endian):

    magic   4 bytes  b"OSG1"
    count   uint32   number of parameters
    then per parameter, in saved order:
      name_len uint16, name utf-8 bytes
      ndim     uint8,  dims uint32 each
      payload  float64 little-endian, row-major

The sidecar ``<snapshot>.meta.json`` records the effective config and the
three vocabularies so a model can be rebuilt for evaluation and inference.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct

import numpy as np

from .config import Config
from .errors import DataError

MAGIC = b"OSG1"


def save_snapshot(model, path):
    with open(path, "wb") as fh:
        named = list(model.named_parameters())
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(named)))
        for name, p in named:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            shape = p.tensor.data.shape
            fh.write(struct.pack("<B", len(shape)))
            for dim in shape:
                fh.write(struct.pack("<I", dim))
            fh.write(p.tensor.data.astype("<f8").tobytes(order="C"))


def load_snapshot(path):
    """Read a snapshot into {name: array}; validates the framing."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read snapshot {path}: {e}") from None
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    offset = 4
    try:
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
            offset += 4 * ndim
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims)
            offset += 8 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as e:
        raise DataError(f"{path}: truncated or corrupt snapshot ({e})") from None
    return out


def apply_snapshot(model, values):
    """Load values into the model; any name/shape drift is an error."""
    named = dict(model.named_parameters())
    for name in named:
        if name not in values:
            raise DataError(f"snapshot is missing parameter {name!r}")
    for name, arr in values.items():
        if name not in named:
            raise DataError(f"snapshot has unknown parameter {name!r}")
        p = named[name]
        if p.tensor.data.shape != arr.shape:
            raise DataError(
                f"parameter {name!r}: snapshot shape {arr.shape} does not match model {p.tensor.data.shape}"
            )
        p.tensor.data = arr.copy()


def meta_path(snapshot_path):
    return str(snapshot_path) + ".meta.json"


def save_meta(snapshot_path, cfg, vocab):
    doc = {
        "config": dataclasses.asdict(cfg),
        "chars": list(vocab.chars),
        "categories": list(vocab.categories),
        "semantics": list(vocab.semantics),
    }
    with open(meta_path(snapshot_path), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_meta(snapshot_path):
    path = meta_path(snapshot_path)
    if not os.path.isfile(path):
        raise DataError(f"missing snapshot metadata {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    raw = dict(doc["config"])
    for key in ("phase_epochs", "phase_lrs"):
        if key in raw and isinstance(raw[key], list):
            raw[key] = tuple(raw[key])
    cfg = Config(**raw).validate()
    from .data import Vocabulary

    vocab = Vocabulary(chars=doc["chars"], categories=doc["categories"], semantics=doc["semantics"])
    return cfg, vocab


def load_model(snapshot_path):
    """Rebuild a model from snapshot + sidecar."""
    from .model import GlyphModel

    cfg, vocab = load_meta(snapshot_path)
    model = GlyphModel(cfg, vocab)
    apply_snapshot(model, load_snapshot(snapshot_path))
    model.eval()
    return model, cfg, vocab
