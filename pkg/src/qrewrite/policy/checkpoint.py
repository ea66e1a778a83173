"""Checkpoint file format.

Layout (all UTF-8 except the payload)::

    QRWCKPT <version>\\n
    <one-line JSON header>\\n
    <payload>

The header carries ``vocab`` (token list, id order), ``hidden``, ``tagged``,
``shapes`` (name -> shape, in ``PARAM_NAMES`` order), ``dtype`` (always
``"<f8"``), ``meta`` (free-form, JSON-serialisable) and ``sha256`` of the
payload. The payload is every parameter array dumped row-major as
little-endian float64, concatenated in ``PARAM_NAMES`` order, so
``load(save(p))`` is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .model import RewritePolicy
from .network import PARAM_NAMES, RNNParams
from .vocab import Vocab

MAGIC = b"QRWCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(policy: RewritePolicy, meta: dict | None = None) -> bytes:
    arrays = [np.ascontiguousarray(a, dtype="<f8") for a in policy.params.arrays()]
    payload = b"".join(a.tobytes(order="C") for a in arrays)
    header = {
        "vocab": list(policy.vocab.tokens),
        "hidden": policy.params.hidden,
        "tagged": policy.tagged,
        "shapes": {n: list(a.shape) for n, a in zip(PARAM_NAMES, arrays)},
        "dtype": "<f8",
        "meta": meta or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + b" " + str(VERSION).encode() + b"\n" + head + b"\n" + payload


def from_bytes(blob: bytes) -> tuple[RewritePolicy, dict]:
    try:
        first, rest = blob.split(b"\n", 1)
        head, payload = rest.split(b"\n", 1)
        magic, version = first.split(b" ")
        header = json.loads(head.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    if magic != MAGIC or int(version) != VERSION:
        raise CheckpointError("not a checkpoint of a supported version")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError("checkpoint payload hash mismatch")
    arrays, pos = [], 0
    for name in PARAM_NAMES:
        shape = tuple(header["shapes"][name])
        size = int(np.prod(shape)) * 8
        chunk = payload[pos : pos + size]
        if len(chunk) != size:
            raise CheckpointError("truncated checkpoint payload")
        arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64))
        pos += size
    if pos != len(payload):
        raise CheckpointError("trailing bytes after checkpoint payload")
    policy = RewritePolicy(Vocab(tuple(header["vocab"])), RNNParams(*arrays), bool(header["tagged"]))
    return policy, header.get("meta", {})


def save(policy: RewritePolicy, path: str | Path, meta: dict | None = None) -> str:
    blob = to_bytes(policy, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> tuple[RewritePolicy, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(blob)


def fingerprint(policy: RewritePolicy) -> str:
    return hashlib.sha256(to_bytes(policy)).hexdigest()
