"""Versioned binary checkpoints with an explicit field table and checksum.

Layout: magic 'CSMB', uint32 version, uint64 header length, UTF-8 JSON
header, raw little-endian float64 blobs in header order, sha256 digest of
everything preceding it. The header is self-describing: architecture tag,
hyperparameters, parameter field table, prior payload, training-dataset
fingerprint and history summary, so a checkpoint loads without the
original configuration file.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .autodiff import Tensor
from .distributions import SidechannelPrior
from .rng import RngStream
from .zoo import build_model

MAGIC = b"CSMB"
VERSION = 1
PRIOR_FIELD = "__prior_payload__"


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def save_checkpoint(model, path, dataset_fingerprint=None, history_summary=None):
    fields = []
    blobs = []
    for name in sorted(model.params):
        data = model.params[name].data
        fields.append({"name": name, "shape": list(data.shape)})
        blobs.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    prior_meta = None
    if model.prior is not None:
        prior_meta = {"mode": model.prior.mode, "kind": model.prior.kind,
                      "has_payload": model.prior.payload is not None}
        if model.prior.payload is not None and "gamma.payload" not in model.params:
            data = model.prior.payload.data
            fields.append({"name": PRIOR_FIELD, "shape": list(data.shape)})
            blobs.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    header = {
        "hyperparameters": model.hyperparameters(),
        "exclusive_groups": [list(g) for g in model.exclusive_groups] if model.exclusive_groups else None,
        "concept_names": model.concept_names,
        "task_names": model.task_names,
        "prior": prior_meta,
        "dataset_fingerprint": dataset_fingerprint,
        "history_summary": history_summary,
        "fields": fields,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(header_bytes)) + header_bytes
    body += b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)
    return path


def load_checkpoint(path):
    """Rebuild the model; returns (model, header metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 48 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError(f"{path}: checksum mismatch, file is corrupt")
    version = struct.unpack("<I", body[4:8])[0]
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version} unsupported (expected {VERSION})"
        )
    header_len = struct.unpack("<Q", body[8:16])[0]
    header = json.loads(body[16 : 16 + header_len].decode())
    hyper = header["hyperparameters"]
    model = build_model(
        hyper["arch"],
        input_dim=hyper["input_dim"],
        n_concepts=hyper["n_concepts"],
        n_tasks=hyper["n_tasks"],
        rng=RngStream(0).substream("checkpoint-load"),
        variant=hyper.get("variant", "standard"),
        emb_size=hyper.get("emb_size", 32),
        c_emb=hyper.get("c_emb", 8),
        n_rules=hyper.get("n_rules", 4),
        rule_emb=hyper.get("rule_emb", 16),
        exclusive_groups=header.get("exclusive_groups"),
        concept_names=header.get("concept_names"),
        task_names=header.get("task_names"),
    )
    prior_meta = header.get("prior")
    if prior_meta and prior_meta["mode"] == "learnable":
        model.attach_learnable_prior(RngStream(0).substream("checkpoint-prior"))

    offset = 16 + header_len
    prior_payload = None
    for field in header["fields"]:
        shape = tuple(field["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(body):
            raise CheckpointError(f"{path}: truncated parameter blob at {field['name']}")
        values = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
        if field["name"] == PRIOR_FIELD:
            prior_payload = values
        elif field["name"] not in model.params:
            raise CheckpointError(f"{path}: unexpected parameter {field['name']!r}")
        else:
            model.params[field["name"]].data = values
    if prior_meta:
        if prior_payload is not None:
            model.prior = SidechannelPrior(
                prior_meta["mode"], prior_meta["kind"], Tensor(prior_payload), model.payload_blocks()
            )
        elif prior_meta["mode"] == "learnable" and not prior_meta["has_payload"]:
            model.prior = SidechannelPrior(
                prior_meta["mode"], prior_meta["kind"], None, model.payload_blocks()
            )
    meta = {
        "dataset_fingerprint": header.get("dataset_fingerprint"),
        "history_summary": header.get("history_summary"),
        "hyperparameters": hyper,
    }
    return model, meta


def dump_parameters(model, path):
    """Plain-text parameter dump for manual inspection."""
    with open(path, "w") as fh:
        fh.write(f"arch={model.arch} variant={model.variant}\n")
        for name in sorted(model.params):
            data = model.params[name].data
            fh.write(f"\n[{name}] shape={tuple(data.shape)}\n")
            fh.write(np.array2string(data, precision=8, threshold=1_000_000, max_line_width=120))
            fh.write("\n")
        if model.prior is not None and model.prior.payload is not None:
            fh.write(f"\n[prior:{model.prior.mode}] shape={tuple(model.prior.payload.shape)}\n")
            fh.write(np.array2string(model.prior.payload.data, precision=8, max_line_width=120))
            fh.write("\n")
    return path
