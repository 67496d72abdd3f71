"""Elastic checkpoint on disk: ``manifest.json`` plus a raw ``weights.bin``.

The blob is little-endian float32.  Every tensor (backbone and adapter) is an
entry ``{name, offset, shape}`` in the manifest; entries are packed back to
back in manifest order.  The manifest carries a SHA-256 of the blob and a
digest of its own canonical JSON, so truncation or a flipped byte anywhere is
caught on load.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .elastifier import AnchorSet, ElasticCheckpoint, ImportanceTable, LevelTable
from .model import ModelConfig, Params

FORMAT_NAME = "elastiserve-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"
_LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


class UnsupportedVersionError(FormatError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def manifest_digest(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "digest"}
    return hashlib.sha256(_canonical(body)).hexdigest()


def _tensor_entries(ckpt: ElasticCheckpoint):
    for name, arr in ckpt.params.named():
        yield name, arr
    for key in sorted(ckpt.adapters):
        for i, layer in enumerate(ckpt.adapters[key]):
            for mat in sorted(layer):
                a, b = layer[mat]
                yield f"adapters.{key}.layers.{i}.{mat}.A", a
                yield f"adapters.{key}.layers.{i}.{mat}.B", b


def save_checkpoint(ckpt: ElasticCheckpoint, path) -> Path:
    if ckpt.config.dtype != "float32":
        raise FormatError("checkpoints store float32 weights; cast the model first")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in _tensor_entries(ckpt):
        buf = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        entries.append({"name": name, "offset": offset, "shape": list(np.shape(arr))})
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "layout": "unit-major rows for wq/wk/wv/wo/w_up/w_gate/w_down",
        "unit_order": {
            "heads": ckpt.head_order.tolist(),
            "neurons": ckpt.neuron_order.tolist(),
        },
        "importance": {
            "heads": ckpt.importance.heads.tolist(),
            "neurons": ckpt.importance.neurons.tolist(),
        },
        "anchors": sorted(ckpt.anchors.layers),
        "layer_importance": list(ckpt.anchors.layer_importance),
        "level_table": ckpt.levels.to_dict(),
        "adapter_rank": ckpt.adapter_rank,
        "adapter_levels": sorted(ckpt.adapters),
        "tensors": entries,
        "blob_size": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "meta": ckpt.meta,
    }
    manifest["digest"] = manifest_digest(manifest)
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _check_entries(entries, blob_size: int):
    expected = 0
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 4
        if e["offset"] != expected:
            raise FormatError(f"tensor {e['name']} offset {e['offset']} inconsistent (expected {expected})")
        expected += n
    if expected != blob_size:
        raise FormatError(f"manifest covers {expected} bytes but blob_size is {blob_size}")


def load_checkpoint(path) -> ElasticCheckpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise FormatError("not an elastic checkpoint manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint format version {manifest.get('format_version')!r}")
    if manifest.get("digest") != manifest_digest(manifest):
        raise FormatError("manifest digest mismatch")
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["blob_size"]:
        raise FormatError(f"blob truncated or padded: {len(blob)} bytes, manifest says {manifest['blob_size']}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise FormatError("blob checksum mismatch")
    _check_entries(manifest["tensors"], len(blob))

    cfg = ModelConfig.from_dict(manifest["config"])
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=_LE_F32, count=n, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
    backbone = {k: v for k, v in tensors.items() if not k.startswith("adapters.")}
    params = Params.from_named(backbone)
    adapters = {}
    for key in manifest["adapter_levels"]:
        layers = [dict() for _ in range(cfg.n_layers)]
        prefix = f"adapters.{key}.layers."
        for name, arr in tensors.items():
            if name.startswith(prefix) and name.endswith(".A"):
                i, mat = name[len(prefix):-2].split(".", 1)
                layers[int(i)][mat] = (arr, tensors[name[:-2] + ".B"])
        adapters[key] = layers
    return ElasticCheckpoint(
        config=cfg,
        params=params,
        head_order=np.array(manifest["unit_order"]["heads"], dtype=np.int64),
        neuron_order=np.array(manifest["unit_order"]["neurons"], dtype=np.int64),
        importance=ImportanceTable(
            np.array(manifest["importance"]["heads"], dtype=np.float64),
            np.array(manifest["importance"]["neurons"], dtype=np.float64),
        ),
        anchors=AnchorSet(frozenset(manifest["anchors"]), tuple(manifest["layer_importance"])),
        levels=LevelTable.from_dict(manifest["level_table"]),
        adapters=adapters,
        adapter_rank=manifest["adapter_rank"],
        meta=manifest.get("meta", {}),
    )
