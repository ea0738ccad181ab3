"""Checkpoint and token-corpus persistence.

Checkpoint layout (little-endian throughout):

    magic  b"LOLC"
    u32    format version
    u64    header length in bytes
    header UTF-8 JSON: model config, hybrid/LoRA metadata, tensor table
           (name, shape, dtype tag, byte offset into the payload)
    payload: raw tensor bytes back to back
    u32    CRC32 over everything above

Round trips are bit-exact. Corpus files are raw little-endian uint32 ids.
"""

from __future__ import annotations

import json
import zlib

import numpy as np

from .errors import CorruptPayload, FormatVersionMismatch, IoFailure
from .model import Model, ModelConfig, HybridSpec, build_model, convert_model, lora_attach

MAGIC = b"LOLC"
FORMAT_VERSION = 1

_DTYPE_TAGS = {"f32": np.float32, "f64": np.float64}


def _dtype_tag(dtype) -> str:
    for tag, dt in _DTYPE_TAGS.items():
        if dtype == dt:
            return tag
    raise IoFailure(f"unsupported tensor dtype {dtype}")


def save_checkpoint(model: Model, path: str) -> None:
    params = model.parameters()
    table = []
    chunks = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data)
        if raw.dtype.byteorder == ">":  # pragma: no cover - big-endian hosts only
            raw = raw.astype(raw.dtype.newbyteorder("<"))
        payload = raw.tobytes()
        table.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": _dtype_tag(t.data.dtype),
                "offset": offset,
                "trainable": bool(t.requires_grad),
            }
        )
        chunks.append(payload)
        offset += len(payload)
    header = {
        "config": model.config.to_dict(),
        "hybrid": model.hybrid_spec.to_dict() if model.hybrid_spec else None,
        "lora": model.lora_meta,
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    blob = bytearray()
    blob += MAGIC
    blob += np.uint32(FORMAT_VERSION).tobytes()
    blob += np.uint64(len(header_bytes)).tobytes()
    blob += header_bytes
    for c in chunks:
        blob += c
    blob += np.uint32(zlib.crc32(bytes(blob)) & 0xFFFFFFFF).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(blob))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str) -> Model:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CorruptPayload(f"{path}: missing LOLC magic")
    stored_crc = int(np.frombuffer(blob[-4:], dtype="<u4")[0])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CorruptPayload(f"{path}: CRC mismatch")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path}: version {version}, expected {FORMAT_VERSION}")
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"{path}: bad header: {exc}") from exc
    payload = blob[16 + header_len : -4]

    model = build_model(ModelConfig(**header["config"]))
    if header["hybrid"] is not None:
        convert_model(model, HybridSpec(**header["hybrid"]))
    if header["lora"] is not None:
        lora = header["lora"]
        lora_attach(model, rank=lora["rank"], alpha=lora["alpha"], targets=tuple(lora["targets"]))
    params = model.parameters()
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in params:
            raise CorruptPayload(f"{path}: unknown tensor {name}")
        dtype = _DTYPE_TAGS[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize if shape else np.dtype(dtype).itemsize
        start = entry["offset"]
        raw = payload[start : start + nbytes]
        if len(raw) != nbytes:
            raise CorruptPayload(f"{path}: truncated payload for {name}")
        t = params[name]
        t.data = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype).reshape(shape).copy()
        t.requires_grad = bool(entry.get("trainable", False))
        t.grad = np.zeros_like(t.data) if t.requires_grad else None
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CorruptPayload(f"{path}: checkpoint missing tensors {sorted(missing)[:4]}...")
    return model


def checkpoint_tensor_names(path: str) -> list[str]:
    """Names/shapes from the header without materializing a model."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if blob[:4] != MAGIC:
        raise CorruptPayload(f"{path}: missing LOLC magic")
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    return [e["name"] for e in header["tensors"]]


# --- token corpus ----------------------------------------------------------


def save_corpus(ids: np.ndarray, path: str) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(np.asarray(ids, dtype="<u4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write corpus {path}: {exc}") from exc


def load_corpus(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read corpus {path}: {exc}") from exc
    if len(raw) % 4:
        raise CorruptPayload(f"{path}: corpus length not a multiple of 4 bytes")
    return np.frombuffer(raw, dtype="<u4").astype(np.uint32)
