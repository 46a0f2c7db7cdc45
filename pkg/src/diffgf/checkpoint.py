"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"DIFFGF\\x00\\x01"
    version    u32
    n_sections u32
    repeated n_sections times:
        name_len u16, name (utf-8)
        body_len u64, crc32 u32, body

Sections: ``schedule`` and ``config`` hold JSON; ``codec``, ``denoiser`` and
``refiner`` hold packed tensors. A tensor section is a u32-length JSON header
(module config, variant tag, tensor names, dtypes, shapes) followed by the raw
tensor bytes in header order. Files are written to a temporary name and
renamed into place.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DIFFGF\x00\x01"
FORMAT_VERSION = 1
SECTION_ORDER = ("schedule", "config", "codec", "denoiser", "refiner")
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64, "bool": torch.bool}


class CheckpointError(ValueError):
    pass


def pack_state(state: dict, meta: dict) -> bytes:
    names, blobs, entries = sorted(state), [], []
    for name in names:
        t = state[name].detach().cpu().contiguous()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name}")
        arr = t.numpy()
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(t.shape), "nbytes": len(blob)})
        blobs.append(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    return struct.pack("<I", len(header)) + header + b"".join(blobs)


def unpack_state(body: bytes) -> tuple[dict, dict]:
    try:
        (hlen,) = struct.unpack_from("<I", body, 0)
        header = json.loads(body[4 : 4 + hlen])
        pos = 4 + hlen
        state = {}
        for e in header["tensors"]:
            np_dtype = np.dtype(e["dtype"] if e["dtype"] != "bool" else "?").newbyteorder("<")
            chunk = body[pos : pos + e["nbytes"]]
            if len(chunk) != e["nbytes"]:
                raise CheckpointError(f"tensor {e['name']} is truncated")
            arr = np.frombuffer(chunk, dtype=np_dtype).reshape(e["shape"]).astype(np_dtype.newbyteorder("="))
            state[e["name"]] = torch.from_numpy(arr.copy())
            pos += e["nbytes"]
    except (struct.error, KeyError, json.JSONDecodeError, ValueError) as err:
        raise CheckpointError(f"malformed tensor section: {err}") from err
    if pos != len(body):
        raise CheckpointError("trailing bytes in tensor section")
    return state, header["meta"]


@dataclass
class ModelBlob:
    state: dict
    config: dict
    extra: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    schedule: dict | None = None
    config: dict | None = None  # flat run config, with its digest under "digest"
    codec: ModelBlob | None = None
    denoiser: ModelBlob | None = None
    refiner: ModelBlob | None = None
    version: int = FORMAT_VERSION

    @property
    def refiner_variant(self) -> str | None:
        return None if self.refiner is None else self.refiner.extra.get("variant")

    @property
    def config_digest(self) -> str | None:
        return None if self.config is None else self.config.get("digest")

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise CheckpointError(f"checkpoint lacks section(s): {', '.join(missing)}")


def _json_section(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode()


def encode_checkpoint(ck: Checkpoint) -> bytes:
    sections = []
    for name in SECTION_ORDER:
        value = getattr(ck, name)
        if value is None:
            continue
        if isinstance(value, ModelBlob):
            body = pack_state(value.state, {"config": value.config, **value.extra})
        else:
            body = _json_section(value)
        sections.append((name, body))
    out = [MAGIC, struct.pack("<II", ck.version, len(sections))]
    for name, body in sections:
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<QI", len(body), zlib.crc32(body)) + body)
    return b"".join(out)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, n = struct.unpack_from("<II", data, len(MAGIC))
    except struct.error as err:
        raise CheckpointError("truncated header") from err
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {version} is not supported (expected {FORMAT_VERSION})")
    pos = len(MAGIC) + 8
    ck = Checkpoint(version=version)
    for _ in range(n):
        try:
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + nlen].decode()
            blen, crc = struct.unpack_from("<QI", data, pos + 2 + nlen)
        except (struct.error, UnicodeDecodeError) as err:
            raise CheckpointError("truncated section header") from err
        start = pos + 2 + nlen + 12
        body = data[start : start + blen]
        if len(body) != blen:
            raise CheckpointError(f"section {name!r} is truncated")
        if zlib.crc32(body) != crc:
            raise CheckpointError(f"section {name!r} failed its checksum")
        if name not in SECTION_ORDER:
            raise CheckpointError(f"unknown section {name!r}")
        if name in ("schedule", "config"):
            setattr(ck, name, json.loads(body))
        else:
            state, meta = unpack_state(body)
            cfg = meta.pop("config")
            setattr(ck, name, ModelBlob(state, cfg, meta))
        pos = start + blen
    if pos != len(data):
        raise CheckpointError("trailing bytes after the last section")
    return ck


def atomic_write(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        # mkstemp creates owner-only files; give the result the usual umask-derived mode
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save_checkpoint(path, ck: Checkpoint) -> Path:
    return atomic_write(path, encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return decode_checkpoint(path.read_bytes())


def config_to_dict(cfg) -> dict:
    """Dataclass config to JSON-ready dict (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def dict_to_config(cls, d: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)
