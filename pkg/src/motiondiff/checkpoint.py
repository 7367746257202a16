"""Checkpoint container.

Byte layout (all integers little-endian)::

    magic      8 bytes   b"MDIFFCK1"
    hlen       uint32    length of the header in bytes
    header     hlen      UTF-8 JSON object, keys sorted, separators "," and ":"
    nrec       uint32    number of tensor records
    nrec times:
      nlen     uint16    length of the record name in bytes
      name     nlen      UTF-8
      ndim     uint8
      dims     ndim x uint32
      data     prod(dims) x float32, C order

Model weights are stored under ``param/<name>``; Adam moments under
``adam.exp_avg/<name>`` and ``adam.exp_avg_sq/<name>``. The header carries the
denoiser config, schedule settings, normalisation statistics, style labels and
step counter. Writing the same checkpoint twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MDIFFCK1"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    header: dict
    tensors: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.header["step"])

    def params(self) -> dict:
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}

    def to_bytes(self) -> bytes:
        head = canonical_json({**self.header, "format_version": FORMAT_VERSION}).encode("utf-8")
        parts = [MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw_name = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw_name)) + raw_name)
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        pos = 8
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {header.get('format_version')}")
        (nrec,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(nrec):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
            tensors[name] = arr
        if pos != len(data):
            raise ValueError(f"{len(data) - pos} trailing bytes after the last record")
        return cls(header, tensors)

    def save(self, path) -> None:
        """Write atomically: temp file in the same directory, then rename."""
        path = os.fspath(path)
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
