"""Binary checkpoint container.

Layout: magic ``SWDCKPT1``, u32 tensor count, then per tensor a u16 name
length, the UTF-8 name, a u8 rank, rank u32 dims and float32 values, all
little-endian.  Non-tensor state (config echo, counters) is stored as
tensors under the ``meta.`` prefix.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SWDCKPT1"


class CheckpointError(Exception):
    pass


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")


def _scalar(t: dict[str, np.ndarray], key: str) -> int:
    return int(np.asarray(t.get(key, 0)).reshape(-1)[0])


@dataclass
class Checkpoint:
    model: dict[str, np.ndarray]
    extractor: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    config: dict[str, str] = field(default_factory=dict)

    def to_tensors(self) -> dict[str, np.ndarray]:
        t = {f"model.{k}": v for k, v in self.model.items()}
        t.update({f"extractor.{k}": v for k, v in self.extractor.items()})
        t.update({f"adam.m.{k}": v for k, v in self.adam_m.items()})
        t.update({f"adam.v.{k}": v for k, v in self.adam_v.items()})
        t["meta.step"] = np.array(self.step, dtype=np.float32)
        t["meta.epoch"] = np.array(self.epoch, dtype=np.float32)
        text = "\n".join(f"{k} = {v}" for k, v in self.config.items())
        t["meta.config"] = encode_text(text)
        return t

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "Checkpoint":
        def group(prefix):
            return {k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)}

        config = {}
        if "meta.config" in t:
            for line in decode_text(t["meta.config"]).splitlines():
                if "=" in line:
                    k, v = line.split("=", 1)
                    config[k.strip()] = v.strip()
        return cls(group("model."), group("extractor."), group("adam.m."), group("adam.v."),
                   _scalar(t, "meta.step"), _scalar(t, "meta.epoch"), config)

    def save(self, path: str | Path) -> Path:
        return write_tensors(path, self.to_tensors())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_tensors(read_tensors(path))
