"""On-disk sample container: ``manifest.txt`` plus one ``.swdt`` file per array.

Array file layout: 8-byte magic ``SWDTENS1``, little-endian u32 (channels,
height, width), then float32 little-endian values in C order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SWDTENS1"
FORMAT_VERSION = 1
SUFFIX = ".swdt"
_HEADER = struct.Struct("<III")


class SampleFormatError(Exception):
    """Base class for container problems."""


class MagicError(SampleFormatError):
    pass


class TruncatedError(SampleFormatError):
    pass


class ConsistencyError(SampleFormatError):
    pass


def write_array(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"arrays must be (C, H, W), got shape {arr.shape}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(*data.shape))
        fh.write(data.tobytes(order="C"))


def read_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise SampleFormatError(f"{path}: array file missing") from None
    if raw[:len(MAGIC)] != MAGIC:
        raise MagicError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    head_end = len(MAGIC) + _HEADER.size
    if len(raw) < head_end:
        raise TruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    c, h, w = _HEADER.unpack(raw[len(MAGIC):head_end])
    need = c * h * w * 4
    payload = raw[head_end:]
    if len(payload) != need:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, header ({c}, {h}, {w}) needs {need}")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)


def write_manifest(path: str | Path, meta: dict) -> None:
    lines = [f"{k} = {v}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    meta = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SampleFormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def write_arrays(directory: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = np.asarray(next(iter(arrays.values())))
    h, w = first.shape[-2:]
    manifest = {"format_version": FORMAT_VERSION, "width": w, "height": h}
    manifest.update({k: v for k, v in meta.items() if k not in manifest})
    manifest["arrays"] = ",".join(arrays)
    write_manifest(directory / "manifest.txt", manifest)
    for name, arr in arrays.items():
        write_array(directory / f"{name}{SUFFIX}", arr)
    return directory


def read_arrays(directory: str | Path, names: list[str] | None = None) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise SampleFormatError(f"{directory}: missing manifest.txt")
    meta = read_manifest(manifest_path)
    if meta.get("format_version") != str(FORMAT_VERSION):
        raise MagicError(f"{manifest_path}: unsupported format_version {meta.get('format_version')!r}")
    try:
        width, height = int(meta["width"]), int(meta["height"])
        listed = [n for n in meta["arrays"].split(",") if n]
    except (KeyError, ValueError) as exc:
        raise SampleFormatError(f"{manifest_path}: malformed manifest ({exc})") from None
    wanted = listed if names is None else names
    missing = [n for n in wanted if n not in listed]
    if missing:
        raise ConsistencyError(f"{manifest_path}: arrays {missing} not listed in manifest")
    arrays = {}
    for name in wanted:
        arr = read_array(directory / f"{name}{SUFFIX}")
        if arr.shape[1:] != (height, width):
            raise ConsistencyError(
                f"{directory / (name + SUFFIX)}: dims {arr.shape[1]}x{arr.shape[2]} disagree with "
                f"manifest {height}x{width}")
        arrays[name] = arr
    return meta, arrays


def list_sample_dirs(root: str | Path) -> list[Path]:
    root = Path(root)
    if (root / "manifest.txt").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "manifest.txt").exists())
