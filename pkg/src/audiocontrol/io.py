"""File formats: mono WAV, the FGC1 feature/parameter container, CSV features.

FGC1 record layout (little-endian)::

    bytes 0-3   magic b"FGC1"
    byte  4     dtype code (1 float32, 2 int32, 3 float64)
    byte  5     rank (1 or 2)
    bytes 6-7   reserved, zero
    bytes 8-15  dims as two uint32 (rows, cols); rank-1 arrays store cols = 1
    payload     column-major values

A parameter checkpoint is a zip holding ``manifest.json`` (name, shape,
offset per array), ``params.fgc1`` (concatenated FGC1 records, each array
flattened to ``[shape[0], prod(shape[1:])]``), ``config.json`` and
``quantizer_stats.json``.
"""
from __future__ import annotations

import csv
import json
import struct
import zipfile
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import SAMPLE_RATE, AudioClip, resample

MAGIC = b"FGC1"
HEADER = struct.Struct("<4sBBxxII")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i4"), 3: np.dtype("<f8")}
CODES = {np.dtype("float32"): 1, np.dtype("int32"): 2, np.dtype("float64"): 3}


class FormatError(ValueError):
    """Malformed or unsupported file content."""


# -- WAV ------------------------------------------------------------------------

def read_wav(path, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a mono 16-bit PCM or 32-bit float WAV, resampled to ``target_rate``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample type {data.dtype}")
    return AudioClip(resample(samples, rate, target_rate), target_rate)


def write_wav(path, clip: AudioClip, pcm16: bool = False):
    samples = np.clip(clip.samples, -1.0, 1.0)
    if pcm16:
        data = np.round(samples * 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(Path(path), clip.sample_rate, data)


# -- FGC1 -----------------------------------------------------------------------

def _as_2d(array: np.ndarray) -> tuple[np.ndarray, int]:
    if array.ndim == 0:
        return array.reshape(1, 1), 1
    if array.ndim == 1:
        return array.reshape(-1, 1), 1
    if array.ndim == 2:
        return array, 2
    return array.reshape(array.shape[0], -1), 2


def encode_fgc1(array, dtype=np.float32) -> bytes:
    array = np.asarray(array)
    dtype = np.dtype(dtype)
    if dtype not in CODES:
        raise FormatError(f"unsupported FGC1 dtype {dtype}")
    flat, rank = _as_2d(array)
    header = HEADER.pack(MAGIC, CODES[dtype], rank, flat.shape[0], flat.shape[1])
    payload = np.asarray(flat, dtype=DTYPES[CODES[dtype]]).tobytes(order="F")
    return header + payload


def decode_fgc1(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if len(buf) - offset < HEADER.size:
        raise FormatError("truncated FGC1 header")
    magic, code, rank, rows, cols = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if code not in DTYPES or rank not in (1, 2):
        raise FormatError(f"unsupported dtype code {code} or rank {rank}")
    dtype = DTYPES[code]
    start = offset + HEADER.size
    end = start + rows * cols * dtype.itemsize
    if end > len(buf):
        raise FormatError("truncated FGC1 payload")
    array = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=start).reshape((rows, cols), order="F")
    array = array[:, 0].copy() if rank == 1 else array.copy()
    return array, end


def save_fgc1(path, array, dtype=np.float32):
    Path(path).write_bytes(encode_fgc1(array, dtype))


def load_fgc1(path) -> np.ndarray:
    array, _ = decode_fgc1(Path(path).read_bytes())
    return array


def save_csv(path, values, frame_rate: float):
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[:, None]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "time"] + [f"v{i}" for i in range(values.shape[1])])
        for t, row in enumerate(values):
            writer.writerow([t, f"{t / frame_rate:.6f}"] + [repr(v.item()) for v in row])


def load_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["frame", "time"] or len(rows[0]) < 3:
        raise FormatError(f"{path}: expected a 'frame,time,v0,...' header")
    return np.array([[float(v) for v in row[2:]] for row in rows[1:]])


# -- parameter checkpoints ------------------------------------------------------

def save_arrays(path, arrays: dict, config: dict, quantizer_stats: dict | None = None):
    """Write named float64 arrays plus JSON metadata as a checkpoint zip."""
    blob = bytearray()
    manifest = []
    for name in sorted(arrays):
        array = np.asarray(arrays[name], dtype=np.float64)
        manifest.append({"name": name, "shape": list(array.shape), "offset": len(blob)})
        blob += encode_fgc1(array, np.float64)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        zf.writestr("params.fgc1", bytes(blob))
        zf.writestr("config.json", json.dumps(config, indent=1, sort_keys=True))
        zf.writestr("quantizer_stats.json", json.dumps(quantizer_stats or {}, indent=1))


def load_arrays(path) -> tuple[dict, dict, dict]:
    """Inverse of :func:`save_arrays`: (arrays, config, quantizer_stats)."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("params.fgc1")
            config = json.loads(zf.read("config.json"))
            stats = json.loads(zf.read("quantizer_stats.json"))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise FormatError(f"{path}: not a checkpoint ({exc})") from exc
    arrays = {}
    for entry in manifest:
        array, _ = decode_fgc1(blob, entry["offset"])
        arrays[entry["name"]] = array.reshape(entry["shape"])
    return arrays, config, stats
