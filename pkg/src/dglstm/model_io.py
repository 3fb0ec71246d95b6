"""Model file format: bit-exact round trips for reproducibility.

Layout (all integers little-endian):

    bytes 0..6   magic "DGLSTM1" (ASCII)
    byte  7      format version (uint8, currently 1)
    uint32       header length in bytes
    header       UTF-8 JSON: variant, r, k1, k2, t, dropout,
                 nonneg (list of names), n_arrays
    n_arrays records, each:
        uint16   name length, then name (UTF-8)
        uint8    ndim
        uint32 x ndim   dimensions
        float64 x prod(dims)   raw array data

Arrays are always written as float64. Trailing bytes after the last
array are rejected.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError
from .model import ModelParams
from .numeric import ParamSet

MAGIC = b"DGLSTM1"
VERSION = 1


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated model file while reading {what}")
    return buf


def save_model(model: ModelParams, path) -> None:
    header = {
        "variant": model.variant,
        "r": model.r,
        "k1": model.k1,
        "k2": model.k2,
        "t": model.t,
        "dropout": model.dropout,
        "nonneg": sorted(model.params.nonneg),
        "n_arrays": len(model.params),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for name, value in model.params.items():
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            arr = np.ascontiguousarray(value, dtype="<f8")
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())


def load_model(path) -> ModelParams:
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise FormatError(f"'{path}' is not a model file (bad magic)")
        version = struct.unpack("<B", _read_exact(f, 1, "version"))[0]
        if version != VERSION:
            raise FormatError(f"unsupported model format version {version}")
        header_len = struct.unpack("<I", _read_exact(f, 4, "header length"))[0]
        try:
            header = json.loads(_read_exact(f, header_len, "header"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt model header: {exc}") from exc
        for key in ("variant", "r", "k1", "k2", "t", "dropout", "nonneg", "n_arrays"):
            if key not in header:
                raise FormatError(f"model header missing '{key}'")

        nonneg = set(header["nonneg"])
        ps = ParamSet()
        for _ in range(header["n_arrays"]):
            name_len = struct.unpack("<H", _read_exact(f, 2, "array name length"))[0]
            name = _read_exact(f, name_len, "array name").decode("utf-8")
            ndim = struct.unpack("<B", _read_exact(f, 1, "array rank"))[0]
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, f"shape of '{name}'"))[0]
                for _ in range(ndim))
            n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(f, n_items * 8, f"data of '{name}'")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            ps.add(name, arr, nonneg=name in nonneg)
        if f.read(1):
            raise FormatError(f"'{path}' has trailing bytes after the last array")

    return ModelParams(variant=header["variant"], r=header["r"], k1=header["k1"],
                       k2=header["k2"], t=header["t"], dropout=header["dropout"],
                       params=ps)
