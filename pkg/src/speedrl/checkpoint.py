"""Binary checkpoint format.

Layout::

    b"SRL1" | u32 format version | u32 header length | header (UTF-8)
    | float64 little-endian payloads in header order
    | u32 config length | NetConfig as ``key = value`` lines (UTF-8)

Header lines are ``name<TAB>d1,d2,...``. All integers are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ReadError
from .net import NetConfig, PolicyParams, param_shapes

MAGIC = b"SRL1"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def _config_block(params: PolicyParams) -> bytes:
    items = dict(params.cfg.to_dict(), params_version=params.version)
    return "".join(f"{k} = {v}\n" for k, v in items.items()).encode()


def to_bytes(params: PolicyParams) -> bytes:
    header = "".join(f"{name}\t{','.join(map(str, arr.shape))}\n" for name, arr in params.tensors.items()).encode()
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in params.tensors.values())
    cfg = _config_block(params)
    return MAGIC + _U32.pack(FORMAT_VERSION) + _U32.pack(len(header)) + header + payload + _U32.pack(len(cfg)) + cfg


def save_checkpoint(params: PolicyParams, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(params))
    tmp.replace(path)
    return path


def _parse_config(text: str) -> tuple[NetConfig, int]:
    kv = {}
    for line in text.splitlines():
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"bad config line {line!r}")
        kv[key.strip()] = val.strip()
    try:
        version = int(kv.pop("params_version"))
        cfg = NetConfig(
            grid_h=int(kv["grid_h"]), grid_w=int(kv["grid_w"]), vocab=int(kv["vocab"]),
            embed_dim=int(kv["embed_dim"]), num_layers=int(kv["num_layers"]),
            num_conditions=int(kv["num_conditions"]), cond_dropout_prob=float(kv["cond_dropout_prob"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad config block: {exc}") from None
    return cfg, version


def from_bytes(data: bytes) -> PolicyParams:
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = _U32.unpack_from(data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (hlen,) = _U32.unpack_from(data, 8)
    off = 12
    if off + hlen > len(data):
        raise FormatError("truncated checkpoint header")
    try:
        header = data[off:off + hlen].decode()
    except UnicodeDecodeError:
        raise FormatError("corrupt checkpoint header") from None
    off += hlen
    entries = []
    for line in header.splitlines():
        name, _, dims = line.partition("\t")
        try:
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        except ValueError:
            raise FormatError(f"bad header entry {line!r}") from None
        entries.append((name, shape))
    tensors = {}
    for name, shape in entries:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(data):
            raise FormatError(f"truncated payload for tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=off).astype(np.float64).reshape(shape)
        off += nbytes
    if off + 4 > len(data):
        raise FormatError("truncated checkpoint: missing config block")
    (clen,) = _U32.unpack_from(data, off)
    off += 4
    if off + clen != len(data):
        raise FormatError("truncated or oversized config block")
    try:
        cfg, pversion = _parse_config(data[off:].decode())
    except UnicodeDecodeError:
        raise FormatError("corrupt config block") from None
    expected = param_shapes(cfg)
    if list(expected.items()) != [(n, s) for n, s in entries]:
        raise FormatError("tensor layout does not match the stored NetConfig")
    return PolicyParams(cfg, tensors, pversion)


def load_checkpoint(path: str | Path) -> PolicyParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ReadError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return from_bytes(data)
