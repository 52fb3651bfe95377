"""Binary checkpoint files.

Layout, all integers little-endian::

    magic        8 bytes   b"BAGNETCK"
    version      u32       FORMAT_VERSION
    config_len   u32
    config       config_len bytes of UTF-8 JSON (sorted keys):
                 {"dtype": "float32"|"float64", "model": <BagnetConfig fields>}
    n_arrays     u32
    arrays       n_arrays records: learnable tensors in declaration order,
                 then batch-norm running mean/var in declaration order
    has_opt      u8        0 or 1
    [step        u64       Adam step counter
     n_moments   u32       number of first-moment arrays (= second-moment arrays)
     arrays      first moments, then second moments, same order as the tensors]
    digest       32 bytes  SHA-256 of every preceding byte

    array record: name_len u16, name (UTF-8), dtype u8 (0 = f32, 1 = f64),
                  ndim u8, ndim x u32 dims, raw little-endian data
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    CheckpointIntegrityError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import BagnetConfig, ModelParams, init_params

MAGIC = b"BAGNETCK"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _encode_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _DTYPE_CODES[arr.dtype]
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self):
        (name_len,) = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        code, ndim = self.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointIntegrityError(f"unknown dtype code {code} for array {name!r}")
        shape = self.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, data.astype(dt.newbyteorder("="))


def _named_arrays(params: ModelParams) -> list:
    return [(n, t.data) for n, t in params.named_tensors()] + params.named_buffers()


def save_checkpoint(params: ModelParams, optimizer_state, path) -> None:
    """Write ``params`` (and ``optimizer_state`` unless None) to ``path``."""
    cfg = {"dtype": str(params.dtype), "model": params.config.to_dict()}
    cfg_bytes = json.dumps(cfg, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg_bytes)), cfg_bytes]
    arrays = _named_arrays(params)
    parts.append(struct.pack("<I", len(arrays)))
    parts += [_encode_array(n, a) for n, a in arrays]
    if optimizer_state is None:
        parts.append(struct.pack("<B", 0))
    else:
        names = [n for n, _ in params.named_tensors()]
        if len(optimizer_state.m) != len(names) or len(optimizer_state.v) != len(names):
            raise CheckpointShapeError("optimizer state does not match the parameter list")
        parts.append(struct.pack("<BQI", 1, optimizer_state.t, len(names)))
        parts += [_encode_array(f"m.{n}", a) for n, a in zip(names, optimizer_state.m)]
        parts += [_encode_array(f"v.{n}", a) for n, a in zip(names, optimizer_state.v)]
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def _check_against(params: ModelParams, arrays: dict):
    expected = _named_arrays(params)
    if len(expected) != len(arrays):
        raise CheckpointShapeError(f"checkpoint holds {len(arrays)} arrays, model expects {len(expected)}")
    for name, ref in expected:
        if name not in arrays:
            raise CheckpointShapeError(f"checkpoint lacks array {name!r}")
        if arrays[name].shape != ref.shape:
            raise CheckpointShapeError(
                f"array {name!r}: checkpoint shape {arrays[name].shape} != model shape {ref.shape}"
            )


def load_checkpoint(path, expected_config: Optional[BagnetConfig] = None):
    """Read a checkpoint; returns ``(params, adam_state_or_None)``.

    Raises distinct errors for a wrong format version, a truncated file,
    corrupted bytes, and a config or array shape that disagrees with
    ``expected_config``.
    """
    from .train import AdamState

    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    (cfg_len,) = r.unpack("<I")
    try:
        cfg = json.loads(r.take(cfg_len).decode("utf-8"))
        config = BagnetConfig.from_dict(cfg["model"])
        dtype = np.dtype(cfg["dtype"])
    except CheckpointTruncatedError:
        raise
    except Exception as e:
        raise CheckpointIntegrityError(f"{path}: unreadable config block: {e}") from e

    (n_arrays,) = r.unpack("<I")
    arrays = dict(r.array() for _ in range(n_arrays))
    (has_opt,) = r.unpack("<B")
    if has_opt not in (0, 1):
        raise CheckpointIntegrityError(f"{path}: bad optimizer flag {has_opt}")
    opt = None
    if has_opt:
        step, n_mom = r.unpack("<QI")
        m = [r.array()[1] for _ in range(n_mom)]
        v = [r.array()[1] for _ in range(n_mom)]
        opt = AdamState(m=m, v=v, t=int(step))

    rest = len(buf) - r.pos
    if rest < 32:
        raise CheckpointTruncatedError(f"{path}: digest truncated ({rest} of 32 bytes present)")
    if rest > 32:
        raise CheckpointIntegrityError(f"{path}: {rest - 32} unexpected trailing bytes")
    if hashlib.sha256(buf[:r.pos]).digest() != buf[r.pos:]:
        raise CheckpointIntegrityError(f"{path}: SHA-256 digest mismatch, file is corrupt")

    if expected_config is not None and expected_config != config:
        raise CheckpointShapeError(f"{path}: checkpoint config {config} does not match expected {expected_config}")

    params = init_params(config, 0, dtype=dtype)
    _check_against(params, arrays)
    for name, t in params.named_tensors():
        t.data = arrays[name].astype(dtype)
    for lname, p in params.layers():
        if p.has_bn:
            p.bn_running_mean = arrays[f"{lname}.bn_running_mean"].astype(dtype)
            p.bn_running_var = arrays[f"{lname}.bn_running_var"].astype(dtype)
    if opt is not None:
        for (name, t), m_arr, v_arr in zip(params.named_tensors(), opt.m, opt.v):
            if m_arr.shape != t.shape or v_arr.shape != t.shape:
                raise CheckpointShapeError(f"optimizer moments for {name!r} have the wrong shape")
        if len(opt.m) != len(params.named_tensors()):
            raise CheckpointShapeError("optimizer state does not cover every parameter")
    return params, opt


def restore_into(params: ModelParams, path):
    """Overwrite ``params`` in place from ``path``; nothing is touched unless every check passes."""
    loaded, opt = load_checkpoint(path, expected_config=params.config)
    for (_, dst), (_, src) in zip(params.named_tensors(), loaded.named_tensors()):
        dst.data = src.data.astype(params.dtype)
    for (_, dst), (_, src) in zip(params.layers(), loaded.layers()):
        if dst.has_bn:
            dst.bn_running_mean = src.bn_running_mean.astype(params.dtype)
            dst.bn_running_var = src.bn_running_var.astype(params.dtype)
    return opt
