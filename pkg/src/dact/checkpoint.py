"""Binary checkpoint serialization for the named parameter registry.

Layout (little-endian): magic "DACT", u32 version, u32 tensor_count, then
per tensor: u16 name_len + UTF-8 name, u8 rank, u32 dims[rank], f32 data
row-major; trailing u64 CRC-64 (ECMA-182) of everything after the
12-byte header.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError
from .network import NetworkConfig, NetworkParams, init_params

MAGIC = b"DACT"
VERSION = 1

_CRC64_POLY = 0x42F0E1EBA9EA3693
_CRC64_TABLE = None


def _crc64_table():
    global _CRC64_TABLE
    if _CRC64_TABLE is None:
        table = []
        for byte in range(256):
            crc = byte << 56
            for _ in range(8):
                if crc & (1 << 63):
                    crc = ((crc << 1) ^ _CRC64_POLY) & 0xFFFFFFFFFFFFFFFF
                else:
                    crc = (crc << 1) & 0xFFFFFFFFFFFFFFFF
            table.append(crc)
        _CRC64_TABLE = table
    return _CRC64_TABLE


def crc64(data: bytes) -> int:
    """CRC-64/WE: ECMA-182 polynomial, init and xorout all-ones (leading
    zero bytes affect the digest)."""
    table = _crc64_table()
    crc = 0xFFFFFFFFFFFFFFFF
    for b in data:
        crc = (table[((crc >> 56) ^ b) & 0xFF] ^ (crc << 8)) & 0xFFFFFFFFFFFFFFFF
    return crc ^ 0xFFFFFFFFFFFFFFFF


def save_checkpoint(params: NetworkParams, path) -> None:
    chunks = []
    for name in sorted(params.tensors):
        tensor = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(tensor.tobytes())
    payload = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params.tensors)))
        f.write(payload)
        f.write(struct.pack("<Q", crc64(payload)))


def load_checkpoint(path, config: NetworkConfig | None = None) -> NetworkParams:
    """Load a registry; with a config, validate tensor names and shapes
    against it (error messages name the offending tensor)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20:
        raise CheckpointError(f"truncated checkpoint {path}")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload = blob[12:-8]
    (stored_crc,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if crc64(payload) != stored_crc:
        raise CheckpointError(f"CRC mismatch in {path}")

    tensors: dict[str, np.ndarray] = {}
    off = 0
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", payload, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", payload, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(payload, dtype="<f4", count=n, offset=off)
            off += 4 * n
            tensors[name] = data.reshape(dims).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint {path}: {exc}") from exc
    if off != len(payload):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")

    if config is not None:
        expected = init_params(config, seed=0, dtype=np.float32).tensors
        for name, ref in expected.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {name!r}")
            if tensors[name].shape != ref.shape:
                raise CheckpointError(
                    f"shape mismatch for tensor {name!r}: checkpoint has "
                    f"{tensors[name].shape}, config expects {ref.shape}")
        for name in tensors:
            if name not in expected:
                raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
    return NetworkParams(tensors=tensors)
