"""Binary checkpoints: magic, JSON header, float32 tensors, sha256 trailer.

Layout::

    b"DGDMB1"
    u32 header length, header JSON (utf-8)
    per tensor: u16 name length, name, u8 ndim, u32 dims..., float32 LE data
    32-byte sha256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .datasets import atomic_write_bytes
from .denoiser import DTYPE, DenoiserModel, param_shapes
from .errors import CheckpointError, ConfigError
from .sampling import SizeDistribution
from .schedule import LimitDistributions, NoiseSchedule
from .training import TrainedModel

MAGIC = b"DGDMB1"
FORMAT_VERSION = 1
_DIGEST = 32


def dumps(tm: TrainedModel) -> bytes:
    m = tm.model
    names = list(m.params)
    header = {
        "format": FORMAT_VERSION,
        "config": tm.config.to_dict(),
        "fingerprint": tm.config.fingerprint(),
        "limits": tm.limits.to_dict(),
        "schedule": {"kind": tm.config.schedule, "alpha": tm.sched.alpha.tolist()},
        "size_dist": tm.size_dist.to_dict(),
        "arch": m.arch(),
        "tensors": names,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(hb)), hb]
    for name in names:
        arr = m.params[name].detach().cpu().numpy().astype("<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def checksum(data: bytes) -> str:
    return data[-_DIGEST:].hex()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes, source: str = "<checkpoint>") -> TrainedModel:
    if len(data) < len(MAGIC) + 4 + _DIGEST or not data.startswith(MAGIC):
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch")
    rd = _Reader(body)
    rd.take(len(MAGIC))
    (hlen,) = rd.unpack("<I")
    try:
        header = json.loads(rd.take(hlen).decode())
        arch = header["arch"]
        names = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{source}: bad header ({exc})") from None
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format {header.get('format')}")
    expected = param_shapes(arch["a"], arch["d"], arch["h_node"], arch["h_edge"],
                            arch["h_global"], arch["n_layers"])
    params = {}
    for want in names:
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode()
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(shape)
        if name != want or tuple(expected.get(name, ())) != tuple(shape):
            raise CheckpointError(f"{source}: unexpected tensor {name} {shape}")
        params[name] = torch.tensor(arr.astype(np.float64), dtype=DTYPE).requires_grad_(True)
    if rd.pos != len(body):
        raise CheckpointError(f"{source}: trailing bytes after tensors")
    if set(params) != set(expected):
        raise CheckpointError(f"{source}: tensor set does not match architecture")
    model = DenoiserModel(arch["a"], arch["d"], arch["h_node"], arch["h_edge"], arch["h_global"],
                          arch["n_layers"], arch["max_n"], params)
    try:
        cfg = ExperimentConfig(**header["config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"{source}: bad config ({exc})") from None
    return TrainedModel(model, NoiseSchedule(np.array(header["schedule"]["alpha"])),
                        LimitDistributions.from_dict(header["limits"]),
                        SizeDistribution.from_dict(header["size_dist"]), cfg)


def save(path: str | Path, tm: TrainedModel) -> str:
    """Atomic write; returns the hex checksum."""
    data = dumps(tm)
    atomic_write_bytes(path, data)
    return checksum(data)


def load(path: str | Path) -> TrainedModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    return loads(data, str(path))


def header_of(path: str | Path) -> dict:
    """Decoded header plus checksum and parameter count, for inspection."""
    tm = load(path)
    data = Path(path).read_bytes()
    (hlen,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    header = json.loads(data[len(MAGIC) + 4:len(MAGIC) + 4 + hlen])
    header["checksum"] = checksum(data)
    header["num_params"] = tm.model.num_params()
    header["T"] = tm.sched.T
    return header
