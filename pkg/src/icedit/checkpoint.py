"""ICCM checkpoint format.

Layout (all integers little-endian):

    b"ICCM"  u32 version
    u16 len + utf-8 role
    u32 len + utf-8 JSON architecture descriptor
    u32 tensor count
    per tensor: u16 len + utf-8 name, u8 dtype tag, u8 rank, u32 dims[rank], raw values
    u16 len + ascii config fingerprint
    u64 seed

Dtype tags: 0 = float32, 1 = int64 (float tensors are always written as float32).
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .denoiser import Arch, Denoiser

MAGIC = b"ICCM"
VERSION = 1
_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.int64, "<i8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    role: str
    descriptor: dict
    tensors: dict[str, torch.Tensor]
    fingerprint: str
    seed: int


def _pack_str(s: str, fmt: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack(fmt, len(b)) + b


def encode(ck: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    out.write(_pack_str(ck.role, "<H"))
    out.write(_pack_str(json.dumps(ck.descriptor, sort_keys=True), "<I"))
    out.write(struct.pack("<I", len(ck.tensors)))
    for name, t in ck.tensors.items():
        t = t.detach().cpu()
        tag = 1 if t.dtype == torch.int64 else 0
        arr = t.numpy().astype(_DTYPES[tag][1], copy=False)
        out.write(_pack_str(name, "<H"))
        out.write(struct.pack("<BB", tag, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr).tobytes())
    out.write(_pack_str(ck.fingerprint, "<H"))
    out.write(struct.pack("<Q", ck.seed))
    return out.getvalue()


def decode(blob: bytes) -> Checkpoint:
    buf = memoryview(blob)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = bytes(buf[pos:pos + n])
        pos += n
        return chunk

    def unpack(fmt: str):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    def string(fmt: str) -> str:
        (n,) = unpack(fmt)
        return take(n).decode("utf-8")

    if take(4) != MAGIC:
        raise CheckpointError("not an ICCM checkpoint")
    (version,) = unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    role = string("<H")
    descriptor = json.loads(string("<I"))
    (count,) = unpack("<I")
    tensors = {}
    for _ in range(count):
        name = string("<H")
        tag, rank = unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag}")
        dims = unpack(f"<{rank}I") if rank else ()
        dtype, np_dtype = _DTYPES[tag]
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(n * np.dtype(np_dtype).itemsize), dtype=np_dtype).reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
    fingerprint = string("<H")
    (seed,) = unpack("<Q")
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(role, descriptor, tensors, fingerprint, seed)


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_module(module: nn.Module, path: str | Path, role: str, descriptor: dict, fingerprint: str,
                seed: int) -> None:
    tensors = {k: v for k, v in module.state_dict().items()}
    atomic_write(path, encode(Checkpoint(role, descriptor, tensors, fingerprint, seed)))


def read(path: str | Path, expect_fingerprint: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    ck = decode(path.read_bytes())
    if expect_fingerprint is not None and ck.fingerprint != expect_fingerprint:
        raise CheckpointError(
            f"{path}: fingerprint {ck.fingerprint} does not match the current config ({expect_fingerprint})"
        )
    return ck


def save_denoiser(model: Denoiser, path: str | Path, fingerprint: str, seed: int) -> None:
    desc = {"arch": model.arch.to_dict(), "adapter_rank": model.adapter_rank()}
    save_module(model, path, model.role, desc, fingerprint, seed)


def load_denoiser(path: str | Path, expect_fingerprint: str | None = None) -> Denoiser:
    ck = read(path, expect_fingerprint)
    if "arch" not in ck.descriptor:
        raise CheckpointError(f"{path} does not hold a denoiser")
    model = Denoiser(Arch(**ck.descriptor["arch"]), ck.role)
    if ck.descriptor.get("adapter_rank"):
        model.attach_adapter(ck.descriptor["adapter_rank"])
    _load_exact(model, ck.tensors, path)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _load_exact(module: nn.Module, tensors: dict, path) -> None:
    own = module.state_dict()
    if set(own) != set(tensors):
        missing = sorted(set(own) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(own))[:3]
        raise CheckpointError(f"{path}: tensor table mismatch (missing {missing}, unexpected {extra})")
    for k, v in tensors.items():
        if own[k].shape != v.shape:
            raise CheckpointError(f"{path}: shape mismatch for {k}")
    module.load_state_dict(tensors, strict=True)


def load_into(module: nn.Module, path: str | Path, expect_fingerprint: str | None = None) -> Checkpoint:
    ck = read(path, expect_fingerprint)
    _load_exact(module, ck.tensors, path)
    return ck
