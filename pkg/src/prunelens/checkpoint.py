"""Binary checkpoint files.

Layout: magic, u32 format version, u32 header length, canonical-JSON header
(config digest, epoch/step, optimizer hyperparameters, schedule, RNG state,
and a path-ordered shape table), then per-path payloads in lexicographic
order — value as little-endian float32, Adam moments as float32, and the
mask as a packed bitset when present — and a trailing CRC32 of everything
before it. Loading then saving reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PLCKPT01"
VERSION = 1


class CheckpointError(IOError):
    pass


def snapshot_array(arr: np.ndarray) -> np.ndarray:
    """Round float64 data through the on-disk float32 representation."""
    return np.ascontiguousarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass
class Checkpoint:
    """In-memory image of one checkpoint file."""

    values: dict[str, np.ndarray]          # float64, already float32-rounded
    masks: dict[str, np.ndarray] | None    # float 0/1 arrays, prunable paths only
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int
    epoch: int
    config_digest: str
    adam: dict
    schedule: dict
    rng_state: dict

    def sparsity_mask(self, path: str) -> np.ndarray | None:
        return None if self.masks is None else self.masks.get(path)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    paths = sorted(ckpt.values.keys())
    entries = []
    for p in paths:
        entries.append({
            "path": p,
            "shape": list(ckpt.values[p].shape),
            "has_mask": bool(ckpt.masks and p in ckpt.masks),
        })
    header = {
        "config_digest": ckpt.config_digest,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "adam": ckpt.adam,
        "schedule": ckpt.schedule,
        "rng_state": ckpt.rng_state,
        "entries": entries,
    }
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    hbytes = _canonical_json(header)
    blob += struct.pack("<I", len(hbytes))
    blob += hbytes
    for p in paths:
        for arr in (ckpt.values[p], ckpt.opt_m[p], ckpt.opt_v[p]):
            blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        if ckpt.masks and p in ckpt.masks:
            bits = np.packbits(ckpt.masks[p].reshape(-1).astype(bool))
            blob += bits.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    out = Path(path)
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(out)  # atomic on one filesystem


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = len(MAGIC)
    version = struct.unpack_from("<I", blob, off)[0]
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    hlen = struct.unpack_from("<I", blob, off)[0]
    off += 4
    header = json.loads(blob[off:off + hlen])
    off += hlen
    values, opt_m, opt_v = {}, {}, {}
    masks: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        p = entry["path"]
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        for target in (values, opt_m, opt_v):
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            target[p] = arr.astype(np.float64).reshape(shape)
            off += 4 * n
        if entry["has_mask"]:
            nbytes = (n + 7) // 8
            bits = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=off)
            masks[p] = np.unpackbits(bits)[:n].reshape(shape).astype(np.float64)
            off += nbytes
    if off != len(blob) - 4:
        raise CheckpointError(f"{path}: trailing bytes do not match the header")
    return Checkpoint(values=values, masks=masks or None, opt_m=opt_m, opt_v=opt_v,
                      step=header["step"], epoch=header["epoch"],
                      config_digest=header["config_digest"], adam=header["adam"],
                      schedule=header["schedule"], rng_state=header["rng_state"])
