"""Binary checkpoint: name-keyed parameter table plus the data hash it was trained on."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import _atomic_write
from .model import BRANCHES, LprParams

CKPT_MAGIC = b"LPRC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: LprParams
    mask: tuple[str, ...]
    n_states: int
    n_objects: int
    data_hash: str = ""

    def check_compatible(self, space, dim: int):
        if (self.n_states, self.n_objects) != (space.n_states, space.n_objects):
            raise CheckpointError(
                f"checkpoint was trained on {self.n_states} states x {self.n_objects} objects, "
                f"dataset has {space.n_states} x {space.n_objects}"
            )
        if self.params.dim != dim:
            raise CheckpointError(f"checkpoint feature dimension {self.params.dim} != dataset dimension {dim}")

    def check_mask(self, mask):
        extra = [b for b in mask if b not in self.mask]
        if extra:
            raise CheckpointError(f"branches {extra} were not trained in this checkpoint (trained: {list(self.mask)})")


def _mask_bits(mask) -> int:
    return sum(1 << i for i, b in enumerate(BRANCHES) if b in mask)


def _bits_mask(bits: int) -> tuple[str, ...]:
    return tuple(b for i, b in enumerate(BRANCHES) if bits >> i & 1)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    named = p.named()
    digest = bytes.fromhex(ckpt.data_hash) if ckpt.data_hash else bytes(32)
    if len(digest) != 32:
        raise ValueError("data hash must be a sha256 hex digest")
    parts = [
        CKPT_MAGIC,
        struct.pack("<5IdB", CKPT_VERSION, ckpt.n_states, ckpt.n_objects, p.dim, p.com.W1.shape[1], p.com.ratio,
                    _mask_bits(ckpt.mask)),
        digest,
        struct.pack("<I", len(named)),
    ]
    for name, param in named.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", param.data.ndim) + struct.pack(f"<{param.data.ndim}I", *param.data.shape))
        parts.append(param.data.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 + 32:
        raise CheckpointError("truncated checkpoint")
    body, digest = buf[:-32], buf[-32:]
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = body[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError("malformed checkpoint header: bad magic (expected LPRC)")
    version, ns, no, d, hidden, ratio, bits = struct.unpack("<5IdB", take(struct.calcsize("<5IdB"), "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    data_hash = take(32, "data hash")
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4, "name length"))
        name = take(n, "parameter name").decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<I", take(4, f"{name} rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(take(8 * size, f"{name} values"), dtype="<f8").reshape(shape).copy()
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after parameter table")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")

    params = LprParams.init(d, np.random.default_rng(0), hidden=hidden, ratio=ratio)
    expected = params.named()
    missing = sorted(set(expected) - set(tensors))
    unknown = sorted(set(tensors) - set(expected))
    if missing or unknown:
        raise CheckpointError(f"parameter table mismatch: missing {missing}, unexpected {unknown}")
    for name, param in expected.items():
        if tensors[name].shape != param.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: file {tensors[name].shape}, expected {param.data.shape}")
        if not np.all(np.isfinite(tensors[name])):
            raise CheckpointError(f"non-finite values in {name}")
        param.data = tensors[name]
    return Checkpoint(params, _bits_mask(bits), ns, no, data_hash.hex() if any(data_hash) else "")


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write atomically; returns the git-style blob hash of the file."""
    blob = encode_checkpoint(ckpt)
    _atomic_write(Path(path), blob)
    return blob_hash(blob)


def load_checkpoint(path, space=None, dim: int | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if space is not None:
        ckpt.check_compatible(space, dim if dim is not None else ckpt.params.dim)
    return ckpt


def blob_hash(blob: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()
