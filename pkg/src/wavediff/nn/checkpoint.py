"""Binary checkpoint files (.ckpt).

Layout, all little-endian::

    b"WNCK" | u32 version | u32 n | n bytes JSON architecture descriptor
    u64 p | p x f32 parameters
    u64 adam step | u8 has moments | [p x f32 first moment | p x f32 second moment]
    4 x f64 normalisation (input mean, input std, output mean, output std)
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wavediff.diffusion import Normalizer
from wavediff.nn.models import UNet3D, UNetConfig
from wavediff.nn.optim import Adam

MAGIC = b"WNCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: UNetConfig
    params: np.ndarray
    adam_step: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    input_norm: Normalizer = field(default_factory=Normalizer)
    output_norm: Normalizer = field(default_factory=Normalizer)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_training(cls, net: UNet3D, opt: Adam | None, input_norm: Normalizer,
                      output_norm: Normalizer = Normalizer(), meta: dict | None = None) -> "Checkpoint":
        step, m, v = opt.state_flat() if opt is not None else (0, None, None)
        return cls(net.config, net.get_flat().astype(np.float32), step, m, v, input_norm, output_norm,
                   dict(meta or {}))

    def build_network(self) -> UNet3D:
        net = UNet3D(self.config, dtype=np.float32)
        net.set_flat(self.params)
        return net

    def descriptor(self) -> dict:
        return {"architecture": self.config.to_dict(), "meta": self.meta}

    def to_bytes(self) -> bytes:
        desc = json.dumps(self.descriptor(), sort_keys=True).encode()
        params = np.asarray(self.params, dtype="<f4")
        parts = [MAGIC, struct.pack("<II", VERSION, len(desc)), desc,
                 struct.pack("<Q", params.size), params.tobytes()]
        has = self.adam_m is not None and self.adam_v is not None
        parts.append(struct.pack("<QB", self.adam_step, int(has)))
        if has:
            parts += [np.asarray(self.adam_m, "<f4").tobytes(), np.asarray(self.adam_v, "<f4").tobytes()]
        parts.append(struct.pack("<4d", self.input_norm.mean, self.input_norm.std,
                                 self.output_norm.mean, self.output_norm.std))
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if len(buf) < 44 or buf[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, digest = buf[:-32], buf[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checkpoint content hash mismatch")
        version, n = struct.unpack_from("<II", body, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        desc = json.loads(body[pos : pos + n])
        pos += n
        (count,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        params = np.frombuffer(body, "<f4", count, pos).astype(np.float32)
        pos += 4 * count
        step, has = struct.unpack_from("<QB", body, pos)
        pos += 9
        m = v = None
        if has:
            m = np.frombuffer(body, "<f4", count, pos).astype(np.float32)
            pos += 4 * count
            v = np.frombuffer(body, "<f4", count, pos).astype(np.float32)
            pos += 4 * count
        im, istd, om, ostd = struct.unpack_from("<4d", body, pos)
        pos += 32
        if pos != len(body):
            raise CheckpointError("trailing bytes in checkpoint")
        config = UNetConfig.from_dict(desc["architecture"])
        ckpt = cls(config, params, step, m, v, Normalizer(im, istd), Normalizer(om, ostd), desc.get("meta", {}))
        expected = UNet3D(config).num_parameters()
        if expected != count:
            raise CheckpointError(f"parameter vector has {count} entries, architecture needs {expected}")
        return ckpt

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
