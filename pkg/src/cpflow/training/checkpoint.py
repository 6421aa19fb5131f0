"""Single-file checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"CPFLOWCK"
    version    u32       currently 1
    hdr_len    u64
    header     hdr_len bytes of UTF-8 JSON (sorted keys, compact separators)
    count      u32       number of arrays
    count x:
        name_len  u32
        name      name_len bytes UTF-8
        ndim      u32
        dims      ndim x u64
        data      prod(dims) x f64 little-endian, row-major

Array names are ``param.<stack name>``, ``adam.m.<stack name>`` and
``adam.v.<stack name>``, written in sorted order so that save -> load ->
save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..flow import FlowLayer, FlowStack
from ..icnn import ICNNConfig, PotentialParams
from .config import TrainConfig
from .optim import AdamState

__all__ = ["Checkpoint", "CheckpointError", "MAGIC", "VERSION", "write_arrays", "read_arrays"]

MAGIC = b"CPFLOWCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_arrays(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(hdr)), hdr, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def read_arrays(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hdr_len = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 20
    header = json.loads(blob[pos : pos + hdr_len].decode())
    pos += hdr_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last array")
    return header, arrays


@dataclass
class Checkpoint:
    stack: FlowStack
    config: TrainConfig = field(default_factory=TrainConfig)
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        icnn_cfg = self.stack.layers[0].config
        header = {
            "train_config": self.config.to_dict(),
            "icnn_config": icnn_cfg.to_dict(),
            "n_blocks": len(self.stack.layers),
            "actnorm": self.stack.actnorm,
            "initialized": self.stack.initialized,
            "step": self.step,
            "adam_step": self.adam.step,
            # shuffling and probes are keyed on (seed, step), so this is the full PRNG state
            "prng": {"seed": self.config.seed, "step": self.step},
            "extra": self.extra,
        }
        arrays = {f"param.{k}": v for k, v in self.stack.arrays().items()}
        arrays.update({f"adam.m.{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        return write_arrays(header, arrays)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        header, arrays = read_arrays(blob)
        try:
            icnn_cfg = ICNNConfig.from_dict(header["icnn_config"])
            n_blocks = int(header["n_blocks"])
            config = TrainConfig.from_dict(header["train_config"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        layers = []
        for i in range(n_blocks):
            prefix = f"block{i}."
            own = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix) and not k.startswith(prefix + "pre.")}
            layers.append(FlowLayer(icnn_cfg, PotentialParams(own, actnorm_initialized=bool(header["initialized"]))))
        stack = FlowStack(layers, actnorm=bool(header["actnorm"]))
        stack.set_arrays({k: v for k, v in params.items() if ".pre." in k})
        stack.initialized = bool(header["initialized"])
        adam = AdamState(
            step=int(header["adam_step"]),
            m={k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")},
            v={k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")},
        )
        return cls(stack, config, adam, int(header["step"]), header.get("extra", {}))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
