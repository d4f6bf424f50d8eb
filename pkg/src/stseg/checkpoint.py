"""Binary checkpoint files.

Layout (little-endian): ``b"STSG"``, u32 format version, u32 header length,
UTF-8 JSON header, then repeated tensor records ``u32 name length, name,
u32 ndim, u32 dims..., float32 payload``. Record names are prefixed with
``param/``, ``buffer/``, ``adam_m/`` or ``adam_v/``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import DecoderConfig
from .errors import CheckpointError
from .model import SegmentationModel
from .optim import OptimizerState
from .tensor import Tensor

MAGIC = b"STSG"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: DecoderConfig
    params: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]"
    optimizer: OptimizerState | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(
        cls, model: SegmentationModel, optimizer: OptimizerState | None = None, meta: dict[str, Any] | None = None
    ) -> "Checkpoint":
        return cls(
            model.kind,
            model.config,
            OrderedDict((k, v.data.astype(np.float32)) for k, v in model.params.items()),
            OrderedDict((k, v.astype(np.float32)) for k, v in model.buffers.items()),
            optimizer,
            dict(meta or {}),
        )

    def to_model(self) -> SegmentationModel:
        params = OrderedDict((k, Tensor(v.copy(), requires_grad=True)) for k, v in self.params.items())
        buffers = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        return SegmentationModel(self.config, self.kind, params, buffers)

    def to_bytes(self) -> bytes:
        header: dict[str, Any] = {
            "kind": self.kind,
            "model": self.config.to_dict(),
            "meta": self.meta,
            "optimizer": None,
        }
        records: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in self.params.items()]
        records += [(f"buffer/{k}", v) for k, v in self.buffers.items()]
        if self.optimizer is not None:
            opt = self.optimizer
            header["optimizer"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step}
            records += [(f"adam_m/{k}", v) for k, v in opt.m.items()]
            records += [(f"adam_v/{k}", v) for k, v in opt.v.items()]
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head]
        for name, arr in records:
            nb = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            parts.append(struct.pack("<I", len(nb)) + nb)
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "Checkpoint":
        if raw[:4] != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint (magic {raw[:4]!r})")
        try:
            version, head_len = struct.unpack_from("<II", raw, 4)
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
            pos = 12
            header = json.loads(raw[pos : pos + head_len].decode("utf-8"))
            pos += head_len
            groups: dict[str, OrderedDict[str, np.ndarray]] = {
                g: OrderedDict() for g in ("param", "buffer", "adam_m", "adam_v")
            }
            while pos < len(raw):
                (nlen,) = struct.unpack_from("<I", raw, pos)
                pos += 4
                name = raw[pos : pos + nlen].decode("utf-8")
                pos += nlen
                (ndim,) = struct.unpack_from("<I", raw, pos)
                pos += 4
                dims = struct.unpack_from(f"<{ndim}I", raw, pos)
                pos += 4 * ndim
                count = int(np.prod(dims)) if ndim else 1
                if pos + 4 * count > len(raw):
                    raise CheckpointError(f"{source}: truncated record {name!r}")
                arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
                pos += 4 * count
                group, _, key = name.partition("/")
                if group not in groups:
                    raise CheckpointError(f"{source}: unknown record group in {name!r}")
                groups[group][key] = arr
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{source}: corrupt checkpoint ({exc})") from exc
        optimizer = None
        if header.get("optimizer") is not None:
            o = header["optimizer"]
            optimizer = OptimizerState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"], groups["adam_m"], groups["adam_v"])
        return cls(
            header["kind"],
            DecoderConfig.from_dict(header["model"]),
            groups["param"],
            groups["buffer"],
            optimizer,
            header.get("meta", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(raw, str(path))
