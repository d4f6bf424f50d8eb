"""Optical-flow fields and the Middlebury ``.flo`` file format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError

FLO_MAGIC = np.float32(202021.25)
INVALID_FLOW = np.float32(1e9)


@dataclass
class FlowField:
    """Per-pixel displacement ``uv[y, x] = (u, v)`` in pixels plus a validity flag."""

    uv: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.uv = np.asarray(self.uv, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.uv.ndim != 3 or self.uv.shape[-1] != 2:
            raise ShapeError(f"flow must be (H, W, 2), got {self.uv.shape}")
        if self.valid.shape != self.uv.shape[:2]:
            raise ShapeError(f"validity mask {self.valid.shape} does not match flow {self.uv.shape[:2]}")

    @property
    def height(self) -> int:
        return self.uv.shape[0]

    @property
    def width(self) -> int:
        return self.uv.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), np.float32), np.ones((height, width), bool))

    def hflip(self) -> "FlowField":
        uv = self.uv[:, ::-1].copy()
        uv[..., 0] *= -1
        return FlowField(uv, self.valid[:, ::-1].copy())

    def encoded(self) -> np.ndarray:
        """``uv`` with invalid pixels replaced by the sentinel value."""
        uv = self.uv.copy()
        uv[~self.valid] = INVALID_FLOW
        return uv


def write_flo(path: str | Path, flow: FlowField) -> None:
    h, w = flow.height, flow.width
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], "<f4").tobytes())
        fh.write(np.array([w, h], "<i4").tobytes())
        fh.write(flow.encoded().astype("<f4").tobytes())


def read_flo(path: str | Path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValidationError(f"{path}: truncated .flo header")
    magic = np.frombuffer(raw[:4], "<f4")[0]
    if magic != FLO_MAGIC:
        raise ValidationError(f"{path}: bad .flo magic {magic!r}")
    w, h = (int(v) for v in np.frombuffer(raw[4:12], "<i4"))
    payload = np.frombuffer(raw[12:], "<f4")
    if payload.size != w * h * 2:
        raise ValidationError(f"{path}: expected {w * h * 2} floats for {w}x{h}, found {payload.size}")
    uv = payload.reshape(h, w, 2).astype(np.float32)
    valid = ~((uv[..., 0] == INVALID_FLOW) & (uv[..., 1] == INVALID_FLOW))
    uv = np.where(valid[..., None], uv, np.float32(0))
    return FlowField(uv, valid)
