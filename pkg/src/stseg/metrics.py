"""Per-class IoU, mIoU and flow-warp temporal consistency (TC).

IoU is computed per class and frame and is undefined (NaN) when the class is
absent from both masks; undefined entries are skipped when averaging. TC
between frames ``t - 1`` and ``t`` is the per-class IoU between the
prediction at ``t`` and the prediction at ``t - 1`` warped onto ``t`` with the
backward flow, restricted to pixels where the warp is valid.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .flow import FlowField


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


def iou_class(pred: np.ndarray, gt: np.ndarray, c: int, valid: np.ndarray | None = None) -> float:
    """IoU of the binary class-``c`` masks, or NaN when their union is empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_pair(pred, gt)
    p, g = pred == c, gt == c
    if valid is not None:
        p, g = p & valid, g & valid
    union = np.count_nonzero(p | g)
    if union == 0:
        return math.nan
    return np.count_nonzero(p & g) / union


def iou_per_class(pred: np.ndarray, gt: np.ndarray, num_classes: int, valid: np.ndarray | None = None) -> np.ndarray:
    """Vector of :func:`iou_class` for classes ``0 .. num_classes - 1`` (via one confusion count)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_pair(pred, gt)
    p, g = pred.ravel().astype(np.int64), gt.ravel().astype(np.int64)
    if valid is not None:
        keep = np.asarray(valid).ravel()
        p, g = p[keep], g[keep]
    inter = np.bincount(p[p == g], minlength=num_classes)[:num_classes]
    union = np.bincount(p, minlength=num_classes)[:num_classes] + np.bincount(g, minlength=num_classes)[:num_classes] - inter
    out = np.full(num_classes, np.nan)
    defined = union > 0
    out[defined] = inter[defined] / union[defined]
    return out


def aggregate_iou(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, list[int]]:
    """Reduce a ``(frames, classes)`` table with NaN for undefined cells.

    Returns per-class means, per-class defined counts, the unweighted mean over
    classes with at least one defined value, and the list of classes that were
    never defined (and so left out of the mean).
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    counts = np.sum(~np.isnan(values), axis=0)
    sums = np.nansum(values, axis=0)
    per_class = np.full(values.shape[1], np.nan)
    per_class[counts > 0] = sums[counts > 0] / counts[counts > 0]
    undefined = [int(c) for c in np.flatnonzero(counts == 0)]
    defined = per_class[counts > 0]
    mean = float(defined.mean()) if defined.size else math.nan
    return per_class, counts, mean, undefined


def warp_mask(prev: np.ndarray, backward_flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour backward warp: ``warped[p] = prev[round(p + flow[p])]``.

    Returns ``(warped, valid)``; pixels with an invalid flow or a source
    outside the image are invalid (and hold 0 in ``warped``).
    """
    prev = np.asarray(prev)
    h, w = prev.shape
    if backward_flow.uv.shape[:2] != (h, w):
        raise ShapeError(f"flow {backward_flow.uv.shape[:2]} does not match mask {prev.shape}")
    yy, xx = np.mgrid[0:h, 0:w]
    sx = np.rint(xx + backward_flow.uv[..., 0].astype(np.float64)).astype(np.int64)
    sy = np.rint(yy + backward_flow.uv[..., 1].astype(np.float64)).astype(np.int64)
    valid = backward_flow.valid & (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    warped = np.zeros_like(prev)
    warped[valid] = prev[sy[valid], sx[valid]]
    return warped, valid


def temporal_consistency(
    pred_t: np.ndarray, pred_prev: np.ndarray, backward_flow: FlowField, num_classes: int
) -> np.ndarray:
    """Per-class TC for one frame pair (NaN where undefined)."""
    _check_pair(np.asarray(pred_t), np.asarray(pred_prev))
    warped, valid = warp_mask(pred_prev, backward_flow)
    return iou_per_class(pred_t, warped, num_classes, valid)


@dataclass
class MetricsReport:
    class_names: list[str]
    iou: np.ndarray
    iou_count: np.ndarray
    tc: np.ndarray
    tc_count: np.ndarray
    mean_iou: float
    mean_tc: float
    undefined_iou_classes: list[int] = field(default_factory=list)
    undefined_tc_classes: list[int] = field(default_factory=list)

    @property
    def warnings(self) -> int:
        return len(self.undefined_iou_classes)

    def rows(self) -> list[tuple[str, float, int, float, int]]:
        rows = []
        for c, name in enumerate(self.class_names):
            if self.iou_count[c] == 0:
                continue
            rows.append((name, float(self.iou[c]), int(self.iou_count[c]), float(self.tc[c]), int(self.tc_count[c])))
        n_iou = int(np.sum(self.iou_count > 0))
        n_tc = int(np.sum(self.tc_count > 0))
        rows.append(("__mean__", self.mean_iou, n_iou, self.mean_tc, n_tc))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "iou", "iou_count", "tc", "tc_count"])
        for name, iou, ni, tc, nt in self.rows():
            writer.writerow([name, _fmt(iou), ni, _fmt(tc), nt])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def read_report_csv(path: str | Path) -> dict[str, dict[str, float]]:
    """Parse a report CSV into ``{class: {"iou", "iou_count", "tc", "tc_count"}}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["class", "iou", "iou_count", "tc", "tc_count"]:
            raise ShapeError(f"{path}: unexpected report header {reader.fieldnames}")
        return {
            row["class"]: {
                "iou": float(row["iou"]),
                "iou_count": int(row["iou_count"]),
                "tc": float(row["tc"]),
                "tc_count": int(row["tc_count"]),
            }
            for row in reader
        }


def percent_difference(before: float, after: float) -> float:
    """Improvement in percentage points, ``100 * (after - before)``, as in the results tables."""
    return 100.0 * (after - before)


class StreamTables:
    """Accumulates per-frame IoU rows and per-pair TC rows over several streams."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.iou_rows: list[np.ndarray] = []
        self.tc_rows: list[np.ndarray] = []

    def add_stream(
        self,
        predictions: Sequence[np.ndarray],
        gts: Sequence[np.ndarray],
        flows: Sequence[FlowField] | None,
    ) -> None:
        """``flows[k]`` maps frame ``k + 1`` back to frame ``k``; ``None`` skips TC."""
        if len(predictions) != len(gts):
            raise ShapeError(f"{len(predictions)} predictions for {len(gts)} ground-truth masks")
        if flows is not None and len(predictions) > 0 and len(flows) != len(predictions) - 1:
            raise ShapeError(f"{len(flows)} flows for {len(predictions)} frames (need one per consecutive pair)")
        for pred, gt in zip(predictions, gts):
            self.iou_rows.append(iou_per_class(pred, gt, self.num_classes))
        if flows is not None:
            for k, flow in enumerate(flows):
                self.tc_rows.append(temporal_consistency(predictions[k + 1], predictions[k], flow, self.num_classes))

    def report(self, class_names: Sequence[str] | None = None) -> MetricsReport:
        names = list(class_names) if class_names is not None else [str(c) for c in range(self.num_classes)]
        empty = np.empty((0, self.num_classes))
        iou, iou_n, miou, undef_iou = aggregate_iou(np.array(self.iou_rows) if self.iou_rows else empty)
        tc, tc_n, mtc, undef_tc = aggregate_iou(np.array(self.tc_rows) if self.tc_rows else empty)
        return MetricsReport(names, iou, iou_n, tc, tc_n, miou, mtc, undef_iou, undef_tc)


def evaluate_stream(
    predictions: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    flows: Sequence[FlowField] | None,
    num_classes: int,
    class_names: Sequence[str] | None = None,
) -> MetricsReport:
    tables = StreamTables(num_classes)
    tables.add_stream(predictions, gts, flows)
    return tables.report(class_names)
