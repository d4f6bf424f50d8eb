"""Self-check suites: gradient checks, receptive-field probe and metric oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .config import DecoderConfig
from .flow import FlowField
from .gradcheck import grad_check
from .metrics import aggregate_iou, evaluate_stream
from .model import SegmentationModel, decode_temporal, receptive_field, window_logits
from .tensor import Tensor

GRADCHECK_TOL = 1e-4
KINK_TOL = GRADCHECK_TOL
METRICS_TOL = 1e-12

# Per-class IoU for the partial nephrectomy test set (background, kidney,
# liver, renal artery, renal vein) and the reported means.
PN_PER_CLASS_IOU = {
    "HRNet32": ([0.9140, 0.6180, 0.5481, 0.3958, 0.3672], 0.5680),
    "Swin base": ([0.9270, 0.6664, 0.7120, 0.3855, 0.4015], 0.6187),
}
TABLE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: {self.value:.3e} (threshold {self.threshold:.0e}){extra}"


# ---------------------------------------------------------------------------
# gradient checks


def tiny_config() -> DecoderConfig:
    return DecoderConfig(
        num_layers=2, kernel_t=3, feature_size=8, temporal_window=4, num_classes=3, encoder_channels=(4, 8)
    )


def op_gradchecks(seed: int) -> dict[str, float]:
    """Max relative error per differentiable op on random small double-precision inputs."""
    rng = np.random.default_rng(seed)
    errs: dict[str, float] = {}

    def probe(shape):
        r = rng.normal(size=shape)
        return lambda out: (out * r).sum()

    x3 = rng.normal(size=(1, 2, 5, 4, 4))
    w3 = rng.normal(size=(3, 2, 3, 3, 3))
    b3 = rng.normal(size=3)
    d = int(rng.integers(1, 3))
    p3 = probe((1, 3, 5, 4, 4))
    errs["conv3d/input"] = grad_check(lambda t: p3(F.conv3d(t, Tensor(w3), Tensor(b3), dilation_t=d)), x3)
    errs["conv3d/weight"] = grad_check(lambda t: p3(F.conv3d(Tensor(x3), t, Tensor(b3), dilation_t=d)), w3)
    errs["conv3d/bias"] = grad_check(lambda t: p3(F.conv3d(Tensor(x3), Tensor(w3), t, dilation_t=d)), b3)

    x2 = rng.normal(size=(2, 3, 6, 5))
    w2 = rng.normal(size=(4, 3, 3, 3))
    stride = int(rng.integers(1, 3))
    out_shape = F.conv2d(Tensor(x2), Tensor(w2), None, stride=stride, padding=1).shape
    p2 = probe(out_shape)
    errs["conv2d/input"] = grad_check(lambda t: p2(F.conv2d(t, Tensor(w2), None, stride=stride, padding=1)), x2)
    errs["conv2d/weight"] = grad_check(lambda t: p2(F.conv2d(Tensor(x2), t, None, stride=stride, padding=1)), w2)

    xb = rng.normal(size=(3, 4, 2, 3))
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    pb = probe(xb.shape)

    def bn(x, g=gamma, b=beta):
        return F.batch_norm(x, Tensor(g) if not isinstance(g, Tensor) else g, Tensor(b) if not isinstance(b, Tensor) else b,
                            np.zeros(4), np.ones(4), training=True)

    errs["batch_norm/input"] = grad_check(lambda t: pb(bn(t)), xb)
    errs["batch_norm/scale"] = grad_check(lambda t: pb(bn(Tensor(xb), g=t)), gamma)
    errs["batch_norm/shift"] = grad_check(lambda t: pb(bn(Tensor(xb), b=t)), beta)

    v = rng.normal(size=(3, 2, 3, 3, 3))
    g = rng.uniform(0.5, 2.0, size=3)
    pw = probe(v.shape)
    errs["weight_norm/direction"] = grad_check(lambda t: pw(F.weight_norm(t, Tensor(g))), v)
    errs["weight_norm/magnitude"] = grad_check(lambda t: pw(F.weight_norm(Tensor(v), t)), g)

    xr = rng.normal(size=(4, 5))
    xr[np.abs(xr) < 1e-3] = 0.5
    pr = probe(xr.shape)
    errs["relu"] = grad_check(lambda t: pr(F.relu(t)), xr)

    xs = rng.normal(size=(2, 4, 3, 3))
    ps = probe(xs.shape)
    errs["softmax"] = grad_check(lambda t: ps(F.softmax(t, axis=1)), xs)

    logits = rng.normal(size=(2, 3, 4, 3, 3))
    labels = rng.integers(0, 3, size=(2, 4, 3, 3))
    fw = np.zeros(4)
    fw[2] = 1.0
    errs["cross_entropy"] = grad_check(lambda t: F.cross_entropy(t, labels, fw), logits)

    xu = rng.normal(size=(2, 3, 3, 4))
    factor = int(rng.integers(1, 4))
    pu = probe((2, 3, 3 * factor, 4 * factor))
    errs["bilinear_upsample2d"] = grad_check(lambda t: pu(F.bilinear_upsample2d(t, factor)), xu)
    return errs


def model_gradcheck(seed: int, max_checks: int = 6) -> dict[str, float]:
    """End-to-end check of the central-frame loss on the tiny configuration.

    Weight-norm magnitudes are checked with batch norm in eval mode: in train
    mode the following batch norm cancels any per-channel scale, so their
    true gradient is ~0 and the comparison would only measure round-off.
    """
    cfg = tiny_config()
    model = SegmentationModel.create(cfg, "sptcn", seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 7])
    clips = rng.integers(0, 256, size=(1, cfg.temporal_window, 8, 8, 3)).astype(np.uint8)
    labels = rng.integers(0, cfg.num_classes, size=(1, cfg.temporal_window, 8, 8))
    fw = np.zeros(cfg.temporal_window)
    fw[cfg.center] = 1.0
    errs = {}
    names = [
        ("encoder.conv0.weight", True),
        ("encoder.bn2.scale", True),
        ("decoder.in_conv.weight", True),
        ("decoder.layers.0.dilated.direction", True),
        ("decoder.layers.0.dilated.magnitude", False),
        ("decoder.layers.1.dilated.magnitude", False),
        ("decoder.layers.1.pointwise.weight", True),
        ("decoder.out_conv.bias", True),
        ("decoder.seg.weight", True),
    ]
    for name, training in names:
        original = model.params[name]

        def loss(t: Tensor, name=name, training=training) -> Tensor:
            model.params[name] = t
            try:
                return F.cross_entropy(window_logits(clips, model, training=training), labels, fw)
            finally:
                model.params[name] = original

        errs[f"model/{name}"] = grad_check(
            loss, original.data, max_checks=max_checks, rng=np.random.default_rng(seed), kink_tol=KINK_TOL
        )
    return errs


def run_gradcheck_suite(seeds: int = 20) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for s in range(seeds):
        for name, err in {**op_gradchecks(s), **model_gradcheck(s)}.items():
            worst[name] = max(worst.get(name, 0.0), err)
    results = [CheckResult(f"gradcheck {n}", e, GRADCHECK_TOL, e < GRADCHECK_TOL, f"{seeds} seeds") for n, e in worst.items()]
    overall = max(worst.values())
    results.append(CheckResult("gradcheck max", overall, GRADCHECK_TOL, overall < GRADCHECK_TOL, f"{seeds} seeds"))
    return results


# ---------------------------------------------------------------------------
# receptive field


def measure_receptive_field(num_layers: int, kernel_t: int, seed: int = 0, feature_size: int = 6) -> int:
    """Count input frames whose perturbation changes the decoder's central output frame.

    Runs in eval mode on a window longer than the analytic field so padding
    never hides a dependency. Raises if the influencing frames are not a
    contiguous block centred on the output frame.
    """
    rf = receptive_field(num_layers, kernel_t)
    window = rf + 6
    cfg = DecoderConfig(
        num_layers=num_layers, kernel_t=kernel_t, feature_size=feature_size, temporal_window=window, num_classes=3
    )
    model = SegmentationModel.create(cfg, "sptcn", seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(1, feature_size, window, 3, 3))
    c = cfg.center
    base = decode_temporal(Tensor(z), model).data[:, :, c]
    hits = []
    for t in range(window):
        z2 = z.copy()
        z2[:, :, t] += rng.normal(size=z2[:, :, t].shape)
        out = decode_temporal(Tensor(z2), model).data[:, :, c]
        if np.any(out != base):
            hits.append(t)
    if not hits:
        return 0
    lo, hi = min(hits), max(hits)
    if hits != list(range(lo, hi + 1)) or c - lo != hi - c:
        raise AssertionError(f"influencing frames {hits} are not a contiguous block centred on {c}")
    return hi - lo + 1


def run_rf_suite(kernel_t: int = 3, layers=(1, 2, 3, 4)) -> list[CheckResult]:
    results = []
    for n in layers:
        analytic = receptive_field(n, kernel_t)
        measured = measure_receptive_field(n, kernel_t)
        results.append(
            CheckResult(f"rf N={n} k_t={kernel_t}", float(abs(analytic - measured)), 0.5, analytic == measured,
                        f"analytic {analytic}, measured {measured}")
        )
    return results


# ---------------------------------------------------------------------------
# metrics oracle


def brute_force_stream(preds, gts, flows, num_classes):
    """Pixel-loop recomputation of per-class IoU, TC, mIoU and mean TC."""
    def iou_cells(a, b, valid):
        h, w = len(a), len(a[0])
        out = []
        for c in range(num_classes):
            inter = union = 0
            for y in range(h):
                for x in range(w):
                    if valid is not None and not valid[y][x]:
                        continue
                    pa, pb = a[y][x] == c, b[y][x] == c
                    inter += pa and pb
                    union += pa or pb
            out.append(inter / union if union else None)
        return out

    def warp(prev, flow):
        h, w = len(prev), len(prev[0])
        warped = [[0] * w for _ in range(h)]
        valid = [[False] * w for _ in range(h)]
        for y in range(h):
            for x in range(w):
                if not flow.valid[y, x]:
                    continue
                sx = int(round(x + float(flow.uv[y, x, 0])))
                sy = int(round(y + float(flow.uv[y, x, 1])))
                if 0 <= sx < w and 0 <= sy < h:
                    warped[y][x] = prev[sy][sx]
                    valid[y][x] = True
        return warped, valid

    def mean_table(rows):
        per_class, counts = [], []
        for c in range(num_classes):
            vals = [r[c] for r in rows if r[c] is not None]
            per_class.append(sum(vals) / len(vals) if vals else None)
            counts.append(len(vals))
        defined = [v for v in per_class if v is not None]
        return per_class, counts, (sum(defined) / len(defined) if defined else None)

    p = [m.tolist() for m in preds]
    g = [m.tolist() for m in gts]
    iou_rows = [iou_cells(a, b, None) for a, b in zip(p, g)]
    tc_rows = []
    for k, flow in enumerate(flows):
        warped, valid = warp(p[k], flow)
        tc_rows.append(iou_cells(p[k + 1], warped, valid))
    return mean_table(iou_rows), mean_table(tc_rows)


def random_stream(rng: np.random.Generator):
    frames = int(rng.integers(2, 7))
    h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    c = int(rng.integers(2, 6))
    preds = [rng.integers(0, c, size=(h, w)).astype(np.uint8) for _ in range(frames)]
    gts = [rng.integers(0, c, size=(h, w)).astype(np.uint8) for _ in range(frames)]
    flows = []
    for _ in range(frames - 1):
        uv = rng.integers(-2, 3, size=(h, w, 2)).astype(np.float32) + rng.uniform(-0.4, 0.4, size=(h, w, 2)).astype(np.float32)
        flows.append(FlowField(uv, rng.random((h, w)) > 0.2))
    return preds, gts, flows, c


def compare_to_brute_force(preds, gts, flows, num_classes) -> float:
    report = evaluate_stream(preds, gts, flows, num_classes)
    (iou_b, iou_nb, miou_b), (tc_b, tc_nb, mtc_b) = brute_force_stream(preds, gts, flows, num_classes)
    worst = 0.0

    def diff(a, b):
        if b is None:
            return 0.0 if math.isnan(a) else math.inf
        return abs(a - b)

    for c in range(num_classes):
        worst = max(worst, diff(report.iou[c], iou_b[c]), diff(report.tc[c], tc_b[c]))
        if report.iou_count[c] != iou_nb[c] or report.tc_count[c] != tc_nb[c]:
            return math.inf
    worst = max(worst, diff(report.mean_iou, miou_b), diff(report.mean_tc, mtc_b))
    return worst


def run_metrics_suite(seeds: int = 50) -> list[CheckResult]:
    rng = np.random.default_rng(12345)
    worst = max(compare_to_brute_force(*random_stream(rng)) for _ in range(seeds))
    results = [CheckResult("metrics brute-force agreement", worst, METRICS_TOL, worst < METRICS_TOL, f"{seeds} streams")]
    for name, (values, reported) in PN_PER_CLASS_IOU.items():
        _, _, miou, _ = aggregate_iou(np.array([values]))
        err = abs(miou - reported)
        results.append(
            CheckResult(f"mIoU from per-class table ({name})", err, TABLE_TOL, err < TABLE_TOL,
                        f"recomputed {miou:.4f}, reported {reported:.4f}")
        )
    return results


SUITES: dict[str, Callable[[], list[CheckResult]]] = {
    "gradcheck": run_gradcheck_suite,
    "rf": run_rf_suite,
    "metrics": run_metrics_suite,
}
