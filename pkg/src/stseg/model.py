"""Per-frame encoder, SP-TCN temporal decoder and the composed video model.

The encoder maps each RGB frame independently to a feature map at
``1 / spatial_downsample`` resolution. The decoder stacks those maps in time
and applies: an input 3D conv block, ``num_layers`` dilated residual layers
(temporal dilation ``2**i``), an output 3D conv block and a 1x1x1
segmentation layer followed by bilinear upsampling back to frame size.

``kind="single_frame"`` swaps the decoder for a 2D head with the same channel
width; it is the control model the temporal decoder is compared against.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import functional as F
from .config import DecoderConfig
from .errors import ConfigurationError, ShapeError, ValidationError
from .tensor import Tensor

KINDS = ("sptcn", "single_frame")


def receptive_field(num_layers: int, kernel_t: int) -> int:
    """Temporal receptive field of the decoder, in frames.

    Dilated stack: ``1 + (k_t - 1) * (2**N - 1)``; the two plain 3D conv
    blocks add ``k_t - 1`` each; pointwise convolutions add nothing.
    """
    if num_layers < 1 or kernel_t < 1 or kernel_t % 2 == 0:
        raise ConfigurationError(f"invalid decoder shape: num_layers={num_layers}, kernel_t={kernel_t}")
    return 1 + (kernel_t - 1) * (2**num_layers - 1) + 2 * (kernel_t - 1)


def encoder_strides(config: DecoderConfig) -> tuple[int, int, int]:
    ds = config.spatial_downsample
    return (1, 2 if ds >= 2 else 1, 2 if ds >= 4 else 1)


class SegmentationModel:
    """Parameters, normalisation buffers and configuration of one model."""

    def __init__(
        self,
        config: DecoderConfig,
        kind: str = "sptcn",
        params: "OrderedDict[str, Tensor] | None" = None,
        buffers: "OrderedDict[str, np.ndarray] | None" = None,
    ):
        if kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        self.config = config
        self.kind = kind
        self.params: OrderedDict[str, Tensor] = params if params is not None else OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = buffers if buffers is not None else OrderedDict()

    @classmethod
    def create(cls, config: DecoderConfig, kind: str = "sptcn", seed: int = 0, dtype=np.float32) -> "SegmentationModel":
        model = cls(config, kind)
        rng = np.random.default_rng(seed)
        c1, c2 = config.encoder_channels
        f = config.feature_size
        kt = config.kernel_t

        for i, (cin, cout) in enumerate([(3, c1), (c1, c2), (c2, f)]):
            model._conv(f"encoder.conv{i}.weight", (cout, cin, 3, 3), rng, dtype)
            model._norm(f"encoder.bn{i}", cout, dtype)

        if kind == "sptcn":
            model._conv("decoder.in_conv.weight", (f, f, 3, 3, kt), rng, dtype, bias=True)
            for i in range(config.num_layers):
                pre = f"decoder.layers.{i}"
                direction = model._conv(f"{pre}.dilated.direction", (f, f, 3, 3, kt), rng, dtype)
                norm = np.sqrt((direction.data.astype(np.float64) ** 2).reshape(f, -1).sum(axis=1))
                model.params[f"{pre}.dilated.magnitude"] = Tensor(norm.astype(dtype), requires_grad=True)
                model.params[f"{pre}.dilated.bias"] = Tensor(np.zeros(f, dtype), requires_grad=True)
                model._norm(f"{pre}.bn", f, dtype)
                model._conv(f"{pre}.pointwise.weight", (f, f, 1, 1, 1), rng, dtype, bias=True)
            model._conv("decoder.out_conv.weight", (f, f, 3, 3, kt), rng, dtype, bias=True)
            model._conv("decoder.seg.weight", (config.num_classes, f, 1, 1, 1), rng, dtype, bias=True)
        else:
            model._conv("head.conv.weight", (f, f, 3, 3), rng, dtype, bias=True)
            model._conv("head.seg.weight", (config.num_classes, f, 1, 1), rng, dtype, bias=True)
        return model

    def _conv(self, name: str, shape, rng, dtype, bias: bool = False) -> Tensor:
        fan_in = int(np.prod(shape[1:]))
        w = Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype), requires_grad=True)
        self.params[name] = w
        if bias:
            self.params[name.rsplit(".", 1)[0] + ".bias"] = Tensor(np.zeros(shape[0], dtype), requires_grad=True)
        return w

    def _norm(self, prefix: str, channels: int, dtype) -> None:
        self.params[f"{prefix}.scale"] = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.params[f"{prefix}.shift"] = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.buffers[f"{prefix}.running_mean"] = np.zeros(channels, dtype)
        self.buffers[f"{prefix}.running_var"] = np.ones(channels, dtype)

    # -- helpers ---------------------------------------------------------------

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def encoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("encoder.")]

    def copy(self, dtype=None) -> "SegmentationModel":
        params = OrderedDict(
            (k, Tensor(v.data.astype(dtype or v.dtype, copy=True), requires_grad=v.requires_grad))
            for k, v in self.params.items()
        )
        buffers = OrderedDict((k, v.astype(dtype or v.dtype, copy=True)) for k, v in self.buffers.items())
        return SegmentationModel(self.config, self.kind, params, buffers)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _bn(self, x: Tensor, prefix: str, training: bool) -> Tensor:
        return F.batch_norm(
            x,
            self.params[f"{prefix}.scale"],
            self.params[f"{prefix}.shift"],
            self.buffers[f"{prefix}.running_mean"],
            self.buffers[f"{prefix}.running_var"],
            training,
        )


# ---------------------------------------------------------------------------
# encoder


def frames_to_tensor(frames: np.ndarray, dtype=np.float32) -> Tensor:
    """``(..., H, W, 3)`` frames in [0, 255] -> ``(B, 3, H, W)`` tensor in [0, 1]."""
    frames = np.asarray(frames)
    if frames.ndim < 3 or frames.shape[-1] != 3:
        raise ValidationError(f"frames must have 3 colour channels in the last axis, got shape {frames.shape}")
    flat = frames.reshape((-1,) + frames.shape[-3:])
    return Tensor(np.ascontiguousarray(flat.transpose(0, 3, 1, 2)).astype(dtype) / dtype(255.0))


def encode_frames(x: Tensor, model: SegmentationModel, training: bool = False) -> Tensor:
    """Encode a batch ``(B, 3, H, W)`` of normalised frames to ``(B, F, H', W')``."""
    h, w = x.shape[-2:]
    ds = model.config.spatial_downsample
    if h % ds or w % ds:
        raise ShapeError(f"frame size {h}x{w} is not divisible by spatial_downsample {ds}")
    for i, stride in enumerate(encoder_strides(model.config)):
        x = F.conv2d(x, model.p(f"encoder.conv{i}.weight"), None, stride=stride, padding=1)
        x = F.relu(model._bn(x, f"encoder.bn{i}", training))
    return x


def encode_frame(frame: np.ndarray, model: SegmentationModel, training: bool = False) -> Tensor:
    """Encode one ``(H, W, 3)`` RGB frame to an ``(F, H', W')`` feature map."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ValidationError(f"frame must be (H, W, 3), got {frame.shape}")
    dtype = model.params["encoder.conv0.weight"].dtype.type
    z = encode_frames(frames_to_tensor(frame, dtype), model, training)
    return z.reshape(z.shape[1:])


# ---------------------------------------------------------------------------
# temporal decoder


def dilated_residual_layer(z: Tensor, i: int, model: SegmentationModel, training: bool = False) -> Tensor:
    """``z + pointwise(relu(bn(weightnormed_dilated_conv(z))))`` with temporal dilation ``2**i``."""
    if not 0 <= i < model.config.num_layers:
        raise ConfigurationError(f"layer index {i} outside [0, {model.config.num_layers})")
    pre = f"decoder.layers.{i}"
    f = model.config.feature_size
    if z.ndim != 5 or z.shape[1] != f:
        raise ShapeError(f"residual layer expects (N, {f}, T, H, W) features, got {z.shape}")
    w = F.weight_norm(model.p(f"{pre}.dilated.direction"), model.p(f"{pre}.dilated.magnitude"))
    h = F.conv3d(z, w, model.p(f"{pre}.dilated.bias"), dilation_t=model.config.dilation(i))
    h = F.relu(model._bn(h, f"{pre}.bn", training))
    h = F.conv3d(h, model.p(f"{pre}.pointwise.weight"), model.p(f"{pre}.pointwise.bias"))
    return z + h


def decode_temporal(z: Tensor, model: SegmentationModel, training: bool = False) -> Tensor:
    """Map features ``(N, F, T, H', W')`` (or unbatched ``(F, T, H', W')``) to logits ``(N, C, T, H, W)``."""
    if model.kind != "sptcn":
        raise ConfigurationError("decode_temporal needs an 'sptcn' model")
    cfg = model.config
    unbatched = z.ndim == 4
    if unbatched:
        z = z.reshape((1,) + z.shape)
    if z.ndim != 5 or z.shape[1] != cfg.feature_size:
        raise ShapeError(f"expected features (N, {cfg.feature_size}, T, H', W'), got {z.shape}")
    h = F.conv3d(z, model.p("decoder.in_conv.weight"), model.p("decoder.in_conv.bias"))
    for i in range(cfg.num_layers):
        h = dilated_residual_layer(h, i, model, training)
    h = F.conv3d(h, model.p("decoder.out_conv.weight"), model.p("decoder.out_conv.bias"))
    h = F.conv3d(h, model.p("decoder.seg.weight"), model.p("decoder.seg.bias"))
    out = F.bilinear_upsample2d(h, cfg.spatial_downsample)
    return out.reshape(out.shape[1:]) if unbatched else out


def head_2d(z: Tensor, model: SegmentationModel) -> Tensor:
    """Single-frame segmentation head: ``(B, F, H', W')`` -> logits ``(B, C, H, W)``."""
    h = F.relu(F.conv2d(z, model.p("head.conv.weight"), model.p("head.conv.bias"), padding=1))
    h = F.conv2d(h, model.p("head.seg.weight"), model.p("head.seg.bias"))
    return F.bilinear_upsample2d(h, model.config.spatial_downsample)


# ---------------------------------------------------------------------------
# composed model


def _check_clips(clips: np.ndarray, model: SegmentationModel) -> np.ndarray:
    clips = np.asarray(clips)
    if clips.ndim == 4:
        clips = clips[None]
    if clips.ndim != 5 or clips.shape[-1] != 3:
        raise ValidationError(f"clips must be (N, T, H, W, 3) or (T, H, W, 3), got {clips.shape}")
    if clips.shape[1] != model.config.temporal_window:
        raise ValidationError(
            f"clip length {clips.shape[1]} does not match temporal window {model.config.temporal_window}"
        )
    return clips


def window_logits(clips: np.ndarray, model: SegmentationModel, training: bool = False) -> Tensor:
    """Logits ``(N, C, T, H, W)`` for every frame of every clip."""
    clips = _check_clips(clips, model)
    n, t, h, w, _ = clips.shape
    dtype = model.params["encoder.conv0.weight"].dtype.type
    z = encode_frames(frames_to_tensor(clips, dtype), model, training)
    if model.kind == "single_frame":
        logits = head_2d(z, model)
        return logits.reshape(n, t, *logits.shape[1:]).transpose(0, 2, 1, 3, 4)
    z = z.reshape(n, t, *z.shape[1:]).transpose(0, 2, 1, 3, 4)
    return decode_temporal(z, model, training)


def central_logits(clips: np.ndarray, model: SegmentationModel, training: bool = False) -> Tensor:
    """Logits ``(N, C, H, W)`` of the central frame of each clip.

    The single-frame model only encodes the central frame; the temporal model
    runs on the whole window.
    """
    clips = _check_clips(clips, model)
    c = model.config.center
    if model.kind == "single_frame":
        dtype = model.params["encoder.conv0.weight"].dtype.type
        z = encode_frames(frames_to_tensor(clips[:, c], dtype), model, training)
        return head_2d(z, model)
    return window_logits(clips, model, training)[:, :, c]


def forward(clip: np.ndarray, model: SegmentationModel, training: bool = False) -> np.ndarray:
    """Per-frame class probabilities ``(C, T, H, W)`` for one ``(T, H, W, 3)`` clip."""
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ValidationError(f"clip must be (T, H, W, 3), got {clip.shape}")
    return F.softmax(window_logits(clip, model, training), axis=1).data[0]


def predict_central(clip: np.ndarray, model: SegmentationModel) -> np.ndarray:
    """Class-id mask ``(H, W)`` for the central frame; ties go to the lowest class id."""
    logits = central_logits(clip, model, training=False)
    return argmax_classes(F.softmax(logits, axis=1).data[0])


def argmax_classes(scores: np.ndarray) -> np.ndarray:
    """Argmax over axis 0 with ties broken toward the lowest index."""
    return np.argmax(scores, axis=0).astype(np.uint8)
