"""Training protocol and sliding-window evaluation.

Each epoch draws ``samples_per_epoch`` class-balanced temporal windows,
mirrors whole windows horizontally at random, and minimises cross-entropy on
the central frame only, with Adam under a one-cycle learning-rate schedule.
The best-validation-loss and last-epoch checkpoints are both kept.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import functional as F
from .checkpoint import Checkpoint
from .config import TrainConfig
from .datagen import Dataset, VideoSequence, read_dataset
from .errors import CheckpointError, ConfigurationError, TrainingDivergedError, ValidationError
from .flow import FlowField
from .metrics import MetricsReport, StreamTables
from .model import (
    SegmentationModel,
    argmax_classes,
    central_logits,
    decode_temporal,
    encode_frames,
    frames_to_tensor,
    head_2d,
    window_logits,
)
from .optim import OptimizerState, adam_step, onecycle_lr
from .tensor import Tensor

log = logging.getLogger(__name__)

BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"
LOG_NAME = "loss_log.csv"
LOG_HEADER = ["epoch", "step", "lr", "loss"]


class Window(NamedTuple):
    seq_id: str
    center: int
    target_class: int


def window_start(center: int, temporal_window: int) -> int:
    return center - temporal_window // 2


def valid_centers(num_frames: int, temporal_window: int) -> range:
    """Centres whose whole window fits inside a sequence of ``num_frames``."""
    half = temporal_window // 2
    return range(half, num_frames - temporal_window + half + 1)


# ---------------------------------------------------------------------------
# sampling and augmentation


def sample_balanced_windows(
    sequences: Sequence[VideoSequence],
    n: int,
    seed,
    temporal_window: int,
    num_classes: int,
) -> list[Window]:
    """Draw ``n`` windows, targeting each foreground class ``n // K`` or ``n // K + 1`` times.

    A window targeting class ``c`` is drawn uniformly from the windows whose
    central ground-truth mask contains ``c``. Which classes receive the extra
    windows, the target order and the windows themselves follow ``seed``.
    """
    if n < 1:
        raise ValidationError(f"number of windows must be >= 1, got {n}")
    fg = list(range(1, num_classes))
    candidates: dict[int, list[tuple[str, int]]] = {c: [] for c in fg}
    for seq in sequences:
        if seq.num_frames < temporal_window:
            raise ConfigurationError(
                f"sequence {seq.seq_id} has {seq.num_frames} frames, fewer than the temporal window {temporal_window}"
            )
        for t in valid_centers(seq.num_frames, temporal_window):
            present = np.bincount(seq.masks[t].ravel(), minlength=num_classes)
            for c in fg:
                if present[c]:
                    candidates[c].append((seq.seq_id, t))
    for c in fg:
        if not candidates[c]:
            raise ConfigurationError(f"class {c} never appears in a central frame; cannot balance sampling")

    rng = np.random.default_rng(seed)
    base, extra = divmod(n, len(fg))
    order = rng.permutation(fg)
    counts = {int(c): base + (1 if i < extra else 0) for i, c in enumerate(order)}
    targets = np.concatenate([np.full(counts[c], c) for c in fg])
    targets = rng.permutation(targets)
    picks = [candidates[int(c)][int(rng.integers(len(candidates[int(c)])))] for c in targets]
    return [Window(sid, t, int(c)) for (sid, t), c in zip(picks, targets)]


def augment_hflip(
    clip: np.ndarray,
    masks: np.ndarray,
    flows: Sequence[FlowField] | None,
    p: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, list[FlowField] | None, bool]:
    """Mirror a whole window left-right with probability ``p``.

    ``clip`` is ``(T, H, W, 3)`` and ``masks`` ``(T, H, W)``. Flows are mirrored
    and their horizontal component negated. The decision is returned last.
    """
    flip = bool(rng.random() < p)
    if not flip:
        return clip, masks, (list(flows) if flows is not None else None), False
    return (
        np.ascontiguousarray(clip[:, :, ::-1]),
        np.ascontiguousarray(masks[:, :, ::-1]),
        [f.hflip() for f in flows] if flows is not None else None,
        True,
    )


# ---------------------------------------------------------------------------
# losses


def central_frame_weights(temporal_window: int) -> np.ndarray:
    w = np.zeros(temporal_window)
    w[temporal_window // 2] = 1.0
    return w


class FeatureCache:
    """Frozen-encoder features per (sequence, flipped) pair, computed in eval mode on first use."""

    def __init__(self, model: SegmentationModel, sequences: dict[str, VideoSequence]):
        self.model = model
        self.sequences = sequences
        self._cache: dict[tuple[str, bool], np.ndarray] = {}

    def get(self, seq_id: str, flipped: bool) -> np.ndarray:
        key = (seq_id, flipped)
        if key not in self._cache:
            frames = self.sequences[seq_id].frames
            if flipped:
                frames = frames[:, :, ::-1]
            self._cache[key] = encode_sequence(frames, self.model)
        return self._cache[key]


def encode_sequence(frames: np.ndarray, model: SegmentationModel, chunk: int = 16) -> np.ndarray:
    """Eval-mode encoder features ``(T, F, H', W')`` for every frame."""
    dtype = model.params["encoder.conv0.weight"].dtype.type
    parts = [
        encode_frames(frames_to_tensor(frames[i : i + chunk], dtype), model, training=False).data
        for i in range(0, len(frames), chunk)
    ]
    return np.concatenate(parts)


def window_loss(
    model: SegmentationModel,
    clips: np.ndarray,
    labels: np.ndarray,
    training: bool,
    features: np.ndarray | None = None,
) -> Tensor:
    """Central-frame cross-entropy for a batch of windows.

    ``clips`` is ``(N, T, H, W, 3)`` and ``labels`` ``(N, T, H, W)``. For the
    temporal model the decoder emits logits for every frame and the loss
    weights only the central one. ``features`` (``(N, F, T, H', W')``)
    replaces the encoder when it is frozen.
    """
    t = model.config.temporal_window
    if model.kind == "single_frame":
        logits = central_logits(clips, model, training)
        return F.cross_entropy(logits, labels[:, t // 2])
    if features is not None:
        logits = decode_temporal(Tensor(features), model, training)
    else:
        logits = window_logits(clips, model, training)
    return F.cross_entropy(logits, labels, central_frame_weights(t))


# ---------------------------------------------------------------------------
# training


@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    model: SegmentationModel
    log: list[LogRow]
    val_losses: list[float]
    best_path: Path | None
    last_path: Path | None
    best_val_loss: float = math.inf
    epochs_run: int = 0
    extra: dict = field(default_factory=dict)


def write_loss_log(rows: Sequence[LogRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r.epoch, r.step, repr(float(r.lr)), repr(float(r.loss))])


def read_loss_log(path: str | Path) -> list[LogRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [LogRow(int(r["epoch"]), int(r["step"]), float(r["lr"]), float(r["loss"])) for r in reader]


def _check_compatible(model_cfg, dataset: Dataset, sequences: Sequence[VideoSequence]) -> None:
    if model_cfg.num_classes != dataset.num_classes:
        raise ConfigurationError(
            f"model has {model_cfg.num_classes} classes but dataset {dataset.root} has {dataset.num_classes}"
        )
    for seq in sequences:
        if seq.num_frames < model_cfg.temporal_window:
            raise ConfigurationError(
                f"temporal window {model_cfg.temporal_window} exceeds length {seq.num_frames} of {seq.seq_id}"
            )
        h, w = seq.frames.shape[1:3]
        if h % model_cfg.spatial_downsample or w % model_cfg.spatial_downsample:
            raise ConfigurationError(f"frame size {h}x{w} not divisible by {model_cfg.spatial_downsample}")


def _gather(seqs: dict[str, VideoSequence], windows: Sequence[Window], t: int):
    clips = np.stack([seqs[w.seq_id].frames[window_start(w.center, t) : window_start(w.center, t) + t] for w in windows])
    labels = np.stack([seqs[w.seq_id].masks[window_start(w.center, t) : window_start(w.center, t) + t] for w in windows])
    return clips, labels


def validation_windows(sequences: Sequence[VideoSequence], temporal_window: int, per_sequence: int) -> list[Window]:
    """Evenly spaced central frames per validation sequence (deterministic)."""
    out = []
    for seq in sequences:
        centers = valid_centers(seq.num_frames, temporal_window)
        picks = np.unique(np.linspace(centers.start, centers.stop - 1, per_sequence).round().astype(int))
        out += [Window(seq.seq_id, int(c), -1) for c in picks]
    return out


def validation_loss(
    model: SegmentationModel,
    sequences: Sequence[VideoSequence],
    windows: Sequence[Window],
    cache: FeatureCache | None = None,
    batch: int = 8,
) -> float:
    seqs = {s.seq_id: s for s in sequences}
    t = model.config.temporal_window
    total, count = 0.0, 0
    for i in range(0, len(windows), batch):
        chunk = windows[i : i + batch]
        clips, labels = _gather(seqs, chunk, t)
        feats = None
        if cache is not None:
            feats = np.stack(
                [cache.get(w.seq_id, False)[window_start(w.center, t) : window_start(w.center, t) + t] for w in chunk]
            ).transpose(0, 2, 1, 3, 4)
        loss = window_loss(model, clips, labels, training=False, features=feats)
        total += float(loss.data) * len(chunk)
        count += len(chunk)
    return total / count


def _load_encoder(model: SegmentationModel, path: str | Path) -> None:
    ckpt = Checkpoint.load(path)
    for name in model.encoder_names():
        if name not in ckpt.params or ckpt.params[name].shape != model.params[name].shape:
            raise CheckpointError(f"{path}: encoder parameter {name!r} missing or mis-shaped")
        model.params[name].data[...] = ckpt.params[name]
    for name in model.buffers:
        if name.startswith("encoder."):
            model.buffers[name][...] = ckpt.buffers[name]


def train(
    config: TrainConfig,
    kind: str = "sptcn",
    dataset: Dataset | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run the training protocol; checkpoints and the loss log go to ``config.out`` when set.

    ``stop_after`` ends the run once that many epochs are complete without
    shortening the learning-rate schedule, which leaves a resumable state.
    """
    dataset = dataset if dataset is not None else read_dataset(config.data)
    train_seqs = dataset.split("train")
    val_seqs = dataset.split("val")
    if not train_seqs:
        raise ConfigurationError(f"dataset {dataset.root} has no training sequences")
    _check_compatible(config.model, dataset, train_seqs + val_seqs)
    t = config.model.temporal_window
    if config.samples_per_epoch < dataset.num_classes - 1:
        raise ConfigurationError("samples_per_epoch must be at least the number of foreground classes")

    out = Path(config.out) if config.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = SegmentationModel.create(config.model, kind, seed=config.seed)
    if config.encoder_init:
        _load_encoder(model, config.encoder_init)
    opt = OptimizerState(lr=config.max_lr)
    start_epoch, step, best = 0, 0, math.inf
    rows: list[LogRow] = []
    val_losses: list[float] = []
    if resume is not None:
        ckpt = Checkpoint.load(resume)
        if ckpt.kind != kind or ckpt.config != config.model:
            raise CheckpointError(f"{resume}: checkpoint does not match the requested model")
        model = ckpt.to_model()
        opt = ckpt.optimizer or opt
        start_epoch = int(ckpt.meta["epoch"])
        step = int(ckpt.meta["global_step"])
        best = float(ckpt.meta.get("best_val_loss", math.inf))
        val_losses = list(ckpt.meta.get("val_losses", []))
        if out is not None and (out / LOG_NAME).exists():
            rows = [r for r in read_loss_log(out / LOG_NAME) if r.epoch < start_epoch]

    frozen = config.freeze_encoder and kind == "sptcn"
    trainable = {n: p for n, p in model.params.items() if not (frozen and n.startswith("encoder."))}
    seqs = {s.seq_id: s for s in train_seqs}
    cache = FeatureCache(model, {**seqs, **{s.seq_id: s for s in val_seqs}}) if frozen else None
    val_windows = validation_windows(val_seqs, t, config.val_windows_per_sequence)
    total = config.total_steps
    best_path = out / BEST_NAME if out is not None else None
    last_path = out / LAST_NAME if out is not None else None

    end_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(start_epoch, end_epoch):
        windows = sample_balanced_windows(train_seqs, config.samples_per_epoch, [config.seed, epoch], t, dataset.num_classes)
        aug_rng = np.random.default_rng([config.seed, epoch, 1])
        for b in range(config.steps_per_epoch):
            chunk = windows[b * config.batch_size : (b + 1) * config.batch_size]
            clips, labels = _gather(seqs, chunk, t)
            flips = []
            for i in range(len(chunk)):
                clips[i], labels[i], _, flipped = augment_hflip(clips[i], labels[i], None, config.hflip_p, aug_rng)
                flips.append(flipped)
            feats = None
            if cache is not None:
                feats = np.stack(
                    [
                        cache.get(w.seq_id, fl)[window_start(w.center, t) : window_start(w.center, t) + t]
                        for w, fl in zip(chunk, flips)
                    ]
                ).transpose(0, 2, 1, 3, 4)
            lr = onecycle_lr(step, total, config.max_lr)
            loss = window_loss(model, clips, labels, training=True, features=feats)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, step, lr, value)
            loss.backward()
            adam_step(trainable, {n: p.grad for n, p in trainable.items()}, opt, lr)
            model.zero_grad()
            rows.append(LogRow(epoch, step, lr, value))
            step += 1

        meta = {"epoch": epoch + 1, "global_step": step, "train": config.to_dict()}
        if val_windows:
            vl = validation_loss(model, val_seqs, val_windows, cache)
            val_losses.append(vl)
            log.info("epoch %d: train loss %.4f, val loss %.4f", epoch, np.mean([r.loss for r in rows if r.epoch == epoch]), vl)
            if vl < best:
                best = vl
                if best_path is not None:
                    Checkpoint.from_model(model, None, {**meta, "best_val_loss": best, "val_losses": val_losses}).save(best_path)
        meta.update(best_val_loss=best, val_losses=val_losses)
        if last_path is not None:
            Checkpoint.from_model(model, opt, meta).save(last_path)
            write_loss_log(rows, out / LOG_NAME)

    if not val_windows:
        log.warning("no validation split; best checkpoint not written")
        best_path = None
    return TrainResult(model, rows, val_losses, best_path, last_path, best, max(0, end_epoch - start_epoch))


def train_single_frame_baseline(config: TrainConfig, dataset: Dataset | None = None, resume=None) -> TrainResult:
    return train(config, kind="single_frame", dataset=dataset, resume=resume)


# ---------------------------------------------------------------------------
# evaluation


def predict_sequence(model: SegmentationModel, frames: np.ndarray, batch: int = 8) -> tuple[list[int], np.ndarray]:
    """Central-frame predictions for every stride-1 window; frames too close to either end are skipped."""
    t = model.config.temporal_window
    centers = list(valid_centers(len(frames), t))
    preds = np.empty((len(centers),) + frames.shape[1:3], dtype=np.uint8)
    if model.kind == "single_frame":
        for i in range(0, len(centers), batch):
            idx = centers[i : i + batch]
            dtype = model.params["encoder.conv0.weight"].dtype.type
            z = encode_frames(frames_to_tensor(frames[idx], dtype), model, training=False)
            probs = F.softmax(head_2d(z, model), axis=1).data
            for j in range(len(idx)):
                preds[i + j] = argmax_classes(probs[j])
        return centers, preds
    feats = encode_sequence(frames, model)
    for i in range(0, len(centers), batch):
        idx = centers[i : i + batch]
        z = np.stack([feats[window_start(c, t) : window_start(c, t) + t] for c in idx]).transpose(0, 2, 1, 3, 4)
        probs = F.softmax(decode_temporal(Tensor(z), model, training=False)[:, :, t // 2], axis=1).data
        for j in range(len(idx)):
            preds[i + j] = argmax_classes(probs[j])
    return centers, preds


def evaluate(
    model: SegmentationModel | Checkpoint | str | Path | None,
    dataset: Dataset,
    split: str = "test",
    oracle: bool = False,
    temporal_window: int | None = None,
    threads: int = 1,
) -> MetricsReport:
    """Slide a stride-1 window over every sequence of ``split`` and score the central-frame predictions.

    With ``oracle=True`` the ground-truth masks stand in for predictions (no
    model needed; pass ``temporal_window`` to pick which frames are scored).
    """
    if isinstance(model, (str, Path)):
        model = Checkpoint.load(model)
    if isinstance(model, Checkpoint):
        model = model.to_model()
    sequences = dataset.split(split)
    if not sequences:
        raise ValidationError(f"split {split!r} of {dataset.root} is empty")
    if model is not None:
        _check_compatible(model.config, dataset, sequences)
        t = model.config.temporal_window
    elif oracle:
        t = temporal_window or 1
    else:
        raise ValidationError("evaluate needs a model unless oracle=True")

    def run(seq: VideoSequence):
        if oracle:
            centers = list(valid_centers(seq.num_frames, t))
            preds = seq.masks[centers]
        else:
            centers, preds = predict_sequence(model, seq.frames)
        return seq, centers, preds

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, sequences))
    else:
        results = [run(s) for s in sequences]

    tables = StreamTables(dataset.num_classes)
    for seq, centers, preds in results:
        flows = None
        if seq.backward_flows:
            flows = [seq.backward_flows[c - 1] for c in centers[1:]]
        else:
            log.warning("sequence %s has no flows; TC omitted", seq.seq_id)
        tables.add_stream(list(preds), list(seq.masks[centers]), flows)
    return tables.report(dataset.class_names)
