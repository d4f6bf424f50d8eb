"""Synthetic video segmentation benchmark with exact ground-truth flow.

Each sequence shows class-coloured discs and rectangles translating over a
static textured background. Vertical opaque bars sweep across the frame and
switch on and off with a duty cycle; they hide shapes in both the image and
the label mask. With probability ``ambiguity`` a shape is drawn in a neutral
colour in a given frame, so its class can only be recovered from
neighbouring frames.

Shape centres are rounded to whole pixels before rasterisation, so every
shape translates rigidly and the backward flow (frame ``t`` to ``t - 1``) is
exact. Pixels whose source in the previous frame shows a different object
(occlusion, disocclusion, leaving the frame) are flagged invalid.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import StsegError, ValidationError
from .flow import FlowField, read_flo, write_flo

SHAPE_KINDS = ("disc", "rectangle")
BACKGROUND_LEVEL = 80.0
NEUTRAL_COLOR = (150.0, 150.0, 150.0)
OCCLUDER_COLOR = (215.0, 205.0, 190.0)
_PALETTE = [
    (200, 70, 70),
    (70, 190, 80),
    (80, 100, 210),
    (210, 190, 60),
    (190, 80, 200),
    (60, 190, 200),
    (230, 130, 50),
    (120, 60, 30),
]


@dataclass
class ShapeSpec:
    class_id: int
    kind: str
    position: tuple[float, float]
    velocity: tuple[float, float]
    size: tuple[float, float]


@dataclass
class OccluderSpec:
    """Vertical bar of ``width`` px whose left edge starts at ``x`` and moves ``velocity`` px/frame.

    The bar wraps around the frame and is shown on the first
    ``round(duty_cycle * period)`` frames of every ``period``.
    """

    x: float
    width: int
    velocity: float = 0.0
    duty_cycle: float = 1.0
    period: int = 10
    phase: int = 0


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    num_frames: int = 30
    num_classes: int = 4
    shapes: list[ShapeSpec] = field(default_factory=list)
    occluders: list[OccluderSpec] = field(default_factory=list)
    noise_sigma: float = 0.0
    ambiguity: float = 0.0
    fps: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.shapes = [s if isinstance(s, ShapeSpec) else ShapeSpec(**s) for s in self.shapes]
        self.occluders = [o if isinstance(o, OccluderSpec) else OccluderSpec(**o) for o in self.occluders]
        for s in self.shapes:
            s.position, s.velocity, s.size = tuple(s.position), tuple(s.velocity), tuple(s.size)

    def validate(self) -> None:
        if self.width < 1 or self.height < 1 or self.num_frames < 1:
            raise ValidationError(f"scene dimensions must be positive, got {self.width}x{self.height}x{self.num_frames}")
        if self.num_classes < 2 or self.num_classes > 256:
            raise ValidationError(f"num_classes must lie in [2, 256], got {self.num_classes}")
        if self.noise_sigma < 0 or not 0 <= self.ambiguity <= 1:
            raise ValidationError("noise_sigma must be >= 0 and ambiguity in [0, 1]")
        for s in self.shapes:
            if not 1 <= s.class_id < self.num_classes:
                raise ValidationError(f"shape class id {s.class_id} outside [1, {self.num_classes})")
            if s.kind not in SHAPE_KINDS:
                raise ValidationError(f"unknown shape kind {s.kind!r}")
            rx, ry = _extent(s)
            if min(s.size) <= 0 or 2 * rx + 1 > self.width or 2 * ry + 1 > self.height:
                raise ValidationError(f"shape of size {s.size} does not fit a {self.width}x{self.height} frame")
        for o in self.occluders:
            if o.width < 1 or o.period < 1 or not 0 <= o.duty_cycle <= 1:
                raise ValidationError(f"invalid occluder {o}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneSpec":
        return cls(**d)


@dataclass
class VideoSequence:
    frames: np.ndarray  # (T, H, W, 3) uint8
    masks: np.ndarray  # (T, H, W) uint8
    backward_flows: list[FlowField]
    fps: float = 10.0
    seq_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# rendering


def _extent(s: ShapeSpec) -> tuple[int, int]:
    return int(math.floor(s.size[0])), int(math.floor(s.size[1]))


def _shape_centers(spec: SceneSpec, s: ShapeSpec) -> np.ndarray:
    t = np.arange(spec.num_frames)
    rx, ry = _extent(s)
    cx = np.clip(np.round(s.position[0] + s.velocity[0] * t), rx, spec.width - 1 - rx)
    cy = np.clip(np.round(s.position[1] + s.velocity[1] * t), ry, spec.height - 1 - ry)
    return np.stack([cx, cy], axis=1).astype(np.int64)


def _occluder_left(spec: SceneSpec, o: OccluderSpec) -> np.ndarray:
    t = np.arange(spec.num_frames)
    span = spec.width + o.width
    return (np.round(o.x + o.velocity * t).astype(np.int64) + o.width) % span - o.width


def _occluder_on(o: OccluderSpec, t: int) -> bool:
    return (t + o.phase) % o.period < int(round(o.duty_cycle * o.period))


def _shape_footprint(s: ShapeSpec, cx: int, cy: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if s.kind == "disc":
        return (dx / s.size[0]) ** 2 + (dy / s.size[1]) ** 2 <= 1.0
    return (np.abs(dx) <= s.size[0]) & (np.abs(dy) <= s.size[1])


def _entity_maps(spec: SceneSpec, with_occluders: bool = True) -> np.ndarray:
    """Index of the visible object per pixel: -1 background, i for shape i, len(shapes)+j for occluder j."""
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    centers = [_shape_centers(spec, s) for s in spec.shapes]
    lefts = [_occluder_left(spec, o) for o in spec.occluders]
    ent = np.full((spec.num_frames, spec.height, spec.width), -1, dtype=np.int32)
    for t in range(spec.num_frames):
        e = ent[t]
        for i, s in enumerate(spec.shapes):
            cx, cy = centers[i][t]
            e[_shape_footprint(s, cx, cy, yy, xx)] = i
        if with_occluders:
            for j, o in enumerate(spec.occluders):
                if _occluder_on(o, t):
                    x0 = lefts[j][t]
                    e[:, max(x0, 0) : max(x0 + o.width, 0)] = len(spec.shapes) + j
    return ent


def class_color(class_id: int) -> tuple[float, float, float]:
    base = _PALETTE[(class_id - 1) % len(_PALETTE)]
    shift = 25 * ((class_id - 1) // len(_PALETTE))
    return tuple(float((c + shift) % 256) for c in base)


def _background(spec: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1])
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    fx, fy = rng.uniform(1.0, 3.0, size=2)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    arg = 2 * np.pi * (fx * xx / spec.width + fy * yy / spec.height)
    return np.stack([BACKGROUND_LEVEL + 20 * np.sin(arg + p) for p in phases], axis=-1)


def generate_sequence(spec: SceneSpec, seq_id: str = "") -> VideoSequence:
    """Render frames, label masks and exact backward flows for ``spec``."""
    spec.validate()
    n_shapes = len(spec.shapes)
    ent = _entity_maps(spec)
    labels = np.zeros(n_shapes + len(spec.occluders) + 1, dtype=np.uint8)
    labels[:n_shapes] = [s.class_id for s in spec.shapes]
    masks = labels[ent]

    rng = np.random.default_rng([spec.seed, 2])
    background = _background(spec)
    colors = [np.array(class_color(s.class_id)) for s in spec.shapes]
    frames = np.empty((spec.num_frames, spec.height, spec.width, 3), dtype=np.uint8)
    for t in range(spec.num_frames):
        img = background.copy()
        ambiguous = rng.random(n_shapes) < spec.ambiguity
        for i in range(n_shapes):
            img[ent[t] == i] = NEUTRAL_COLOR if ambiguous[i] else colors[i]
        img[ent[t] >= n_shapes] = OCCLUDER_COLOR
        noise = rng.normal(0.0, spec.noise_sigma, size=img.shape) if spec.noise_sigma > 0 else 0.0
        frames[t] = np.clip(np.round(img + noise), 0, 255).astype(np.uint8)

    flows = [_backward_flow(spec, ent, t) for t in range(1, spec.num_frames)]
    return VideoSequence(frames, masks, flows, spec.fps, seq_id)


def _backward_flow(spec: SceneSpec, ent: np.ndarray, t: int) -> FlowField:
    n_shapes = len(spec.shapes)
    disp = np.zeros((n_shapes + len(spec.occluders) + 1, 2), dtype=np.int64)
    for i, s in enumerate(spec.shapes):
        c = _shape_centers(spec, s)
        disp[i] = c[t - 1] - c[t]
    for j, o in enumerate(spec.occluders):
        left = _occluder_left(spec, o)
        disp[n_shapes + j, 0] = left[t - 1] - left[t]
    e = ent[t]
    d = disp[e]  # background (-1) picks the trailing zero row
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    sx, sy = xx + d[..., 0], yy + d[..., 1]
    inside = (sx >= 0) & (sx < spec.width) & (sy >= 0) & (sy < spec.height)
    src = np.full_like(e, -2)
    src[inside] = ent[t - 1][sy[inside], sx[inside]]
    valid = inside & (src == e)
    uv = np.where(valid[..., None], d, 0).astype(np.float32)
    return FlowField(uv, valid)


def occlusion_rate(seq: VideoSequence, spec: SceneSpec) -> np.ndarray:
    """Per-frame fraction of shape pixels hidden by occluders."""
    clear = _entity_maps(spec, with_occluders=False)
    shape_px = clear >= 0
    hidden = shape_px & (seq.masks == 0)
    total = shape_px.sum(axis=(1, 2))
    return np.where(total > 0, hidden.sum(axis=(1, 2)) / np.maximum(total, 1), 0.0)


# ---------------------------------------------------------------------------
# benchmark generation


def random_scene(
    seed: int | Sequence[int],
    width: int = 64,
    height: int = 64,
    num_frames: int = 30,
    num_classes: int = 4,
    noise_sigma: float = 12.0,
    ambiguity: float = 0.3,
    occluder_duty: float = 0.5,
    max_speed: float = 1.5,
    fps: float = 10.0,
) -> SceneSpec:
    """One shape per foreground class plus one sweeping occluder bar, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = []
    for c in rng.permutation(np.arange(1, num_classes)):
        kind = SHAPE_KINDS[int(rng.integers(2))]
        r = float(rng.uniform(0.09, 0.16) * min(width, height))
        aspect = float(rng.uniform(0.7, 1.3))
        size = (r, r * aspect) if kind == "disc" else (0.8 * r, 0.8 * r * aspect)
        rx, ry = int(size[0]), int(size[1])
        pos = (float(rng.uniform(rx, width - 1 - rx)), float(rng.uniform(ry, height - 1 - ry)))
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.3, 1.0) * max_speed
        vel = (float(speed * np.cos(angle)), float(speed * np.sin(angle)))
        shapes.append(ShapeSpec(int(c), kind, pos, vel, size))
    occluders = []
    if occluder_duty > 0:
        occluders.append(
            OccluderSpec(
                x=float(rng.uniform(0, width)),
                width=int(rng.integers(width // 8, width // 4 + 1)),
                velocity=float(rng.choice([-1, 1]) * rng.uniform(1.0, 2.5)),
                duty_cycle=occluder_duty,
                period=int(rng.integers(6, 13)),
                phase=int(rng.integers(0, 12)),
            )
        )
    seed_int = int(np.random.SeedSequence(seed).generate_state(1)[0])
    return SceneSpec(width, height, num_frames, num_classes, shapes, occluders, noise_sigma, ambiguity, fps, seed_int)


def benchmark_specs(cfg: dict[str, Any]) -> list[tuple[str, str, SceneSpec]]:
    """``(seq_id, split, spec)`` for every sequence of the benchmark described by a dataset config section."""
    splits = ["train"] * cfg["num_train"] + ["val"] * cfg["num_val"] + ["test"] * cfg["num_test"]
    out = []
    for i, split in enumerate(splits):
        spec = random_scene(
            [int(cfg["seed"]), i],
            width=cfg["width"],
            height=cfg["height"],
            num_frames=cfg["num_frames"],
            num_classes=cfg["num_classes"],
            noise_sigma=cfg["noise_sigma"],
            ambiguity=cfg["ambiguity"],
            occluder_duty=cfg["occluder_duty"],
            max_speed=cfg["max_speed"],
            fps=cfg["fps"],
        )
        out.append((f"seq_{i:04d}", split, spec))
    return out


def generate_many(specs: Iterable[tuple[str, SceneSpec]], threads: int = 1) -> list[VideoSequence]:
    items = list(specs)
    if threads <= 1:
        return [generate_sequence(spec, sid) for sid, spec in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda item: generate_sequence(item[1], item[0]), items))


def default_class_names(num_classes: int) -> list[str]:
    return ["background"] + [f"class_{c}" for c in range(1, num_classes)]


# ---------------------------------------------------------------------------
# netpbm I/O


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def _read_netpbm(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise ValidationError(f"{path}: expected {magic!r} image, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValidationError(f"{path}: only maxval 255 is supported, found {maxval}")
    data = np.frombuffer(raw[pos : pos + w * h * channels], dtype=np.uint8)
    if data.size != w * h * channels:
        raise ValidationError(f"{path}: truncated pixel data")
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


# ---------------------------------------------------------------------------
# dataset directories


def write_sequence(seq: VideoSequence, directory: str | Path, spec: SceneSpec | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(seq.num_frames):
        write_ppm(d / f"frame_{t:04d}.ppm", seq.frames[t])
        write_pgm(d / f"mask_{t:04d}.pgm", seq.masks[t])
    for t, flow in enumerate(seq.backward_flows, start=1):
        write_flo(d / f"flow_{t:04d}.flo", flow)
    if spec is not None:
        (d / "scene.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")


def write_dataset(
    sequences: Sequence[VideoSequence],
    directory: str | Path,
    splits: Sequence[str],
    class_names: Sequence[str],
    specs: Sequence[SceneSpec] | None = None,
    threads: int = 1,
) -> dict[str, Any]:
    """Write every sequence plus ``manifest.json`` under ``directory`` and return the manifest.

    ``flow_%04d.flo`` holds the flow from frame ``t`` back to frame ``t - 1``
    (so numbering starts at 1).
    """
    root = Path(directory)
    if len(splits) != len(sequences):
        raise ValidationError(f"{len(splits)} split labels for {len(sequences)} sequences")
    try:
        root.mkdir(parents=True, exist_ok=True)
        jobs = [(seq, root / seq.seq_id, specs[i] if specs else None) for i, seq in enumerate(sequences)]
        if threads <= 1:
            for job in jobs:
                write_sequence(*job)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(lambda job: write_sequence(*job), jobs))
        manifest = make_manifest(sequences, splits, class_names)
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"writing dataset under {root}: {exc}") from exc
    return manifest


def make_manifest(sequences: Sequence[VideoSequence], splits: Sequence[str], class_names: Sequence[str]) -> dict[str, Any]:
    if len(splits) != len(sequences):
        raise ValidationError(f"{len(splits)} split labels for {len(sequences)} sequences")
    fps = sorted({float(s.fps) for s in sequences})
    return {
        "format": "stseg-dataset",
        "version": 1,
        "fps": fps[0] if len(fps) == 1 else fps,
        "class_names": list(class_names),
        "num_classes": len(class_names),
        "sequences": [
            {
                "id": s.seq_id,
                "num_frames": s.num_frames,
                "width": int(s.frames.shape[2]),
                "height": int(s.frames.shape[1]),
                "fps": float(s.fps),
                "split": split,
            }
            for s, split in zip(sequences, splits)
        ],
        "splits": {name: [s.seq_id for s, sp in zip(sequences, splits) if sp == name] for name in sorted(set(splits))},
    }


class DatasetIOError(StsegError, OSError):
    pass


@dataclass
class Dataset:
    root: Path
    manifest: dict[str, Any]
    sequences: dict[str, VideoSequence]

    @property
    def class_names(self) -> list[str]:
        return list(self.manifest["class_names"])

    @property
    def num_classes(self) -> int:
        return len(self.manifest["class_names"])

    @classmethod
    def from_sequences(
        cls, sequences: Sequence[VideoSequence], splits: Sequence[str], class_names: Sequence[str]
    ) -> "Dataset":
        """In-memory dataset with the same manifest :func:`write_dataset` would produce."""
        return cls(Path("<memory>"), make_manifest(sequences, splits, class_names), {s.seq_id: s for s in sequences})

    def split(self, name: str) -> list[VideoSequence]:
        return [self.sequences[sid] for sid in self.manifest["splits"].get(name, [])]


def read_sequence(directory: str | Path, num_frames: int, fps: float = 10.0, with_flows: bool = True) -> VideoSequence:
    d = Path(directory)
    frames = np.stack([read_ppm(d / f"frame_{t:04d}.ppm") for t in range(num_frames)])
    masks = np.stack([read_pgm(d / f"mask_{t:04d}.pgm") for t in range(num_frames)])
    flows: list[FlowField] = []
    if with_flows and all((d / f"flow_{t:04d}.flo").exists() for t in range(1, num_frames)):
        flows = [read_flo(d / f"flow_{t:04d}.flo") for t in range(1, num_frames)]
    return VideoSequence(frames, masks, flows, fps, d.name)


def read_dataset(directory: str | Path, splits: Iterable[str] | None = None) -> Dataset:
    """Load the manifest and the sequences of the requested splits (all by default)."""
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        wanted = set(splits) if splits is not None else None
        seqs = {}
        for entry in manifest["sequences"]:
            if wanted is not None and entry["split"] not in wanted:
                continue
            seqs[entry["id"]] = read_sequence(root / entry["id"], entry["num_frames"], entry.get("fps", 10.0))
    except OSError as exc:
        raise DatasetIOError(f"reading dataset under {root}: {exc}") from exc
    return Dataset(root, manifest, seqs)


def load_scene(directory: str | Path) -> SceneSpec:
    return SceneSpec.from_dict(json.loads((Path(directory) / "scene.json").read_text(encoding="utf-8")))


def benchmark_dataset(cfg: dict[str, Any], threads: int = 1) -> Dataset:
    """Generate the benchmark described by a dataset config section, in memory."""
    items = benchmark_specs(cfg)
    seqs = generate_many([(sid, spec) for sid, _, spec in items], threads=threads)
    return Dataset.from_sequences(seqs, [split for _, split, _ in items], default_class_names(cfg["num_classes"]))
