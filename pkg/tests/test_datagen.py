import json

import numpy as np
import pytest

from conftest import small_dataset_cfg
from oracles import parse_flo
from stseg.datagen import (
    Dataset,
    OccluderSpec,
    SceneSpec,
    ShapeSpec,
    benchmark_specs,
    generate_many,
    generate_sequence,
    load_scene,
    occlusion_rate,
    random_scene,
    read_dataset,
    read_pgm,
    read_ppm,
    write_dataset,
    write_pgm,
    write_ppm,
)
from stseg.errors import ValidationError
from stseg.flow import INVALID_FLOW, FlowField, read_flo, write_flo
from stseg.metrics import warp_mask


def disc_scene(velocity=(1.0, 0.0), frames=10, **kw):
    return SceneSpec(
        width=48, height=32, num_frames=frames, num_classes=2,
        shapes=[ShapeSpec(1, "disc", (12.0, 16.0), velocity, (5.0, 5.0))], **kw,
    )


def test_disc_centroid_tracks_velocity():
    seq = generate_sequence(disc_scene())
    xs = [np.nonzero(m == 1)[1].mean() for m in seq.masks]
    steps = np.diff(xs)
    assert np.all(np.abs(steps - 1.0) <= 0.1)


def test_static_scene_frames_identical_flows_zero():
    seq = generate_sequence(disc_scene(velocity=(0.0, 0.0)))
    for t in range(1, seq.num_frames):
        assert seq.frames[t].tobytes() == seq.frames[0].tobytes()
        assert np.all(seq.backward_flows[t - 1].uv == 0)
        assert np.all(seq.backward_flows[t - 1].valid)


def test_generation_is_deterministic():
    spec = random_scene(7)
    a, b = generate_sequence(spec), generate_sequence(spec)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()
    assert all(x.uv.tobytes() == y.uv.tobytes() for x, y in zip(a.backward_flows, b.backward_flows))


def test_parallel_generation_matches_serial():
    items = [(sid, spec) for sid, _, spec in benchmark_specs(small_dataset_cfg())]
    serial = generate_many(items, threads=1)
    parallel = generate_many(items, threads=4)
    for a, b in zip(serial, parallel):
        assert a.frames.tobytes() == b.frames.tobytes() and a.masks.tobytes() == b.masks.tobytes()


def test_masks_contain_only_valid_class_ids():
    cfg = small_dataset_cfg(num_classes=6)
    for _, _, spec in benchmark_specs(cfg)[:3]:
        seq = generate_sequence(spec)
        assert set(np.unique(seq.masks)) <= set(range(6))


def test_z_order_later_shape_wins():
    spec = SceneSpec(
        width=32, height=32, num_frames=1, num_classes=3,
        shapes=[ShapeSpec(1, "rectangle", (16.0, 16.0), (0, 0), (6, 6)), ShapeSpec(2, "disc", (16.0, 16.0), (0, 0), (3, 3))],
    )
    seq = generate_sequence(spec)
    assert seq.masks[0, 16, 16] == 2
    assert seq.masks[0, 16, 21] == 1


def test_invalid_spec_rejected():
    with pytest.raises(ValidationError):
        generate_sequence(SceneSpec(width=16, height=16, num_classes=2, shapes=[ShapeSpec(2, "disc", (8, 8), (0, 0), (2, 2))]))
    with pytest.raises(ValidationError):
        generate_sequence(SceneSpec(width=16, height=16, num_classes=2, shapes=[ShapeSpec(1, "star", (8, 8), (0, 0), (2, 2))]))


def test_occluder_hides_shape_in_frame_and_mask():
    spec = disc_scene(velocity=(0.0, 0.0), frames=2, occluders=[OccluderSpec(x=0, width=48, duty_cycle=1.0)])
    seq = generate_sequence(spec)
    assert np.all(seq.masks == 0)
    np.testing.assert_array_equal(occlusion_rate(seq, spec), [1.0, 1.0])


def test_no_occluders_zero_rate():
    spec = disc_scene()
    assert np.all(occlusion_rate(generate_sequence(spec), spec) == 0)


def test_occlusion_rate_duty_half_matches_coverage():
    # a bar of width W/4 shown half the time sweeps over a slowly moving disc;
    # expected hidden fraction is duty * bar_width / width
    width, bar = 64, 16
    spec = SceneSpec(
        width=width, height=32, num_frames=400, num_classes=2,
        shapes=[ShapeSpec(1, "disc", (32.0, 16.0), (0.0, 0.0), (5.0, 5.0))],
        occluders=[OccluderSpec(x=0.0, width=bar, velocity=1.3, duty_cycle=0.5, period=10)],
    )
    rate = occlusion_rate(generate_sequence(spec), spec).mean()
    assert abs(rate - 0.5 * bar / width) <= 0.1


def test_flow_consistency_noise_free_rigid_scenes():
    for seed in range(5):
        spec = random_scene(seed, noise_sigma=0.0, ambiguity=0.0)
        seq = generate_sequence(spec)
        for t in range(1, seq.num_frames):
            warped, valid = warp_mask(seq.masks[t - 1], seq.backward_flows[t - 1])
            assert np.count_nonzero(warped[valid] != seq.masks[t][valid]) == 0


def test_label_conservation_without_occlusion():
    # centres are whole pixels, so an unobstructed shape keeps its exact pixel count
    for seed in range(4):
        spec = random_scene(seed, occluder_duty=0.0, num_frames=40)
        for shape in spec.shapes:
            alone = SceneSpec(spec.width, spec.height, spec.num_frames, spec.num_classes, [shape])
            counts = {int((m == shape.class_id).sum()) for m in generate_sequence(alone).masks}
            assert len(counts) == 1


def test_ppm_pgm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    mask = rng.integers(0, 4, size=(5, 7)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    write_pgm(tmp_path / "a.pgm", mask)
    assert read_ppm(tmp_path / "a.ppm").tobytes() == img.tobytes()
    assert read_pgm(tmp_path / "a.pgm").tobytes() == mask.tobytes()
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_flo_roundtrip_and_independent_parser(tmp_path, rng):
    uv = rng.normal(size=(4, 6, 2)).astype(np.float32)
    valid = rng.random((4, 6)) > 0.3
    flow = FlowField(np.where(valid[..., None], uv, 0), valid)
    write_flo(tmp_path / "f.flo", flow)
    magic, w, h, pairs = parse_flo((tmp_path / "f.flo").read_bytes())
    assert magic == 202021.25 and (w, h) == (6, 4)
    for i, (u, v) in enumerate(pairs):
        y, x = divmod(i, w)
        if valid[y, x]:
            assert (u, v) == (float(flow.uv[y, x, 0]), float(flow.uv[y, x, 1]))
        else:
            assert (u, v) == (float(INVALID_FLOW), float(INVALID_FLOW))
    back = read_flo(tmp_path / "f.flo")
    assert back.uv.tobytes() == flow.uv.tobytes()
    np.testing.assert_array_equal(back.valid, valid)


def test_read_flo_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.flo").write_bytes(b"\x00" * 20)
    with pytest.raises(ValidationError):
        read_flo(tmp_path / "bad.flo")


def test_write_read_dataset_roundtrip(tmp_path):
    cfg = small_dataset_cfg()
    items = benchmark_specs(cfg)
    seqs = generate_many([(sid, spec) for sid, _, spec in items])
    splits = [sp for _, sp, _ in items]
    manifest = write_dataset(seqs, tmp_path / "ds", splits, ["background", "a", "b", "c"], specs=[s for _, _, s in items])
    assert len(manifest["sequences"]) == len(seqs)
    on_disk = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert on_disk == manifest
    assert set(on_disk) >= {"sequences", "fps", "class_names", "splits"}
    ds = read_dataset(tmp_path / "ds")
    for s in seqs:
        r = ds.sequences[s.seq_id]
        assert r.frames.tobytes() == s.frames.tobytes()
        assert r.masks.tobytes() == s.masks.tobytes()
        for a, b in zip(r.backward_flows, s.backward_flows):
            assert a.uv.tobytes() == b.uv.tobytes()
            np.testing.assert_array_equal(a.valid, b.valid)
    assert load_scene(tmp_path / "ds" / seqs[0].seq_id) == items[0][2]
    assert [x.seq_id for x in ds.split("test")] == [sid for sid, sp, _ in items if sp == "test"]


def test_in_memory_dataset_manifest_matches_written(tmp_path, small_dataset):
    seqs = list(small_dataset.sequences.values())
    splits = [e["split"] for e in small_dataset.manifest["sequences"]]
    written = write_dataset(seqs, tmp_path / "d", splits, small_dataset.class_names)
    assert written == small_dataset.manifest
    assert isinstance(small_dataset, Dataset)


def test_write_dataset_io_error_has_path(tmp_path, small_dataset):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    seqs = list(small_dataset.sequences.values())[:1]
    with pytest.raises(OSError, match="file"):
        write_dataset(seqs, blocker / "sub", ["train"], small_dataset.class_names)


def test_benchmark_default_split_sizes():
    from stseg.config import DEFAULTS

    items = benchmark_specs(DEFAULTS["dataset"])
    splits = [sp for _, sp, _ in items]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (40, 5, 10)
