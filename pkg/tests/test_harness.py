import numpy as np
import pytest

from quadtrack.harness import seqio, synth
from quadtrack.harness.synth import (
    ObjectSpec,
    OcclusionWindow,
    SequenceSpec,
    generate_sequence,
    place_objects,
    rasterize_box,
    rasterize_ellipse,
    standard_sequence,
)


def _single_spec(**overrides):
    base = dict(
        height=64,
        width=64,
        num_frames=5,
        objects=[
            ObjectSpec(
                shape="rectangle",
                size=(12.0, 8.0),
                color=synth.PALETTE[0],
                start=(32.0, 32.0),
                velocity=(2.0, -1.0),
            )
        ],
        seed=7,
        jitter=0.0,
    )
    base.update(overrides)
    return SequenceSpec(**base)


# ---------------------------------------------------------------- rasterizers


def test_rasterize_box_pixel_center_oracle():
    # box spans x in [1, 3]: only centers 1.5 and 2.5 fall inside
    mask = rasterize_box((2.0, 1.0, 2.0, 2.0), 2, 4)
    assert np.array_equal(mask, np.array([[0, 1, 1, 0], [0, 1, 1, 0]], dtype=np.uint8))


def test_rasterize_ellipse_clips_corners():
    mask = rasterize_ellipse((2.0, 2.0, 4.0, 4.0), 4, 4)
    expected = np.array(
        [[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]], dtype=np.uint8
    )
    assert np.array_equal(mask, expected)


# ---------------------------------------------------------------- motion model


def test_generate_sequence_deterministic():
    a = generate_sequence(_single_spec(jitter=0.2))
    b = generate_sequence(_single_spec(jitter=0.2))
    assert all(np.array_equal(fa, fb) for fa, fb in zip(a.frames, b.frames))
    assert a.boxes == b.boxes
    for t in a.masks:
        for (ia, ma), (ib, mb) in zip(a.masks[t], b.masks[t]):
            assert ia == ib and np.array_equal(ma, mb)


def test_zero_jitter_motion_is_linear_until_bounce():
    seq = generate_sequence(_single_spec(num_frames=4))
    for t in range(4):
        (_, (cx, cy, _, _)), = seq.boxes[t + 1]
        assert abs(cx - (32.0 + 2.0 * t)) < 1e-12
        assert abs(cy - (32.0 - 1.0 * t)) < 1e-12


def test_jitter_bounds_per_frame_displacement():
    spec = _single_spec(num_frames=6, jitter=0.3, objects=[
        ObjectSpec(
            shape="ellipse",
            size=(10.0, 10.0),
            color=synth.PALETTE[1],
            start=(32.0, 32.0),
            velocity=(0.5, 0.5),
        )
    ])
    seq = generate_sequence(spec)
    centers = [np.array(seq.boxes[t][0][1][:2]) for t in range(1, 7)]
    for prev, cur in zip(centers, centers[1:]):
        step = cur - prev
        assert np.all(np.abs(step - 0.5) <= 0.3 + 1e-12)


def test_boxes_stay_fully_inside_frame_across_bounces():
    seq = standard_sequence(seed=3, num_objects=3, num_frames=80, height=96, width=96)
    for pairs in seq.boxes.values():
        for _, (cx, cy, w, h) in pairs:
            assert cx - w / 2 >= -1e-9 and cx + w / 2 <= 96 + 1e-9
            assert cy - h / 2 >= -1e-9 and cy + h / 2 <= 96 + 1e-9


def test_bounce_reflects_and_flips_sign():
    assert synth._bounce(-3.0, 5.0, 64.0) == (13.0, -1)
    assert synth._bounce(62.0, 5.0, 64.0) == (56.0, -1)
    assert synth._bounce(30.0, 5.0, 64.0) == (30.0, 1)


def test_occlusion_hides_object_everywhere():
    spec = _single_spec(
        num_frames=6,
        objects=[
            ObjectSpec(
                shape="rectangle",
                size=(10.0, 10.0),
                color=synth.PALETTE[0],
                start=(20.0, 20.0),
                velocity=(0.5, 0.0),
            ),
            ObjectSpec(
                shape="ellipse",
                size=(10.0, 10.0),
                color=synth.PALETTE[1],
                start=(46.0, 46.0),
                velocity=(-0.5, 0.0),
            ),
        ],
        occlusions=[OcclusionWindow(obj=0, start=2, end=4)],
    )
    seq = generate_sequence(spec)
    hidden_frames = {3, 4}  # 0-based window [2, 4) in 1-based frame numbers
    color0 = np.array(synth.PALETTE[0])
    for t in range(1, 7):
        ids = {obj_id for obj_id, _ in seq.boxes[t]}
        mask_ids = {obj_id for obj_id, _ in seq.masks[t]}
        frame_has_color0 = bool(np.any(np.all(seq.frames[t - 1] == color0, axis=-1)))
        if t in hidden_frames:
            assert ids == {2} and mask_ids == {2}
            assert not frame_has_color0
        else:
            assert ids == {1, 2} and mask_ids == {1, 2}
            assert frame_has_color0


def test_overlap_draws_later_object_on_top():
    spec = _single_spec(
        num_frames=1,
        objects=[
            ObjectSpec(
                shape="rectangle",
                size=(12.0, 12.0),
                color=synth.PALETTE[0],
                start=(30.0, 32.0),
                velocity=(0.0, 0.0),
            ),
            ObjectSpec(
                shape="rectangle",
                size=(12.0, 12.0),
                color=synth.PALETTE[1],
                start=(36.0, 32.0),
                velocity=(0.0, 0.0),
            ),
        ],
    )
    seq = generate_sequence(spec)
    masks = dict(seq.masks[1])
    sil0 = rasterize_box((30.0, 32.0, 12.0, 12.0), 64, 64).astype(bool)
    sil1 = rasterize_box((36.0, 32.0, 12.0, 12.0), 64, 64).astype(bool)
    assert np.array_equal(masks[2].astype(bool), sil1)
    assert np.array_equal(masks[1].astype(bool), sil0 & ~sil1)
    assert not np.any(masks[1].astype(bool) & masks[2].astype(bool))
    overlap_pixel = seq.frames[0][32, 32]
    assert np.array_equal(overlap_pixel, np.array(synth.PALETTE[1]))


def test_single_object_mask_matches_box_rasterization():
    seq = generate_sequence(_single_spec(num_frames=3))
    for t in range(1, 4):
        (_, box), = seq.boxes[t]
        (_, mask), = seq.masks[t]
        assert np.array_equal(mask, rasterize_box(box, 64, 64))


def test_spec_validation_rejects_bad_inputs():
    with pytest.raises(ValueError, match="multiples of 32"):
        _single_spec(height=60).validate()
    with pytest.raises(ValueError, match="at least one object"):
        _single_spec(objects=[]).validate()
    with pytest.raises(ValueError, match="does not fit"):
        _single_spec(
            objects=[
                ObjectSpec("rectangle", (70.0, 8.0), synth.PALETTE[0], (32.0, 32.0), (0.0, 0.0))
            ]
        ).validate()
    with pytest.raises(ValueError, match="partly outside"):
        _single_spec(
            objects=[
                ObjectSpec("rectangle", (12.0, 8.0), synth.PALETTE[0], (2.0, 32.0), (0.0, 0.0))
            ]
        ).validate()
    with pytest.raises(ValueError, match="does not exist"):
        _single_spec(occlusions=[OcclusionWindow(obj=5, start=0, end=2)]).validate()
    with pytest.raises(ValueError, match="occlusion window"):
        _single_spec(occlusions=[OcclusionWindow(obj=0, start=3, end=3)]).validate()
    with pytest.raises(ValueError, match="jitter"):
        _single_spec(jitter=-0.1).validate()
    with pytest.raises(ValueError, match="unknown shape"):
        ObjectSpec("triangle", (8.0, 8.0), synth.PALETTE[0], (32.0, 32.0), (0.0, 0.0))
    with pytest.raises(ValueError, match="size must be positive"):
        ObjectSpec("rectangle", (0.0, 8.0), synth.PALETTE[0], (32.0, 32.0), (0.0, 0.0))


def test_place_objects_limits():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="at most"):
        place_objects(rng, len(synth.PALETTE) + 1, 96, 96)
    with pytest.raises(ValueError, match="without overlap"):
        place_objects(np.random.default_rng(0), 4, 32, 32, max_tries=20)


def test_standard_sequence_respects_size_range():
    seq = standard_sequence(seed=11, num_objects=2, num_frames=2, size_range=(24.0, 40.0),
                            height=128, width=128)
    for obj in seq.spec.objects:
        assert 24.0 <= obj.size[0] <= 40.0 and 24.0 <= obj.size[1] <= 40.0


# ---------------------------------------------------------------- run-length


def test_encode_rle_known_strings():
    assert seqio.encode_rle(np.zeros((2, 2), dtype=np.uint8)) == "2 2\n4"
    assert seqio.encode_rle(np.ones((2, 2), dtype=np.uint8)) == "2 2\n0 4"
    assert seqio.encode_rle(np.array([[0, 0, 1, 1, 0]], dtype=np.uint8)) == "1 5\n2 2 1"


def test_rle_round_trip_random_masks():
    rng = np.random.default_rng(5)
    for _ in range(20):
        mask = (rng.random((rng.integers(1, 12), rng.integers(1, 12))) < 0.4).astype(np.uint8)
        assert np.array_equal(seqio.decode_rle(seqio.encode_rle(mask)), mask)


def test_decode_rle_rejects_malformed_text():
    with pytest.raises(ValueError, match="size line and a counts line"):
        seqio.decode_rle("2 2")
    with pytest.raises(ValueError, match="bad size line"):
        seqio.decode_rle("two two\n4")
    with pytest.raises(ValueError, match="nonnegative"):
        seqio.decode_rle("1 4\n-1 5")
    with pytest.raises(ValueError, match="leading zero run"):
        seqio.decode_rle("1 4\n1 0 3")
    with pytest.raises(ValueError, match="sum to 2, expected 4"):
        seqio.decode_rle("1 4\n1 1")
    with pytest.raises(ValueError, match="must be 0 or 1"):
        seqio.encode_rle(np.full((2, 2), 3, dtype=np.uint8))


# ---------------------------------------------------------------- box csv


def test_box_csv_round_trip(tmp_path):
    rows = {
        2: [(1, (3.0, 4.0, 10.0, 6.0), 0.9)],
        1: [(2, (0.25, 1.5, 5.0, 5.0), 1.0), (1, (7.0, 8.0, 2.0, 2.0), 0.5)],
    }
    path = str(tmp_path / "gt.csv")
    seqio.write_box_csv(path, rows)
    back = seqio.read_box_csv(path)
    assert sorted(back) == [1, 2]
    assert [obj_id for obj_id, _, _ in back[1]] == [1, 2]  # sorted by id
    for frame in rows:
        want = {obj_id: (box, conf) for obj_id, box, conf in rows[frame]}
        for obj_id, box, conf in back[frame]:
            assert np.allclose(box, want[obj_id][0], atol=0.005)
            assert abs(conf - want[obj_id][1]) < 0.005


def test_read_box_csv_reports_line_numbers(tmp_path):
    path = str(tmp_path / "bad.csv")
    with open(path, "w") as f:
        f.write("1,1,0.00,0.00,4.00,4.00,1.00,1,1.0\n")
        f.write("2,1,0.00,0.00\n")
    with pytest.raises(ValueError, match="line 2: expected 9 fields, got 4"):
        seqio.read_box_csv(path)
    with open(path, "w") as f:
        f.write("1,x,0.00,0.00,4.00,4.00,1.00,1,1.0\n")
    with pytest.raises(ValueError, match="line 1"):
        seqio.read_box_csv(path)


def test_box_conversions_invert():
    box = (3.0, 4.0, 10.0, 6.0)
    assert seqio.cxcywh(seqio.tlwh(box)) == box


# ---------------------------------------------------------------- meta


def test_meta_round_trip_and_errors(tmp_path):
    path = str(tmp_path / "meta.txt")
    seqio.write_meta(path, {"height": 64, "width": 96, "num_frames": 7})
    assert seqio.read_meta(path) == {"height": 64, "width": 96, "num_frames": 7}
    with open(path, "w") as f:
        f.write("# comment\n\nheight 64\n")
    with pytest.raises(ValueError, match="line 3: expected key = value"):
        seqio.read_meta(path)


# ---------------------------------------------------------------- sequence dirs


def test_write_read_sequence_round_trip(tmp_path):
    seq = standard_sequence(seed=9, num_objects=2, num_frames=4, height=64, width=64)
    root = str(tmp_path / "seq")
    seqio.write_sequence(seq, root)
    loaded = seqio.read_sequence(root)
    assert loaded.meta == {"height": 64, "width": 64, "num_frames": 4}
    assert len(loaded.frames) == 4
    assert all(np.array_equal(a, b) for a, b in zip(loaded.frames, seq.frames))
    for t in range(1, 5):
        want = {obj_id: seqio.tlwh(box) for obj_id, box in seq.boxes[t]}
        got = {obj_id: box for obj_id, box, _ in loaded.boxes[t]}
        assert sorted(got) == sorted(want)
        for obj_id in want:
            assert np.allclose(got[obj_id], want[obj_id], atol=0.005)
        masks = {obj_id: m for obj_id, m in loaded.masks[t]}
        for obj_id, mask in seq.masks[t]:
            assert np.array_equal(masks[obj_id], mask)


def test_read_sequence_without_masks(tmp_path):
    seq = standard_sequence(seed=9, num_objects=1, num_frames=2, height=64, width=64)
    root = str(tmp_path / "seq")
    seqio.write_sequence(seq, root, with_masks=False)
    loaded = seqio.read_sequence(root)
    assert loaded.masks == {}
    assert len(loaded.frames) == 2


def test_read_frames_and_masks_errors(tmp_path):
    empty = tmp_path / "frames"
    empty.mkdir()
    with pytest.raises(ValueError, match="no frames under"):
        seqio.read_frames(str(empty))
    bad = tmp_path / "masks"
    bad.mkdir()
    (bad / "oops.rle").write_text("1 1\n1")
    with pytest.raises(ValueError, match="is not frame_id.rle"):
        seqio.read_masks(str(bad))
