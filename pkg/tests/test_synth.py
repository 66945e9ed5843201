import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from metatrack import synth as sy
from metatrack.boxes import BoundingBox

seeds = st.integers(0, 2**31 - 1)
SMALL = sy.SynthConfig(canvas_size=48, size_min=8, size_max=12, length=3, distractors=0)


def test_static_scene_is_constant():
    cfg = sy.SynthConfig(translate_sigma=0, scale_sigma=0, appearance_sigma=0, distractors=0, length=5)
    seq = sy.generate_sequence(cfg, 3)
    for frame, box in zip(seq.frames[1:], seq.gt[1:]):
        assert np.array_equal(frame, seq.frames[0])
        assert box == seq.gt[0]


@given(st.integers(0, 10_000), st.integers(0, 50))
def test_generation_is_deterministic(instance, seed):
    cfg = sy.SynthConfig(canvas_size=64, size_min=10, size_max=16, length=3, seed=seed)
    a, b = sy.generate_sequence(cfg, instance), sy.generate_sequence(cfg, instance)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.frames, b.frames))
    assert a.gt == b.gt


def test_distractors_render_as_separate_objects():
    cfg = sy.SynthConfig(distractors=2, length=6)
    for instance in range(5):
        seq = sy.generate_sequence(cfg, instance, with_masks=True)
        for mask in seq.masks:
            labels = sorted(set(np.unique(mask)) - {0})
            assert labels == [1, 2, 3]
            _, count = ndimage.label(mask > 0)
            assert count == 3


@given(st.integers(0, 500))
def test_boxes_valid_and_pixels_in_range(instance):
    cfg = sy.SynthConfig(canvas_size=64, size_min=10, size_max=16, length=8, translate_sigma=6.0)
    seq = sy.generate_sequence(cfg, instance)
    for frame, box in zip(seq.frames, seq.gt):
        assert frame.shape == (3, 64, 64) and frame.min() >= 0 and frame.max() <= 1
        assert box.w > 0 and box.h > 0
        assert 0 <= box.cx <= 64 and 0 <= box.cy <= 64


def test_config_validation_and_items():
    with pytest.raises(ValueError):
        sy.SynthConfig(length=1)
    with pytest.raises(ValueError):
        sy.SynthConfig(scale_sigma=-0.1)
    with pytest.raises(ValueError):
        sy.SynthConfig(shapes=("hexagon",))
    cfg = sy.SynthConfig(shapes=("ellipse", "triangle"), distractors=1, seed=7)
    assert sy.SynthConfig.from_items(cfg.to_items()) == cfg


# -- cropping ---------------------------------------------------------------------------

def test_context_side_closed_form():
    assert sy.context_side(BoundingBox(0, 0, 32, 32)) == 96.0


def test_centered_box_maps_to_patch_center():
    frame = np.random.default_rng(0).random((3, 200, 200)).astype(np.float32)
    box = BoundingBox(100, 100, 30, 24)
    patch, tf = sy.crop_search_region(frame, box, 96)
    mapped = tf.to_patch(box)
    assert patch.shape == (3, 96, 96)
    assert mapped.cx == pytest.approx(48, abs=1e-9) and mapped.cy == pytest.approx(48, abs=1e-9)


def test_outside_area_takes_mean_color():
    frame = np.zeros((3, 40, 40), dtype=np.float32)
    frame[0] = 0.6
    frame[1, :20] = 1.0
    patch, _ = sy.crop_search_region(frame, BoundingBox(2, 2, 20, 20), 32)
    np.testing.assert_allclose(patch[:, 0, 0], [0.6, 0.5, 0.0], atol=1e-6)


@given(seeds)
def test_transform_round_trip(seed):
    rng = np.random.default_rng(seed)
    frame = np.zeros((3, 64, 64), dtype=np.float32)
    for _ in range(25):
        center = BoundingBox(*rng.uniform(0, 64, 2), *rng.uniform(4, 40, 2))
        _, tf = sy.crop_search_region(frame, center, 96)
        b = BoundingBox(*rng.uniform(-50, 150, 2), *rng.uniform(0.5, 80, 2))
        back = tf.to_frame(tf.to_patch(b))
        np.testing.assert_allclose(back.as_tuple(), b.as_tuple(), atol=1e-6, rtol=0)


def test_support_set_zoom():
    frame = sy.generate_sequence(sy.SynthConfig(length=2), 0).frames[0]
    box = BoundingBox(64, 60, 24, 20)
    support = sy.make_support_set(frame, box, 96)
    assert len(support) == 3
    plain, tf = sy.crop_search_region(frame, box, 96)
    assert np.array_equal(support[1][0], plain) and support[1][1] == tf.to_patch(box)
    ratio = support[0][1].w / support[1][1].w
    assert ratio == pytest.approx(sy.ZOOM, abs=1e-3)
    assert support[2][1].w < support[1][1].w


# -- task sampling -------------------------------------------------------------------------

def _pool():
    return [sy.generate_sequence(SMALL, i) for i in range(2)]


@given(seeds)
def test_two_sequence_pool_tasks_well_formed(seed):
    task = sy.sample_task(_pool(), np.random.default_rng(seed), out_size=16)
    assert len(task.support) == 3 and len(task.target) == 1
    for patch, box in task.support + task.target:
        assert patch.shape == (3, 16, 16) and box.w > 0


def test_same_sequence_probability():
    pool, rng = _pool(), np.random.default_rng(2024)
    same = sum(sy.sample_task(pool, rng, out_size=8).same_sequence for _ in range(10_000))
    assert abs(same / 10_000 - 0.8) <= 0.02


def test_task_sampling_deterministic_and_pool_checked():
    pool = _pool()
    a = sy.sample_task(pool, np.random.default_rng(5), out_size=16)
    b = sy.sample_task(pool, np.random.default_rng(5), out_size=16)
    for (pa, ba), (pb, bb) in zip(a.support + a.target, b.support + b.target):
        assert pa.tobytes() == pb.tobytes() and ba == bb
    with pytest.raises(ValueError, match="at least 2"):
        sy.sample_task(pool[:1], np.random.default_rng(0))


def test_same_probability_extremes():
    pool = _pool()
    rng = np.random.default_rng(0)
    tasks = [sy.sample_task(pool, rng, out_size=16, same_prob=0.0) for _ in range(5)]
    assert not any(t.same_sequence for t in tasks)
    assert all(sy.sample_task(pool, rng, out_size=16, same_prob=1.0).same_sequence for _ in range(5))


# -- export ----------------------------------------------------------------------------------

def test_sequence_export_round_trip(tmp_path):
    seq = sy.generate_sequence(sy.SynthConfig(canvas_size=64, size_min=10, size_max=14, length=4, distractors=1), 9)
    sy.save_sequence(seq, tmp_path / "s")
    back = sy.load_sequence(tmp_path / "s")
    assert back.config == seq.config and back.instance_id == 9 and back.gt == seq.gt
    assert all(a.tobytes() == b.tobytes() for a, b in zip(seq.frames, back.frames))
    meta, gt = sy.read_meta(tmp_path / "s")
    assert meta["distractors"] == "1" and len(gt) == 4
    assert sy.list_sequences(tmp_path) == [str(tmp_path / "s")]
    assert math.isclose(gt[2].cx, seq.gt[2].cx)
