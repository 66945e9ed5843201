import numpy as np
import pytest
from hypothesis import given, strategies as st

from metatrack import autodiff as ad
from metatrack import detector as det
from metatrack.boxes import BoundingBox, iou

from helpers import brute_force_labels, conv_oracle, numeric_grad, random_inside_box, rel_error, scalar, toy_config

seeds = st.integers(0, 2**31 - 1)
heads = st.sampled_from([det.ANCHOR_BASED, det.ANCHOR_FREE])


def outputs(cls_map, reg_map):
    return det.DetectorOutput(ad.tensor(cls_map), ad.tensor(reg_map))


# -- config and parameters ----------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(input_size=100), dict(stride=6), dict(head_style="two-stage"),
    dict(head_style=det.ANCHOR_BASED, anchor_size=0.0), dict(trunk_channels=(4, 4)),
    dict(frozen_prefix_layers=5), dict(head_convs=0), dict(precision="half"),
])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        det.DetectorConfig(**kw)


def test_config_items_round_trip():
    cfg = det.DetectorConfig(head_style=det.ANCHOR_BASED, trunk_channels=(4, 8, 8), shared_trunk=True, anchor_size=40.5)
    assert det.DetectorConfig.from_items(cfg.to_items()) == cfg
    with pytest.raises(KeyError):
        det.DetectorConfig.from_items([("trunk-width", "3")])


def test_param_set_invariants():
    params = det.init_params(toy_config(), alpha_init=0.01)
    assert params.count(trainable_only=True) <= 200
    for name, p in params.entries.items():
        if p.trainable:
            assert p.lr.shape == det.lr_shape(p.weight.shape) and np.all(p.lr == 0.01)
        else:
            assert p.lr is None
    conv = params["cls.head.0.w"]
    assert conv.lr.shape == (conv.weight.shape[0],)
    bad = dict(params.entries)
    bad["cls.head.0.w"] = det.Param(conv.weight, True, None)
    with pytest.raises(ValueError, match="cls.head.0.w"):
        det.ParamSet(params.config, bad)


def test_mismatched_params_name_the_entry():
    params = det.init_params(toy_config())
    wider = toy_config(trunk_channels=(2, 3))
    with pytest.raises(ValueError, match="trunk.1.w"):
        det.forward(np.zeros((3, 16, 16)), params, wider)
    del params.entries["reg.head.0.b"]
    with pytest.raises(KeyError, match="reg.head.0.b"):
        det.forward(np.zeros((3, 16, 16)), params)


# -- forward ---------------------------------------------------------------------------

def test_output_grid_is_twelve_for_default_config():
    cfg = det.DetectorConfig(trunk_channels=(4, 4, 4, 4), head_convs=1)
    out = det.forward(np.zeros((3, 96, 96)), det.init_params(cfg))
    assert out.cls_map.shape == (1, 12, 12) and out.reg_map.shape == (4, 12, 12)


@pytest.mark.parametrize("head", [det.ANCHOR_BASED, det.ANCHOR_FREE])
def test_zero_image_and_zero_final_layers(head):
    params = det.init_params(toy_config(head, head_convs=2), seed=3)
    zeros = {n: np.zeros_like(params[n].weight) for n in ("cls.head.1.w", "cls.head.1.b", "reg.head.1.w", "reg.head.1.b")}
    out = det.forward(np.zeros((3, 16, 16)), params.replace(weights=zeros))
    assert not out.cls_map.value.any() and not out.reg_map.value.any()


@pytest.mark.parametrize("shared", [False, True])
def test_forward_matches_conv_composition(shared):
    cfg = det.DetectorConfig(input_size=8, stride=2, trunk_channels=(3,), frozen_prefix_layers=0,
                             head_convs=1, shared_trunk=shared, precision="double")
    params = det.init_params(cfg)
    rng = np.random.default_rng(0)
    # small integers keep every sum exact, so the comparison can be bitwise
    params = params.replace(weights={n: rng.integers(-2, 3, p.weight.shape).astype(float)
                                     for n, p in params.entries.items()})
    image = rng.integers(0, 4, (3, 8, 8)).astype(float)
    out = det.forward(image, params)
    w = lambda n: params[n].weight
    for branch, got in (("cls", out.cls_map.value), ("reg", out.reg_map.value)):
        trunk = "trunk.0" if shared else f"{branch}.trunk.0"
        h = np.maximum(conv_oracle(image, w(f"{trunk}.w"), w(f"{trunk}.b"), 2, 1), 0)
        expected = conv_oracle(h, w(f"{branch}.head.0.w"), w(f"{branch}.head.0.b"), 1, 1)
        assert np.array_equal(got, expected)


def test_predict_matches_forward():
    params = det.init_params(toy_config(det.ANCHOR_BASED), seed=1)
    images = np.random.default_rng(2).random((3, 3, 16, 16))
    cls_map, reg_map = det.predict(images, params)
    for i in range(3):
        out = det.forward(images[i], params)
        np.testing.assert_allclose(cls_map[i], out.cls_map.value[0], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(reg_map[i], out.reg_map.value, rtol=1e-12, atol=1e-14)


# -- label assignment ----------------------------------------------------------------------

def test_perfect_anchor_is_positive_with_zero_target():
    cfg = det.DetectorConfig(head_style=det.ANCHOR_BASED, anchor_size=64.0)
    t = det.assign_labels(BoundingBox(5.5 * 8, 6.5 * 8, 64, 64), cfg)
    assert t.cls_mask[0, 6, 5] == det.POSITIVE
    np.testing.assert_array_equal(t.reg_target[:, 6, 5], 0)


def test_centerness_is_one_at_box_center():
    cfg = det.DetectorConfig()
    t = det.assign_labels(BoundingBox(4.5 * 8, 7.5 * 8, 30, 20), cfg)
    assert t.cls_mask[0, 7, 4] == det.POSITIVE and t.cls_target[0, 7, 4] == 1.0


def test_box_outside_image_rejected():
    with pytest.raises(ValueError, match="outside"):
        det.assign_labels(BoundingBox(-40, 10, 20, 20), det.DetectorConfig())


@given(heads, seeds)
def test_assignment_matches_brute_force(head, seed):
    cfg = det.DetectorConfig(head_style=head)
    gt = random_inside_box(np.random.default_rng(seed), 96, lo=6.0, hi=80.0)
    t = det.assign_labels(gt, cfg)
    mask, ctr = brute_force_labels(gt, cfg)
    np.testing.assert_array_equal(t.cls_mask[0], mask)
    assert np.array_equal(t.reg_mask[0], mask == 1)
    if head == det.ANCHOR_FREE:
        np.testing.assert_allclose(t.cls_target[0], ctr, rtol=1e-12, atol=0)
        assert t.cls_target.min() >= 0 and t.cls_target.max() <= 1
    assert not t.reg_target[:, mask != 1].any()


@given(heads, seeds)
def test_encode_decode_round_trip(head, seed):
    cfg = det.DetectorConfig(head_style=head)
    gt = random_inside_box(np.random.default_rng(seed), 96)
    boxes, _ = det.decode_arrays(np.zeros((12, 12)), det.encode(gt, cfg), cfg)
    np.testing.assert_allclose(boxes, np.tile(gt.as_tuple(), (144, 1)), atol=1e-4, rtol=0)


# -- decoding ------------------------------------------------------------------------------

def test_zero_reg_decodes_to_anchors_in_row_major_order():
    cfg = toy_config(det.ANCHOR_BASED, anchor_size=4.0)
    cands = det.decode(outputs(np.zeros((1, 4, 4)), np.zeros((4, 4, 4))), cfg)
    assert len(cands) == 16
    for k, (box, score) in enumerate(cands):
        i, j = divmod(k, 4)
        assert box.as_tuple() == ((j + 0.5) * 4, (i + 0.5) * 4, 4.0, 4.0)
        assert score == 0.5


@given(heads, seeds)
def test_decoded_boxes_clipped_to_image(head, seed):
    cfg = toy_config(head)
    rng = np.random.default_rng(seed)
    boxes, scores = det.decode_arrays(rng.normal(scale=30, size=(4, 4)), rng.normal(scale=5, size=(4, 4, 4)), cfg)
    x1, x2 = boxes[:, 0] - boxes[:, 2] / 2, boxes[:, 0] + boxes[:, 2] / 2
    assert np.all(x1 >= -1e-9) and np.all(x2 <= 16 + 1e-9)
    assert np.all(boxes[:, 2:] >= det.MIN_EXTENT - 1e-9)
    assert np.all((scores >= 0) & (scores <= 1))


# -- losses ---------------------------------------------------------------------------------

def _perfect(t, head):
    if head == det.ANCHOR_BASED:
        logits = np.where(t.cls_mask == det.POSITIVE, 50.0, -50.0)
    else:
        p = np.clip(t.cls_target, 1e-30, 1 - 1e-16)
        logits = np.log(p) - np.log1p(-p)
    return outputs(logits, t.reg_target)


@given(heads, seeds)
def test_perfect_predictions_have_near_zero_loss(head, seed):
    cfg = det.DetectorConfig(head_style=head, precision="double")
    t = det.assign_labels(random_inside_box(np.random.default_rng(seed), 96, lo=20.0), cfg)
    assert scalar(det.detection_loss(_perfect(t, head), t, cfg)) < 1e-6


@pytest.mark.parametrize("balanced", [True, False])
def test_centerness_half_against_zero_targets(balanced):
    cfg = toy_config(det.ANCHOR_FREE, balanced_centerness=balanced)
    t = det.LabelTargets(np.zeros((1, 4, 4)), np.zeros((1, 4, 4), np.int8), np.zeros((4, 4, 4)),
                         np.zeros((1, 4, 4), bool))
    total, cls_loss, reg_loss = det.detection_loss(outputs(np.zeros((1, 4, 4)), np.zeros((4, 4, 4))), t, cfg,
                                                   return_parts=True)
    assert scalar(cls_loss) == 0.25 and scalar(reg_loss) == 0


def test_focal_loss_single_positive():
    cfg = toy_config(det.ANCHOR_BASED)
    mask = np.full((1, 4, 4), det.IGNORE, np.int8)
    mask[0, 1, 2] = det.POSITIVE
    t = det.LabelTargets((mask == 1).astype(float), mask, np.zeros((4, 4, 4)), mask == 1)
    loss = scalar(det.detection_loss(outputs(np.zeros((1, 4, 4)), np.zeros((4, 4, 4))), t, cfg))
    assert loss == pytest.approx(-0.25 * 0.5**2 * np.log(0.5), rel=1e-12)
    assert round(loss, 4) == 0.0433


@given(heads, seeds, st.booleans())
def test_loss_is_non_negative(head, seed, balanced):
    rng = np.random.default_rng(seed)
    cfg = toy_config(head, balanced_centerness=balanced)
    t = det.assign_labels(random_inside_box(rng, 16, lo=4.0, hi=14.0), cfg)
    out = outputs(rng.normal(scale=5, size=(1, 4, 4)), rng.normal(size=(4, 4, 4)))
    assert scalar(det.detection_loss(out, t, cfg)) >= 0


def test_loss_shape_mismatch():
    cfg = toy_config()
    t = det.assign_labels(BoundingBox(8, 8, 6, 6), cfg)
    with pytest.raises(ValueError, match="do not match"):
        det.detection_loss(outputs(np.zeros((1, 5, 5)), np.zeros((4, 5, 5))), t, cfg)


def test_batched_loss_is_mean_of_single_losses():
    cfg = toy_config(det.ANCHOR_BASED)
    rng = np.random.default_rng(4)
    targets = [det.assign_labels(random_inside_box(rng, 16, lo=5.0, hi=12.0), cfg) for _ in range(3)]
    cls_map, reg_map = rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(4, 3, 4, 4))
    batched = scalar(det.detection_loss(outputs(cls_map, reg_map), det.stack_targets(targets), cfg))
    singles = [scalar(det.detection_loss(outputs(cls_map[:, i], reg_map[:, i]), targets[i], cfg)) for i in range(3)]
    assert batched == pytest.approx(np.mean(singles), rel=1e-12)


def _image_loss(params, image, gt, weights=None):
    cfg = params.config
    return det.detection_loss(det.forward(image, params, weights=weights), det.assign_labels(gt, cfg), cfg)


@pytest.mark.parametrize("head", [det.ANCHOR_BASED, det.ANCHOR_FREE])
@pytest.mark.parametrize("shared", [False, True])
def test_loss_gradients_match_finite_differences(head, shared):
    params = det.init_params(toy_config(head, shared_trunk=shared), seed=5)
    rng = np.random.default_rng(6)
    # larger head weights so the maps are not dominated by the bias priors
    params = params.replace(weights={n: rng.normal(scale=0.5, size=p.weight.shape)
                                     for n, p in params.entries.items() if p.trainable})
    image = rng.random((3, 16, 16))
    gt = BoundingBox(7.3, 8.9, 9.5, 7.0)
    nodes = {n: ad.tensor(params[n].weight, requires_grad=True) for n in params.trainable_names()}
    grads = ad.grad(_image_loss(params, image, gt, nodes), list(nodes.values()))
    for (name, node), g in zip(nodes.items(), grads):
        def f(v, name=name):
            return scalar(_image_loss(params.replace(weights={name: v}), image, gt))
        assert rel_error(g.value, numeric_grad(f, node.value), floor=1e-4) < 1e-4, name


@pytest.mark.parametrize("shared", [False, True])
def test_branch_gradient_routing(shared):
    params = det.init_params(toy_config(det.ANCHOR_FREE, shared_trunk=shared), seed=7)
    image = np.random.default_rng(8).random((3, 16, 16))
    t = det.assign_labels(BoundingBox(8, 8, 8, 8), params.config)
    nodes = {n: ad.tensor(params[n].weight, requires_grad=True) for n in params.trainable_names()}
    _, cls_loss, reg_loss = det.detection_loss(det.forward(image, params, weights=nodes), t, params.config,
                                               return_parts=True)
    if shared:
        for part in (cls_loss, reg_loss):
            (g,) = ad.grad(part, [nodes["trunk.1.w"]])
            assert np.abs(g.value).sum() > 0
    else:
        (g_cls_own, g_cls_other) = ad.grad(cls_loss, [nodes["cls.trunk.1.w"], nodes["reg.trunk.1.w"]])
        (g_reg_own, g_reg_other) = ad.grad(reg_loss, [nodes["reg.trunk.1.w"], nodes["cls.trunk.1.w"]])
        assert np.abs(g_cls_own.value).sum() > 0 and np.abs(g_reg_own.value).sum() > 0
        assert not g_cls_other.value.any() and not g_reg_other.value.any()


# -- checkpoints --------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = det.init_params(det.DetectorConfig(head_style=det.ANCHOR_BASED, trunk_channels=(4, 4, 8), head_convs=1), seed=9)
    path = tmp_path / "a.ckpt"
    det.save_checkpoint(path, params, {"iteration": 12})
    back, extra = det.load_checkpoint(path)
    assert back.config == params.config and extra == {"iteration": "12"}
    assert back.names() == params.names()
    for n, p in params.entries.items():
        q = back[n]
        assert q.trainable == p.trainable and q.weight.tobytes() == p.weight.tobytes()
        assert (q.lr is None) == (p.lr is None)
    det.save_checkpoint(tmp_path / "b.ckpt", back, extra)
    assert (tmp_path / "b.ckpt").read_bytes() == path.read_bytes()


def test_iou_examples():
    a = BoundingBox(0.5, 0.5, 1, 1)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(5, 5, 1, 1)) == 0.0
    assert iou(a, BoundingBox(1.0, 0.5, 1, 1)) == pytest.approx(1 / 3, abs=1e-15)
