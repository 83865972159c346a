import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

import gradcases
from gelanvit import blocks as B
from gelanvit import detect as D
from gelanvit import tensor as T
from gelanvit.gradcheck import gradcheck
from gelanvit.metrics import Detection
from gelanvit.tensor import Tensor
from gelanvit.zoo import AnchorSet

HW = (64, 64)
ANCHORS = AnchorSet(
    strides=(8, 16, 32),
    anchors=(((8.0, 8.0), (12.0, 9.0), (9.0, 14.0)), ((16.0, 16.0), (24.0, 18.0), (18.0, 26.0)), ((32.0, 32.0), (44.0, 36.0), (36.0, 48.0))),
)
K = 2


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def _zeros_raw(n=1, k=K, anchors=ANCHORS):
    return [np.zeros((n, anchors.per_scale * (5 + k), HW[0] // s, HW[1] // s)) for s in anchors.strides]


def _random_targets(rng, m, n_images=2, k=K):
    wh = rng.uniform(0.1, 0.6, (m, 2))
    cxy = rng.uniform(wh / 2, 1 - wh / 2)
    return np.column_stack([rng.integers(0, n_images, m), rng.integers(0, k, m), cxy, wh]).astype(np.float64)


# -- decode -------------------------------------------------------------------------

def test_decode_zero_logits_is_anchor_at_cell_center():
    boxes, obj, prob = D.decode_arrays(_zeros_raw(), ANCHORS, K)
    np.testing.assert_allclose(obj, 0.5)
    np.testing.assert_allclose(prob, 0.5)
    # first candidate: scale 0, anchor 0, cell (0, 0)
    # center = (0 + 2*0.5 - 0.5) * 8 = 4, size = anchor
    np.testing.assert_allclose(boxes[0, 0], [0.0, 0.0, 8.0, 8.0])
    # scale 0, anchor 1, cell (row 2, col 3)
    m = 1 * 64 + 2 * 8 + 3
    np.testing.assert_allclose(boxes[0, m], [3.5 * 8 - 6, 2.5 * 8 - 4.5, 3.5 * 8 + 6, 2.5 * 8 + 4.5])


def test_decode_confidence_in_unit_interval(rng):
    raws = [r + rng.standard_normal(r.shape) * 30 for r in _zeros_raw(2)]
    dets = D.decode_boxes(raws, ANCHORS, K)
    conf = np.array([d.confidence for d in dets])
    assert conf.min() >= 0.0 and conf.max() <= 1.0
    assert all(d.x2 > d.x1 and d.y2 > d.y1 for d in dets)


def test_decode_encode_round_trip(rng):
    for _ in range(200):
        s = int(rng.integers(3))
        stride = ANCHORS.strides[s]
        a = ANCHORS.array(s)[rng.integers(3)]
        cell = rng.integers(0, HW[0] // stride, 2)
        off = rng.uniform(-0.4, 1.4, 2)
        wh = a * rng.uniform(0.3, 3.5, 2)
        box = ((cell + off) * stride).tolist() + wh.tolist()
        t = D.encode_box(box, cell, a, stride)
        p = expit(t)
        got = np.concatenate([(cell + 2 * p[:2] - 0.5) * stride, a * (2 * p[2:]) ** 2])
        np.testing.assert_allclose(got, box, atol=1e-5)


def test_encode_rejects_unreachable_box():
    with pytest.raises(ValueError):
        D.encode_box((4.0, 4.0, 80.0, 8.0), (0, 0), (8.0, 8.0), 8)


def test_layout_check():
    with pytest.raises(T.ShapeError, match="A\\*\\(5\\+K\\)"):
        D.decode_arrays([np.zeros((1, 20, 8, 8))], AnchorSet((((8.0, 8.0),),), (8,)), 2)


# -- assignment ----------------------------------------------------------------------

def test_gt_equal_to_anchor_is_assigned():
    a = ANCHORS.array(1)[0] / 64
    targets = np.array([[0, 1, 0.5, 0.5, a[0], a[1]]])
    asg = D.assign_targets(targets, ANCHORS, HW)
    assert (0, 1, 0) in asg.matched_pairs()
    assert len(asg.unassigned) == 0


def test_gt_five_times_wider_is_unassigned():
    w = 5 * 48.0 / 64
    targets = np.array([[0, 0, 0.5, 0.5, min(w, 0.99), 0.01]])
    small = AnchorSet(anchors=(((4.0, 4.0),), ((8.0, 8.0),)), strides=(8, 16))
    asg = D.assign_targets(np.array([[0, 0, 0.5, 0.5, 5 * 8.0 / 64 * 1.01, 8.0 / 64]]), small, HW)
    assert list(asg.unassigned) == [0]
    assert asg.n_assigned == 0
    assert D.assign_targets(targets, ANCHORS, HW).unassigned.tolist() == [0]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), m=st.integers(1, 8))
def test_assignment_matches_brute_force_ratio_enumeration(seed, m):
    r = np.random.default_rng(seed)
    targets = _random_targets(r, m)
    targets[:, 4:6] = r.uniform(0.02, 0.95, (m, 2))
    asg = D.assign_targets(targets, ANCHORS, HW)
    expected = set()
    for g, row in enumerate(targets):
        w, h = row[4] * HW[1], row[5] * HW[0]
        for s, group in enumerate(ANCHORS.anchors):
            for a, (aw, ah) in enumerate(group):
                if max(w / aw, aw / w) < 4.0 and max(h / ah, ah / h) < 4.0:
                    expected.add((g, s, a))
    assert asg.matched_pairs() == expected
    matched_rows = {g for g, _, _ in expected}
    assert set(asg.unassigned.tolist()) == set(range(m)) - matched_rows


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), m=st.integers(1, 6))
def test_assigned_cells_contain_or_neighbour_the_center(seed, m):
    r = np.random.default_rng(seed)
    targets = _random_targets(r, m)
    asg = D.assign_targets(targets, ANCHORS, HW)
    for s, sa in enumerate(asg.scales):
        stride = ANCHORS.strides[s]
        for i in range(len(sa)):
            g = targets[sa.gt_index[i]]
            cx, cy = g[2] * HW[1] / stride, g[3] * HW[0] / stride
            dx, dy = cx - sa.gx[i], cy - sa.gy[i]
            assert -0.5 <= dx < 1.5 and -0.5 <= dy < 1.5
            assert (0 <= dx < 1) or (0 <= dy < 1)
            np.testing.assert_allclose(sa.tbox[i], [dx, dy, g[4] * HW[1] / stride, g[5] * HW[0] / stride])
            assert sa.tcls[i] == g[1] and sa.image[i] == g[0]


def _pixel_targets(r, m):
    # integer pixel extents, as the generator emits; centres often sit exactly on cell borders
    x1, y1 = r.integers(0, 40, (2, m))
    w, h = r.integers(8, 24, (2, m))
    x2, y2 = np.minimum(x1 + w, 64), np.minimum(y1 + h, 64)
    cols = [(x1 + x2) / 128, (y1 + y2) / 128, (x2 - x1) / 64, (y2 - y1) / 64]
    return np.column_stack([np.zeros(m), r.integers(0, K, m), *cols]).astype(np.float64)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), m=st.integers(1, 5))
def test_every_assigned_target_is_representable(seed, m):
    targets = _pixel_targets(np.random.default_rng(seed), m)
    asg = D.assign_targets(targets, ANCHORS, HW)
    for s, sa in enumerate(asg.scales):
        stride = ANCHORS.strides[s]
        for i in range(len(sa)):
            assert -0.5 < sa.tbox[i, 0] < 1.5 and -0.5 < sa.tbox[i, 1] < 1.5
            box = ((sa.tbox[i, 0] + sa.gx[i]) * stride, (sa.tbox[i, 1] + sa.gy[i]) * stride, sa.tbox[i, 2] * stride, sa.tbox[i, 3] * stride)
            D.encode_box(box, (sa.gx[i], sa.gy[i]), ANCHORS.array(s)[sa.anchor[i]], stride)


def test_centre_on_cell_border_takes_only_the_lower_neighbour():
    a = ANCHORS.array(0)[0] / 64
    # center exactly at (3.0, 5.0) cells of stride 8
    targets = np.array([[0, 0, 3 * 8 / 64, 5 * 8 / 64, a[0], a[1]]])
    sa = D.assign_targets(targets, ANCHORS, HW).scales[0]
    cells = {(int(x), int(y)) for x, y, an in zip(sa.gx, sa.gy, sa.anchor) if an == 0}
    assert cells == {(3, 5), (2, 5), (3, 4)}


def test_single_gt_gets_centre_and_two_neighbours():
    a = ANCHORS.array(0)[0] / 64
    # center at (2.25, 3.75) cells of stride 8: left and down neighbours
    targets = np.array([[0, 0, 2.25 * 8 / 64, 3.75 * 8 / 64, a[0], a[1]]])
    sa = D.assign_targets(targets, ANCHORS, HW).scales[0]
    cells = {(int(x), int(y)) for x, y, an in zip(sa.gx, sa.gy, sa.anchor) if an == 0}
    assert cells == {(2, 3), (1, 3), (2, 4)}


def _assignment_set(asg, targets):
    out = set()
    for s, sa in enumerate(asg.scales):
        for i in range(len(sa)):
            out.add((s, int(sa.image[i]), int(sa.anchor[i]), int(sa.gy[i]), int(sa.gx[i]), tuple(targets[sa.gt_index[i]])))
    return out


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), m=st.integers(2, 10))
def test_assignment_is_permutation_invariant(seed, m):
    r = np.random.default_rng(seed)
    targets = _random_targets(r, m, n_images=1)
    perm = r.permutation(m)
    a = _assignment_set(D.assign_targets(targets, ANCHORS, HW), targets)
    b = _assignment_set(D.assign_targets(targets[perm], ANCHORS, HW), targets[perm])
    assert a == b


def test_each_slot_trains_one_target(rng):
    targets = _random_targets(rng, 30, n_images=1)
    asg = D.assign_targets(targets, ANCHORS, HW)
    for sa in asg.scales:
        slots = list(zip(sa.image, sa.anchor, sa.gy, sa.gx))
        assert len(slots) == len(set(slots))


# -- loss ------------------------------------------------------------------------------

def test_no_gt_saturated_negatives_give_zero_loss():
    raws = []
    for r in _zeros_raw():
        r = r.reshape(1, 3, 5 + K, *r.shape[2:])
        r[:, :, 4] = -20.0
        raws.append(Tensor(r.reshape(1, -1, *r.shape[3:]), requires_grad=True))
    br = D.compute_loss(raws, np.zeros((0, 6)), ANCHORS, K, HW)
    assert br.box == 0.0 and br.cls == 0.0
    assert br.total < 1e-8
    assert br.n_assigned == 0


def _perfect_raws(targets, anchors=ANCHORS, k=K):
    asg = D.assign_targets(targets, anchors, HW)
    raws = []
    for s, r in enumerate(_zeros_raw(1 + int(targets[:, 0].max()), k, anchors)):
        n, _, h, w = r.shape
        r5 = r.reshape(n, anchors.per_scale, 5 + k, h, w)
        r5[:, :, 4] = -20.0
        r5[:, :, 5:] = -20.0
        sa = asg.scales[s]
        stride = anchors.strides[s]
        for i in range(len(sa)):
            cell = (sa.gx[i], sa.gy[i])
            box = ((sa.tbox[i, 0] + cell[0]) * stride, (sa.tbox[i, 1] + cell[1]) * stride, sa.tbox[i, 2] * stride, sa.tbox[i, 3] * stride)
            anchor = anchors.array(s)[sa.anchor[i]]
            r5[sa.image[i], sa.anchor[i], 0:4, sa.gy[i], sa.gx[i]] = D.encode_box(box, cell, anchor, stride)
            r5[sa.image[i], sa.anchor[i], 4, sa.gy[i], sa.gx[i]] = 20.0
            r5[sa.image[i], sa.anchor[i], 5 + sa.tcls[i], sa.gy[i], sa.gx[i]] = 20.0
        raws.append(Tensor(r5.reshape(r.shape), requires_grad=True))
    return raws, asg


@pytest.mark.parametrize("pixel_grid", [False, True])
def test_perfect_prediction_fixed_point(rng, pixel_grid):
    if pixel_grid:
        targets = _pixel_targets(rng, 4)
    else:
        targets = _random_targets(rng, 4)
        targets[:, 4:6] = np.clip(targets[:, 4:6], 0.15, 0.5)
    raws, asg = _perfect_raws(targets)
    assert asg.n_assigned > 0
    br = D.compute_loss(raws, targets, ANCHORS, K, HW, assignment=asg)
    assert br.total < 1e-3
    assert br.box < 1e-6


def test_loss_positive_away_from_fixed_point(rng):
    targets = _random_targets(rng, 3)
    raws, asg = _perfect_raws(targets)
    raws[0].data[0, 0] += 0.5
    br = D.compute_loss(raws, targets, ANCHORS, K, HW, assignment=asg)
    assert br.total > 0 and br.box >= 0 and br.cls >= 0 and br.obj >= 0


def test_gain_equation_and_linearity(rng):
    targets = _random_targets(rng, 5)
    raws = [Tensor(r + rng.standard_normal(r.shape), requires_grad=True) for r in _zeros_raw(2)]
    a = D.compute_loss(raws, targets, ANCHORS, K, HW)
    assert a.total == pytest.approx(0.05 * a.box + 0.5 * a.cls + 1.0 * a.obj, abs=1e-12)
    b = D.compute_loss(raws, targets, ANCHORS, K, HW, gains=D.LossGains(box=0.1))
    assert b.total - a.total == pytest.approx(0.05 * a.box, abs=1e-12)
    assert (b.box, b.cls, b.obj) == (a.box, a.cls, a.obj)


@settings(max_examples=80, deadline=None)
@given(
    box=st.floats(0, 10), cls=st.floats(0, 10), obj=st.floats(0, 10),
    g=st.tuples(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2)),
)
def test_combine_gain_equation(box, cls, obj, g):
    gains = D.LossGains(*g)
    assert D.LossBreakdown.combine(box, cls, obj, gains) == pytest.approx(box * g[0] + cls * g[1] + obj * g[2], abs=1e-12)


def test_unassigned_targets_are_counted():
    targets = np.array([[0, 0, 0.5, 0.5, 0.99, 0.02]])
    br = D.compute_loss([Tensor(r, requires_grad=True) for r in _zeros_raw()], targets, ANCHORS, K, HW)
    assert br.n_unassigned == 1 and br.n_assigned == 0 and br.box == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_full_loss_gradcheck(seed):
    assert gradcheck(*gradcases.comp_full_loss(np.random.default_rng(seed))) < 1e-3


def test_loss_gradcheck_through_head_weights(rng):
    anchors = AnchorSet(anchors=(((12.0, 12.0), (20.0, 16.0)),), strides=(8,))
    hw = (32, 32)
    head = B.Detect([4], num_classes=2, anchors_per_scale=2, strides=[8], image_hw=hw, rng=rng)
    feat = Tensor(rng.standard_normal((1, 4, 4, 4)))
    targets = np.array([[0, 1, 0.4, 0.55, 0.45, 0.3]])

    def fn():
        return D.compute_loss(head([feat]), targets, anchors, 2, hw).total_tensor

    assert gradcheck(fn, head.parameters()) < 1e-3


def test_ciou_identical_boxes_is_one(rng):
    b = rng.uniform(1, 5, (6, 4))
    np.testing.assert_allclose(D.ciou_arrays(b, b), 1.0, atol=1e-6)


def test_ciou_against_closed_form():
    a = np.array([[2.0, 2.0, 2.0, 2.0]])
    b = np.array([[3.0, 3.0, 2.0, 4.0]])
    # a = [1,3]x[1,3], b = [2,4]x[1,5]: inter 2, union 4 + 8 - 2
    iou = 2 / 10
    rho2 = 2.0
    c2 = 3.0**2 + 4.0**2
    v = 4 / np.pi**2 * (np.arctan(1.0) - np.arctan(0.5)) ** 2
    alpha = v / (v - iou + 1)
    np.testing.assert_allclose(D.ciou_arrays(a, b), [iou - rho2 / c2 - alpha * v], rtol=1e-6)


# -- NMS -------------------------------------------------------------------------------

def _det(c, conf, box, image="a"):
    return Detection(image, c, conf, *box)


def test_nms_identical_boxes_same_class():
    out = D.nms([_det(0, 0.9, (0, 0, 10, 10)), _det(0, 0.8, (0, 0, 10, 10))], 0.45, 0.0)
    assert [d.confidence for d in out] == [0.9]


def test_nms_identical_boxes_different_classes():
    out = D.nms([_det(0, 0.9, (0, 0, 10, 10)), _det(1, 0.8, (0, 0, 10, 10))], 0.45, 0.0)
    assert len(out) == 2


def test_nms_confidence_threshold_is_strict():
    out = D.nms([_det(0, 0.25, (0, 0, 10, 10)), _det(0, 0.26, (20, 20, 30, 30))], 0.45, 0.25)
    assert [d.confidence for d in out] == [0.26]


def _iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _brute_nms(dets, thr):
    """Keep a detection iff no higher-ranked kept detection of its class overlaps it at >= thr."""
    ranked = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept = []
    for i in ranked:
        if all(dets[j].class_id != dets[i].class_id or _iou(dets[i].xyxy, dets[j].xyxy) < thr for j in kept):
            kept.append(i)
    return kept


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(0, 12), thr=st.sampled_from([0.3, 0.45, 0.5, 0.7]))
def test_nms_matches_brute_force(seed, n, thr):
    r = np.random.default_rng(seed)
    xy = r.uniform(0, 20, (n, 2))
    wh = r.uniform(2, 12, (n, 2))
    conf = np.round(r.uniform(0, 1, n), 2)  # ties exercise the stable order
    dets = [_det(int(c), float(p), (x, y, x + w, y + h)) for c, p, (x, y), (w, h) in zip(r.integers(0, 2, n), conf, xy, wh)]
    got = D.nms(dets, thr, -1.0)
    want = [dets[i] for i in _brute_nms(dets, thr)]
    assert sorted(map(id, got)) == sorted(map(id, want))
    for a, b in itertools.combinations(got, 2):
        if a.class_id == b.class_id:
            assert _iou(a.xyxy, b.xyxy) < thr


def test_nms_is_per_image():
    dets = [_det(0, 0.9, (0, 0, 10, 10), "a"), _det(0, 0.8, (0, 0, 10, 10), "b")]
    assert len(D.nms(dets, 0.45, 0.0)) == 2


def test_postprocess_recovers_encoded_boxes(rng):
    targets = np.array([[0, 1, 0.3, 0.4, 0.25, 0.2], [0, 0, 0.7, 0.7, 0.3, 0.35]])
    raws, _ = _perfect_raws(targets)
    dets = D.postprocess(raws, ANCHORS, K, D.NmsConfig(conf_thresh=0.5, iou_thresh=0.45))[0]
    assert len(dets) == 2
    got = sorted((d.class_id, round(d.x1, 4), round(d.y1, 4)) for d in dets)
    want = sorted((int(t[1]), round((t[2] - t[4] / 2) * 64, 4), round((t[3] - t[5] / 2) * 64, 4)) for t in targets)
    assert got == want
