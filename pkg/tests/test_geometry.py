import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powerdet.geometry import (
    Box,
    Detection,
    ImageDims,
    LabeledBox,
    average_precision,
    ciou_grad_terms_array,
    ciou_loss,
    ciou_loss_array,
    ciou_terms,
    iou,
    iou_array,
    loss_grad,
    loss_grad_array,
    loss_grad_terms,
    mean_ap,
    mpdiou,
    mpdiou_array,
    mpdiou_loss,
    mpdiou_loss_array,
    nms,
    per_class_ap,
    precision_recall,
)
from oracles import (
    brute_force_ap,
    central_diff,
    random_box_pairs,
    raster_iou,
    rel_err,
    scripted_ciou,
    scripted_mpdiou,
)

A = Box(0, 0, 2, 2)
B = Box(1, 1, 3, 3)


class TestIoU:
    def test_identity(self):
        assert iou(A, A) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_partial_overlap_matches_raster(self):
        assert abs(raster_iou(A.as_tuple(), B.as_tuple()) - 1 / 7) < 1e-3
        assert iou(A, B) == pytest.approx(1 / 7, abs=1e-12)

    def test_degenerate_is_zero(self):
        assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0
        assert iou(Box(0, 0, 0, 5), Box(0, 0, 2, 2)) == 0.0

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            Box(2, 0, 1, 1)

    def test_raster_oracle_random(self):
        rng = np.random.default_rng(7)
        p, g = random_box_pairs(rng, 30, 3.0, 3.0)
        ours = iou_array(p, g)
        for k in range(len(p)):
            assert abs(ours[k] - raster_iou(p[k], g[k])) < 1e-3


box_coord = st.floats(0, 50, allow_nan=False)


@st.composite
def boxes(draw, max_xy=50.0):
    x1 = draw(st.floats(0, max_xy - 1))
    y1 = draw(st.floats(0, max_xy - 1))
    x2 = draw(st.floats(x1 + 0.5, max_xy))
    y2 = draw(st.floats(y1 + 0.5, max_xy))
    return Box(x1, y1, x2, y2)


class TestInvariants:
    @given(boxes(), boxes())
    def test_iou_symmetric(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert iou(a, a) == pytest.approx(1.0)

    @given(boxes(), boxes())
    def test_ciou_range(self, p, g):
        loss = ciou_loss(p, g)
        assert 0.0 <= loss < 3.0

    @given(boxes(), boxes())
    def test_mpdiou_range_and_loss(self, a, b):
        dims = ImageDims(50, 50)
        m = mpdiou(a, b, dims)
        assert -2.0 <= m <= 1.0
        assert mpdiou_loss(a, b, dims) == 1.0 - m

    @given(boxes(max_xy=30.0), boxes(max_xy=30.0), st.floats(0, 20), st.floats(0, 20))
    def test_translation_covariance(self, a, b, dx, dy):
        dims = ImageDims(50, 50)
        ta, tb = a.translate(dx, dy), b.translate(dx, dy)
        assert iou(ta, tb) == pytest.approx(iou(a, b), abs=1e-9)
        assert mpdiou(ta, tb, dims) == pytest.approx(mpdiou(a, b, dims), abs=1e-9)

    @given(boxes())
    def test_zero_iff_identical(self, a):
        assert ciou_loss(a, a) == 0.0
        assert mpdiou(a, a, ImageDims(50, 50)) == 1.0


class TestCIoU:
    def test_identical(self):
        assert ciou_loss(A, A) == 0.0

    def test_square_pair(self):
        t = ciou_terms(A, B)
        assert t.v == 0.0
        assert ciou_loss(A, B) == pytest.approx(1 - 1 / 7 + 2 / 18, abs=1e-12)
        assert ciou_loss(A, B) == pytest.approx(0.968254, abs=1e-6)

    def test_aspect_pair(self):
        t = ciou_terms(Box(0, 0, 2, 1), Box(0, 0, 1, 2))
        v = 4 / math.pi**2 * (math.atan(2) - math.atan(0.5)) ** 2
        assert t.iou == pytest.approx(1 / 3)
        assert t.v == pytest.approx(v, abs=1e-15)
        assert t.v == pytest.approx(0.167826, abs=1e-6)
        assert t.alpha_w == pytest.approx(v / (1 - 1 / 3 + v), abs=1e-15)
        assert t.rho_sq == pytest.approx(0.5) and t.c_sq == pytest.approx(8.0)
        assert t.loss == pytest.approx(0.762918, abs=1e-6)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            ciou_loss(Box(0, 0, 2, 0), A)
        with pytest.raises(ValueError, match="degenerate"):
            ciou_loss(A, Box(0, 0, 0, 1))

    def test_matches_scripted(self):
        rng = np.random.default_rng(3)
        p, g = random_box_pairs(rng, 200, 64, 48)
        ours = ciou_loss_array(p, g)
        ref = [scripted_ciou(p[k], g[k]) for k in range(len(p))]
        assert np.max(np.abs(ours - ref)) < 1e-9


class TestMPDIoU:
    dims = ImageDims(10, 10)

    def test_identical(self):
        assert mpdiou(A, A, self.dims) == 1.0
        assert mpdiou_loss(A, A, self.dims) == 0.0

    def test_overlap_pair(self):
        assert mpdiou(A, B, self.dims) == pytest.approx(1 / 7 - 2 / 200 - 2 / 200, abs=1e-12)
        assert mpdiou(A, B, self.dims) == pytest.approx(0.122857, abs=1e-6)
        assert mpdiou_loss(A, B, self.dims) == pytest.approx(0.877143, abs=1e-6)

    def test_far_corners(self):
        a, b = Box(0, 0, 1, 1), Box(9, 9, 10, 10)
        assert mpdiou(a, b, self.dims) == pytest.approx(-1.62, abs=1e-12)
        assert mpdiou_loss(a, b, self.dims) == pytest.approx(2.62, abs=1e-12)

    def test_out_of_bounds(self):
        with pytest.raises(ValueError, match="outside"):
            mpdiou(Box(0, 0, 11, 2), A, self.dims)

    def test_matches_scripted(self):
        rng = np.random.default_rng(4)
        p, g = random_box_pairs(rng, 200, 64, 48)
        ours = mpdiou_array(p, g, 64, 48)
        ref = [scripted_mpdiou(p[k], g[k], 64, 48) for k in range(len(p))]
        assert np.max(np.abs(ours - ref)) < 1e-9


class TestGradients:
    def test_mpdiou_at_match_only_iou_term(self):
        terms = loss_grad_terms("mpdiou", A, A, ImageDims(10, 10))
        assert np.all(terms["corners"] == 0.0)
        assert np.any(terms["iou"] != 0.0)

    @pytest.mark.parametrize("kind", ["ciou", "mpdiou"])
    def test_seed42_pair_finite_difference(self, kind):
        rng = np.random.default_rng(42)
        p, g = random_box_pairs(rng, 1, 1.0, 1.0)
        dims = ImageDims(1.0, 1.0)
        analytic = loss_grad(kind, Box(*p[0]), Box(*g[0]), dims)
        f = (lambda x: scripted_ciou(x, g[0])) if kind == "ciou" else (lambda x: 1 - scripted_mpdiou(x, g[0], 1, 1))
        assert rel_err(analytic, central_diff(f, p[0], 1e-5)) < 1e-4

    def test_equal_aspect_v_term_vanishes(self):
        pred, gt = Box(0.1, 0.1, 0.3, 0.3), Box(0.4, 0.5, 0.8, 0.9)
        assert np.all(loss_grad_terms("ciou", pred, gt)["aspect"] == 0.0)
        corners = loss_grad_terms("mpdiou", pred, gt, ImageDims(1, 1))["corners"]
        assert np.all(corners != 0.0)

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(5)
        p, g = random_box_pairs(rng, 20, 30, 30)
        batch = loss_grad_array("ciou", p, g)
        for k in range(20):
            np.testing.assert_array_equal(batch[k], loss_grad("ciou", Box(*p[k]), Box(*g[k])))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown box loss"):
            loss_grad("giou", A, B)

    def test_terms_sum_to_total(self):
        terms = ciou_grad_terms_array(np.array([0, 0, 2, 1.0]), np.array([0.5, 0, 1, 2.0]))
        total = loss_grad_array("ciou", np.array([0, 0, 2, 1.0]), np.array([0.5, 0, 1, 2.0]))
        np.testing.assert_allclose(sum(terms.values()), total)


def det(box, cls, conf):
    return Detection(Box(*box), cls, conf)


class TestNMS:
    def test_single(self):
        d = det((0, 0, 1, 1), 0, 0.5)
        assert nms([d], 0.45) == [d]

    def test_empty(self):
        assert nms([], 0.5) == []

    def test_same_class_duplicates(self):
        hi, lo = det((0, 0, 2, 2), 1, 0.9), det((0, 0, 2, 2), 1, 0.8)
        assert nms([lo, hi], 0.45) == [hi]

    def test_classwise(self):
        a, b = det((0, 0, 2, 2), 1, 0.9), det((0, 0, 2, 2), 2, 0.8)
        assert nms([a, b], 0.45) == [a, b]

    def test_tie_order(self):
        a, b, c = det((0, 0, 1, 1), 3, 0.5), det((5, 5, 6, 6), 1, 0.5), det((8, 8, 9, 9), 1, 0.5)
        assert nms([a, b, c], 0.5) == [b, c, a]

    def test_properties_random(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = rng.integers(1, 25)
            p, _ = random_box_pairs(rng, n, 20, 20)
            dets = [det(p[k], int(rng.integers(0, 5)), float(rng.uniform())) for k in range(n)]
            kept = nms(dets, 0.4)
            assert all(k in dets for k in kept)
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    if a.class_id == b.class_id:
                        assert iou(a.box, b.box) <= 0.4


class TestAP:
    def test_perfect(self):
        gts = [LabeledBox(Box(0, 0, 2, 2), c) for c in range(5)]
        dets = [Detection(g.box, g.class_id, 1.0) for g in gts]
        aps = per_class_ap([dets], [gts])
        assert all(v == 1.0 for v in aps.values())
        assert mean_ap(aps) == 1.0

    def test_no_predictions(self):
        assert average_precision([[]], [[Box(0, 0, 1, 1)]]) == 0.0

    def test_tp_then_fp(self):
        gt = [Box(0, 0, 2, 2)]
        dets = [det((0, 0, 2, 2), 0, 0.9), det((5, 5, 7, 7), 0, 0.8)]
        assert average_precision([dets], [gt]) == 1.0

    def test_fp_then_tp(self):
        gt = [Box(0, 0, 2, 2)]
        dets = [det((0, 0, 2, 2), 0, 0.8), det((5, 5, 7, 7), 0, 0.9)]
        assert average_precision([dets], [gt]) == 0.5

    def test_undefined_class_excluded(self):
        with pytest.warns(UserWarning, match="undefined"):
            m = mean_ap({0: 1.0, 1: float("nan"), 2: 0.5})
        assert m == 0.75

    def test_matches_brute_force(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            dets, gts, ref_d, ref_g = random_instance(rng)
            ours, ref = average_precision(dets, gts), brute_force_ap(ref_d, ref_g)
            assert ours == ref or (math.isnan(ours) and math.isnan(ref))

    def test_precision_recall_empty(self):
        assert precision_recall([[]], [[LabeledBox(Box(0, 0, 1, 1), 0)]]) == (0.0, 0.0)


def random_instance(rng, max_boxes=20, n_images=3):
    """Random single-class detections/GT spread over a few images, plus oracle-format copies."""
    n_gt = int(rng.integers(0, max_boxes // 2 + 1))
    n_det = int(rng.integers(0, max_boxes - n_gt + 1))
    gts = [[] for _ in range(n_images)]
    dets = [[] for _ in range(n_images)]
    ref_g, ref_d = [], []
    centres = rng.uniform(0, 10, (n_gt, 2))
    for k in range(n_gt):
        img = int(rng.integers(0, n_images))
        x, y = centres[k]
        b = Box(x, y, x + rng.uniform(1, 3), y + rng.uniform(1, 3))
        gts[img].append(b)
        ref_g.append((img, b.as_tuple()))
    for k in range(n_det):
        img = int(rng.integers(0, n_images))
        if gts[img] and rng.uniform() < 0.6:
            g = gts[img][int(rng.integers(0, len(gts[img])))]
            jit = rng.normal(0, 0.3, 4)
            x1, y1 = g.x1 + jit[0], g.y1 + jit[1]
            b = Box(x1, y1, max(x1 + 0.1, g.x2 + jit[2]), max(y1 + 0.1, g.y2 + jit[3]))
        else:
            x, y = rng.uniform(0, 10, 2)
            b = Box(x, y, x + rng.uniform(1, 3), y + rng.uniform(1, 3))
        conf = float(np.round(rng.uniform(), 1))  # coarse values force confidence ties
        dets[img].append(Detection(b, 0, conf))
    for img in range(n_images):
        for d in dets[img]:
            ref_d.append((img, d.box.as_tuple(), d.confidence))
    return dets, gts, ref_d, ref_g
