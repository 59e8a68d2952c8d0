import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from afotad import autodiff as ad
from afotad.autodiff import NonFiniteError, Tensor, parameter
from afotad.rfam import RFAM, HeadOutput, ModelConfig
from afotad.training import (
    SGD, GroundTruthInstance, TargetMap, TrainConfig, assign_targets, batch_joint_loss,
    cls_loss, iou_loss, joint_loss, sgd_step,
)


def brute_force_assign(length, gts):
    """Exhaustive: look at every instance for every location."""
    labels, left, right = [], [], []
    for x in range(length):
        covering = [(abs(x - (g.start + g.end) / 2), i, g) for i, g in enumerate(gts) if g.start < x < g.end]
        if not covering:
            labels.append(0)
            left.append(0.0)
            right.append(0.0)
            continue
        _, _, g = min(covering, key=lambda t: (t[0], t[1]))
        labels.append(g.label)
        left.append(x - g.start)
        right.append(g.end - x)
    return labels, left, right


class TestAssign:
    def test_empty(self):
        tm = assign_targets(10, [])
        assert tm.num_pos == 0 and np.all(tm.labels == 0)

    def test_single_instance(self):
        tm = assign_targets(10, [GroundTruthInstance(1, 2.0, 6.0)])
        assert list(tm.positives) == [3, 4, 5]
        assert (tm.left[3], tm.right[3]) == (1.0, 3.0)

    def test_nearest_center(self):
        a, b = GroundTruthInstance(1, 0.0, 8.0), GroundTruthInstance(2, 5.0, 12.0)
        tm = assign_targets(14, [a, b])
        assert tm.labels[6] == 1
        labels, left, right = brute_force_assign(14, [a, b])
        assert list(tm.labels) == labels

    def test_tie_goes_to_earlier(self):
        a, b = GroundTruthInstance(1, 0.0, 8.0), GroundTruthInstance(2, 2.0, 6.0)
        # both centred on 4
        assert assign_targets(9, [a, b]).labels[4] == 1
        assert assign_targets(9, [b, a]).labels[4] == 2

    @given(st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 33))
        gts = []
        for _ in range(int(rng.integers(0, 4))):
            s = rng.uniform(-3, T)
            gts.append(GroundTruthInstance(int(rng.integers(1, 4)), s, s + rng.uniform(0.3, T / 2 + 1)))
        tm = assign_targets(T, gts)
        labels, left, right = brute_force_assign(T, gts)
        assert list(tm.labels) == labels
        np.testing.assert_array_equal(tm.left, left)
        np.testing.assert_array_equal(tm.right, right)
        assert np.all(tm.left[tm.positives] > 0) and np.all(tm.right[tm.positives] > 0)

    def test_disjoint_instances_cover_their_interiors(self):
        gts = [GroundTruthInstance(1, 1.5, 4.5), GroundTruthInstance(3, 6.0, 9.5)]
        tm = assign_targets(12, gts)
        assert list(tm.labels) == [0, 0, 1, 1, 1, 0, 0, 3, 3, 3, 0, 0]


class TestIoULoss:
    def test_perfect(self):
        assert iou_loss((2.0, 3.0), (2.0, 3.0)).item() == 0.0

    def test_half(self):
        assert iou_loss((1.0, 1.0), (2.0, 2.0)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_third(self):
        assert iou_loss((3.0, 1.0), (1.0, 3.0)).item() == pytest.approx(math.log(3), abs=1e-12)

    def test_empty_is_zero(self):
        assert iou_loss((np.zeros(0), np.zeros(0)), (np.zeros(0), np.zeros(0))).item() == 0.0

    pos = st.floats(0.01, 50.0)

    @given(pos, pos, pos, pos)
    def test_nonnegative_and_symmetric(self, l, r, lt, rt):
        v = iou_loss((l, r), (lt, rt)).item()
        assert v >= 0
        assert v == pytest.approx(iou_loss((lt, rt), (l, r)).item(), abs=1e-12)

    @given(pos, pos, pos, pos)
    def test_zero_iff_equal(self, l, r, lt, rt):
        assume((l, r) != (lt, rt))
        assume(abs(l - lt) + abs(r - rt) > 1e-6)
        assert iou_loss((l, r), (lt, rt)).item() > 0

    @given(pos, pos, pos, pos, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone_toward_target(self, l, r, lt, rt, a, b):
        lo, hi = sorted((a, b))
        step = lambda t: (l + t * (lt - l), r + t * (rt - r))
        assert iou_loss(step(hi), (lt, rt)).item() <= iou_loss(step(lo), (lt, rt)).item() + 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(0)
        l, r = parameter(rng.uniform(0.5, 5, 6)), parameter(rng.uniform(0.5, 5, 6))
        lt, rt = rng.uniform(0.5, 5, 6), rng.uniform(0.5, 5, 6)
        assert ad.grad_check(lambda l, r: iou_loss((l, r), (lt, rt)), [l, r]) < 1e-6

    def test_min_tie_routes_to_prediction(self):
        l, r = parameter([2.0]), parameter([1.0])
        ad.backward(iou_loss((l, r), ([2.0], [3.0])))
        # I = min(2,2) + 1 = 3, U = 3 + 5 - 3 = 5; dI/dl = 1, dU/dl = 0
        assert l.grad[0] == pytest.approx(-1 / 3)


class TestClsLoss:
    def test_uniform(self):
        tm = TargetMap(np.array([0, 1, 2, 1]), np.zeros(4), np.zeros(4))
        assert cls_loss(Tensor(np.zeros((3, 4))), tm).item() == pytest.approx(math.log(3), abs=1e-12)

    def test_large_margin(self):
        tm = TargetMap(np.array([2, 0]), np.zeros(2), np.zeros(2))
        logits = np.zeros((3, 2))
        logits[2, 0] = logits[0, 1] = 50.0
        assert cls_loss(Tensor(logits), tm).item() < 1e-20

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((3, 4))
        labels = np.array([0, 2, 1, 0])
        p = np.exp(logits) / np.exp(logits).sum(0)
        expected = -np.mean([math.log(p[labels[x], x]) for x in range(4)])
        tm = TargetMap(labels, np.zeros(4), np.zeros(4))
        assert cls_loss(Tensor(logits), tm).item() == pytest.approx(expected, abs=1e-12)


def random_head(rng, C=3, T=10):
    return HeadOutput(parameter(rng.standard_normal((C, T))), parameter(rng.standard_normal(T)),
                      parameter(rng.standard_normal(T)))


class TestJointLoss:
    def test_beta_zero(self):
        rng = np.random.default_rng(0)
        h = random_head(rng)
        tm = assign_targets(10, [GroundTruthInstance(1, 1.0, 6.0)])
        lb = joint_loss(h, Tensor(1.0), tm, beta=0.0)
        assert lb.total.item() == lb.loss_cls.item()
        assert lb.loss_loc.item() > 0

    def test_all_background(self):
        h = random_head(np.random.default_rng(1))
        lb = joint_loss(h, Tensor(1.0), assign_targets(10, []), beta=1.0)
        assert lb.loss_loc.item() == 0.0
        assert lb.total.item() == lb.loss_cls.item()

    def test_alpha_gradient(self):
        rng = np.random.default_rng(2)
        h = random_head(rng)
        tm = assign_targets(10, [GroundTruthInstance(1, 0.5, 4.2), GroundTruthInstance(2, 5.1, 9.7)])
        alpha = parameter(0.8)
        err = ad.grad_check(lambda a, *_: joint_loss(h, a, tm).total, [alpha, h.cls_logits, h.left, h.right])
        assert err < 1e-4

    def test_batch_pools_positives(self):
        rng = np.random.default_rng(3)
        h1, h2 = random_head(rng), random_head(rng)
        t1 = assign_targets(10, [GroundTruthInstance(1, 1.0, 3.0)])  # 1 positive
        t2 = assign_targets(10, [GroundTruthInstance(1, 1.0, 8.0)])  # 6 positives
        alpha = Tensor(1.0)
        lb = batch_joint_loss([h1, h2], alpha, [t1, t2])
        l1 = joint_loss(h1, alpha, t1).loss_loc.item()
        l2 = joint_loss(h2, alpha, t2).loss_loc.item()
        assert lb.loss_loc.item() == pytest.approx((1 * l1 + 6 * l2) / 7)
        assert lb.num_pos == 7

    def test_end_to_end_gradients_tiny_model(self):
        rng = np.random.default_rng(4)
        m = RFAM(ModelConfig(num_classes=3, in_channels=4, width=4, num_deformable=1), seed=0)
        for p in m.parameters():
            p.data[...] = rng.standard_normal(p.shape) * 0.3
        m.alpha.data[...] = 0.6
        feats = Tensor(rng.standard_normal((4, 16)))
        tm = assign_targets(8, [GroundTruthInstance(1, 0.4, 3.7), GroundTruthInstance(2, 3.2, 7.4)])
        err = ad.grad_check(lambda *ps: joint_loss(m(feats), m.alpha, tm).total, m.parameters(), max_coords=12)
        assert err < 1e-4


class TestSGD:
    def test_plain_gradient_descent(self):
        p, v = sgd_step([np.array([1.0, 2.0])], [np.array([0.5, -1.0])], [np.zeros(2)], 0.1, 0.0, 0.0)
        np.testing.assert_allclose(p[0], [0.95, 2.1])

    def test_momentum_carry(self):
        p, v = sgd_step([np.array([1.0])], [np.array([0.0])], [np.array([2.0])], 0.1, 0.9, 0.0)
        np.testing.assert_allclose(p[0], [1.0 - 0.1 * 0.9 * 2.0])

    def test_object_matches_functional(self):
        rng = np.random.default_rng(0)
        w = parameter(rng.standard_normal(3))
        opt = SGD({"w": w}, 0.9, 5e-4)
        ps, vs = [w.data.copy()], [np.zeros(3)]
        for _ in range(3):
            g = rng.standard_normal(3)
            w.grad = g.copy()
            opt.step(0.01)
            ps, vs = sgd_step(ps, [g], vs, 0.01, 0.9, 5e-4)
        np.testing.assert_allclose(w.data, ps[0], atol=1e-15)

    def test_quadratic_bowl_converges(self):
        target = np.array([3.0, -1.0, 0.5])
        w = parameter(np.zeros(3))
        opt = SGD({"w": w}, momentum=0.9, weight_decay=0.0)
        for _ in range(200):
            opt.zero_grad()
            d = w - Tensor(target)
            ad.backward(ad.scale(ad.sum(ad.mul(d, d)), 0.5))
            opt.step(0.1)
        # heavy-ball contraction is sqrt(0.9) per step: ~3e-5 after 200 steps
        np.testing.assert_allclose(w.data, target, atol=1e-4)

    def test_nan_gradient_rejected(self):
        w = parameter(np.zeros(2))
        w.grad = np.array([np.nan, 0.0])
        before = w.data.copy()
        with pytest.raises(NonFiniteError, match="w"):
            SGD({"w": w}).step(0.1)
        np.testing.assert_array_equal(w.data, before)


class TestTrainConfig:
    def test_schedule(self):
        cfg = TrainConfig(lr=1.0, lr_decay=0.9, lr_step=10)
        assert cfg.lr_at(9) == 1.0 and cfg.lr_at(10) == pytest.approx(0.9) and cfg.lr_at(25) == pytest.approx(0.81)

    def test_round_trip_and_unknown_keys(self):
        cfg = TrainConfig(model=ModelConfig.variant(num_deformable=1), lr=0.01)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"bogus": 1})

    def test_reference_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.beta) == (0.0006, 0.9, 0.0005, 4, 1.0)


def test_fifty_steps_on_one_clip_decrease_loss():
    from afotad.engine import build_training_clips, train
    from afotad.synthdata import SynthSpec, generate

    ds = generate(SynthSpec(seed=0, num_train=2, num_test=0, channels=8))
    cfg = TrainConfig(model=ModelConfig(in_channels=8, width=16), iterations=50, batch_size=1, log_every=0)
    clips = build_training_clips(ds, cfg)[:1]
    hist = train(ds, cfg, clips=clips).history
    first, last = hist[0][1] + hist[0][2], hist[-1][1] + hist[-1][2]
    assert last < first
