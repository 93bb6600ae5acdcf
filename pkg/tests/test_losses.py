import numpy as np
import pytest

from conftest import check_gradients, loop_conv2d, loop_conv3d
from mkrecon.difftensor import Tensor
from mkrecon.kernels import load_bank
from mkrecon.losses import (LOSS_LOG_HEADER, Stage1LossConfig,
                            Stage2LossConfig, depth_weight_map,
                            filtered_l1_loss, format_loss_line, l1_loss,
                            parse_loss_log, stage1_loss, stage1_loss_terms,
                            stage2_loss, stage2_loss_terms)

BANK2 = load_bank(2)
BANK3 = load_bank(3)


class TestL1:
    def test_identical_zero(self, rng):
        x = rng.random((8, 8))
        assert l1_loss(x, x).item() == 0.0

    def test_constant_difference(self):
        a = np.full((5, 5), 0.25)
        b = np.full((5, 5), 0.75)
        assert abs(l1_loss(a, b).item() - 0.5) < 1e-15

    def test_random_pair_direct_summation_golden(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        golden = float(np.abs(a - b).sum() / 256)
        assert abs(l1_loss(a, b).item() - golden) < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            l1_loss(np.zeros((2, 2)), np.zeros((3, 3)))


class TestFilteredL1:
    def test_identical_zero(self, rng):
        x = rng.random((8, 8))
        assert filtered_l1_loss(x, x, BANK2).item() == 0.0
        v = rng.random((6, 6, 6))
        assert filtered_l1_loss(v, v, BANK3).item() == 0.0

    def test_constant_shift_with_zero_sum_kernels(self, rng):
        from dataclasses import replace
        zs = [i for i, n in enumerate(BANK2.names) if n != "checkerboard"]
        sub = replace(
            BANK2,
            names=tuple(BANK2.names[i] for i in zs),
            raw_kernels=tuple(BANK2.raw_kernels[i] for i in zs),
            kernels=tuple(BANK2.kernels[i] for i in zs),
            raw_weights=tuple(BANK2.raw_weights[i] for i in zs),
            weights=tuple(BANK2.weights[i] for i in zs))
        x = rng.random((8, 8)) * 0.5
        assert filtered_l1_loss(x, x + 0.25, sub).item() < 1e-12

    def test_against_nested_loop_filter_oracle_2d(self, rng):
        pred, target = rng.random((8, 8)), rng.random((8, 8))
        golden = 0.0
        for _, kern, weight in BANK2:
            cp = loop_conv2d(pred, np.asarray(kern))
            ct = loop_conv2d(target, np.asarray(kern))
            golden += weight * float(np.mean(np.abs(cp - ct)))
        got = filtered_l1_loss(pred, target, BANK2).item()
        assert abs(got - golden) < 1e-14

    def test_against_nested_loop_filter_oracle_3d(self, rng):
        pred, target = rng.random((5, 5, 5)), rng.random((5, 5, 5))
        golden = 0.0
        for _, kern, weight in BANK3:
            cp = loop_conv3d(pred, np.asarray(kern))
            ct = loop_conv3d(target, np.asarray(kern))
            golden += weight * float(np.mean(np.abs(cp - ct)))
        got = filtered_l1_loss(pred, target, BANK3).item()
        assert abs(got - golden) < 1e-14

    def test_weight_map_cropped_to_valid_region(self, rng):
        pred, target = rng.random((8, 8)), rng.random((8, 8))
        wm = rng.random((8, 8)) + 0.5
        golden = 0.0
        for _, kern, weight in BANK2:
            cp = loop_conv2d(pred, np.asarray(kern))
            ct = loop_conv2d(target, np.asarray(kern))
            golden += weight * float(
                (wm[1:-1, 1:-1] * np.abs(cp - ct)).sum() / cp.size)
        got = filtered_l1_loss(pred, target, BANK2, wm).item()
        assert abs(got - golden) < 1e-14

    def test_input_smaller_than_kernel(self):
        with pytest.raises(ValueError, match="smaller"):
            filtered_l1_loss(np.zeros((2, 2)), np.zeros((2, 2)), BANK2)

    def test_symmetry(self, rng):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        assert filtered_l1_loss(a, b, BANK2).item() == \
            filtered_l1_loss(b, a, BANK2).item()


class TestStage1:
    def test_identical_zero(self, rng):
        x = rng.random((8, 8))
        assert stage1_loss(x, x, Stage1LossConfig()).item() == 0.0

    def test_degenerate_weights_reduce_to_l1(self, rng):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        cfg = Stage1LossConfig(lambda1=1.0, lambda2=0.0)
        assert stage1_loss(a, b, cfg).item() == l1_loss(a, b).item()

    def test_default_composition(self, rng):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        l1, fil, total = stage1_loss_terms(a, b, Stage1LossConfig())
        assert abs(l1.item() - l1_loss(a, b).item()) == 0.0
        assert abs(fil.item() - filtered_l1_loss(a, b, BANK2).item()) == 0.0
        assert abs(total.item() - (0.1 * l1.item() + 1.0 * fil.item())) < 1e-15

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            Stage1LossConfig(lambda1=-0.1)


class TestDepthWeightMap:
    def test_all_acquired_uniform(self):
        mask = np.ones(6, dtype=bool)
        wm = depth_weight_map(mask, (6, 4, 4), 2.0)
        assert np.array_equal(wm, np.ones((6, 4, 4)))

    def test_weight_one_uniform_regardless_of_mask(self):
        mask = np.zeros(6, dtype=bool)
        mask[[0, 3]] = True
        wm = depth_weight_map(mask, (6, 4, 4), 1.0)
        assert np.array_equal(wm, np.ones((6, 4, 4)))

    def test_nine_slice_arithmetic(self):
        # D=9, acquired {0, 8}, w_acq=2: slice mean is 11/9, so acquired
        # slices weigh 18/11 and the rest 9/11
        mask = np.zeros(9, dtype=bool)
        mask[[0, 8]] = True
        wm = depth_weight_map(mask, (9, 2, 3), 2.0)
        assert abs(wm[0, 0, 0] - 18 / 11) < 1e-12
        assert abs(wm[4, 1, 2] - 9 / 11) < 1e-12

    def test_mean_is_exactly_one(self, rng):
        for d in (5, 9, 17):
            mask = rng.random(d) < 0.4
            mask[[0, -1]] = True
            wm = depth_weight_map(mask, (d, 3, 4), 2.5)
            assert abs(wm.mean() - 1.0) < 1e-12

    def test_mask_length_mismatch(self):
        with pytest.raises(ValueError, match="mask length"):
            depth_weight_map(np.ones(5, dtype=bool), (6, 2, 2), 2.0)

    def test_w_acq_below_one_rejected(self):
        with pytest.raises(ValueError, match="w_acq"):
            depth_weight_map(np.ones(4, dtype=bool), (4, 2, 2), 0.5)


class TestStage2:
    MASK = np.array([True, False, False, False, True, False, False, False,
                     True, False, False, False, True, False, False, False])

    def test_identical_zero_every_epoch(self, rng):
        v = rng.random((16, 16, 16))
        cfg = Stage2LossConfig()
        for epoch in (0, 10, 49):
            assert stage2_loss(v, v, epoch, self.MASK, cfg).item() == 0.0

    def test_alpha2_schedule_values(self):
        cfg = Stage2LossConfig()
        assert cfg.alpha2(0) == 1.0
        assert abs(cfg.alpha2(10) - 0.84) < 1e-12
        assert abs(cfg.alpha2(49) - 0.216) < 1e-12
        assert cfg.alpha2(100) == 0.0
        with pytest.raises(ValueError):
            cfg.alpha2(-1)

    def test_alpha2_monotone_nonincreasing(self):
        cfg = Stage2LossConfig()
        trace = [cfg.alpha2(e) for e in range(120)]
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert min(trace) == 0.0

    def test_compositional_oracle_epoch0(self, rng):
        pred = rng.random((1, 16, 16, 16))
        target = rng.random((1, 16, 16, 16))
        cfg = Stage2LossConfig()
        wm = depth_weight_map(self.MASK, pred.shape, cfg.acquired_slice_weight)
        golden_l1 = float((wm * np.abs(pred - target)).sum() / pred.size)
        golden_fil = 0.0
        for _, kern, weight in BANK3:
            cp = loop_conv3d(pred[0], np.asarray(kern))
            ct = loop_conv3d(target[0], np.asarray(kern))
            wmm = wm[0, 1:-1, 1:-1, 1:-1]
            golden_fil += weight * float(
                (wmm * np.abs(cp - ct)).sum() / cp.size)
        golden = 0.25 * golden_l1 + 1.0 * golden_fil
        got = stage2_loss(pred, target, 0, self.MASK, cfg).item()
        assert abs(got - golden) < 1e-13

    def test_epoch_weight_applied(self, rng):
        pred = rng.random((8, 8, 8))
        target = rng.random((8, 8, 8))
        mask = np.zeros(8, dtype=bool)
        mask[[0, 4]] = True
        cfg = Stage2LossConfig()
        l1, fil, t0 = stage2_loss_terms(pred, target, 0, mask, cfg)
        _, _, t10 = stage2_loss_terms(pred, target, 10, mask, cfg)
        expect = 0.25 * l1.item() + 0.84 * fil.item()
        assert abs(t10.item() - expect) < 1e-13
        assert t10.item() < t0.item()

    def test_symmetry(self, rng):
        a, b = rng.random((8, 8, 8)), rng.random((8, 8, 8))
        mask = np.zeros(8, dtype=bool)
        mask[[0, 7]] = True
        cfg = Stage2LossConfig()
        assert stage2_loss(a, b, 3, mask, cfg).item() == \
            stage2_loss(b, a, 3, mask, cfg).item()


class TestLossGradients:
    def test_l1_gradcheck(self):
        for seed in range(10):
            r = np.random.default_rng(600 + seed)
            w = r.random((5, 5)) + 0.2
            check_gradients(
                lambda ts: l1_loss(ts["a"], ts["b"], w),
                {"a": r.random((5, 5)), "b": r.random((5, 5))})

    def test_filtered_2d_gradcheck(self):
        for seed in range(10):
            r = np.random.default_rng(700 + seed)
            check_gradients(
                lambda ts: filtered_l1_loss(ts["a"], ts["b"], BANK2),
                {"a": r.random((6, 6)), "b": r.random((6, 6))})

    def test_filtered_3d_gradcheck(self):
        for seed in range(10):
            r = np.random.default_rng(800 + seed)
            check_gradients(
                lambda ts: filtered_l1_loss(ts["a"], ts["b"], BANK3),
                {"a": r.random((4, 4, 4)), "b": r.random((4, 4, 4))})

    def test_stage1_gradcheck(self):
        cfg = Stage1LossConfig()
        for seed in range(10):
            r = np.random.default_rng(900 + seed)
            check_gradients(
                lambda ts: stage1_loss(ts["a"], ts["b"], cfg),
                {"a": r.random((6, 6)), "b": r.random((6, 6))})

    def test_stage2_gradcheck(self):
        cfg = Stage2LossConfig()
        mask = np.array([True, False, True, False, True])
        for seed in range(10):
            r = np.random.default_rng(1000 + seed)
            check_gradients(
                lambda ts: stage2_loss(ts["a"], ts["b"], seed % 5, mask, cfg),
                {"a": r.random((5, 5, 5)), "b": r.random((5, 5, 5))})


class TestLossLog:
    def test_round_trip(self):
        lines = [LOSS_LOG_HEADER,
                 format_loss_line(0, 0, 0.5, 0.25, 0.3),
                 format_loss_line(1, 0, 0.4, 0.2, 0.24)]
        rows = parse_loss_log("\n".join(lines))
        assert rows == [(0, 0, 0.5, 0.25, 0.3), (1, 0, 0.4, 0.2, 0.24)]

    def test_line_format(self):
        assert format_loss_line(3, 1, 0.1, 0.2, 0.21) == "3,1,0.1,0.2,0.21"
