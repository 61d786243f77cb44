import numpy as np
import pytest

from diffdepth import losses as L
from diffdepth.losses import LossReport, LossWeights
from diffdepth.networks import Refiner
from diffdepth.tensor import Tensor, grad_check

SEEDS = range(20)

# constant images 0.2 vs 0.4: SSIM = (2*0.2*0.4 + C1) / (0.2^2 + 0.4^2 + C1)
SSIM_CONST = (0.16 + 1e-4) / (0.20 + 1e-4)
PH_CONST = 0.85 * (1 - SSIM_CONST) / 2 + 0.15 * 0.2


def img(rng, shape=(1, 3, 8, 8)):
    return rng.uniform(0.1, 0.9, size=shape)


def worst_rel_error(build, f, tol):
    worst = 0.0
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        rep = grad_check(f, [Tensor(a) for a in build(r)], tol=tol, rng=r)
        worst = max(worst, rep.max_rel_error)
    return worst


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.ph_ssim, w.ph_l1, w.mask_lambda) == (0.85, 0.15, 1.5)
        assert (w.nis_pair, w.nis_anchor) == (0.5, 1.0)
        assert (w.feat_pair, w.feat_anchor, w.img_anchor, w.img_pair) == (1.0, 0.5, 1.0, 0.5)
        assert (w.edge, w.multilevel) == (1e-3, 0.5)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(edge=-1.0)

    def test_dict_round_trip_and_unknown_keys(self):
        w = LossWeights(multilevel=0.0)
        assert LossWeights.from_dict(w.to_dict()) == w
        with pytest.raises(ValueError):
            LossWeights.from_dict({"gamma": 1.0})


class TestPhotometric:
    def test_identical_images_give_zero(self, rng):
        a = Tensor(img(rng))
        np.testing.assert_allclose(L.photometric_map(a, a).data, 0.0, atol=1e-12)

    def test_constant_image_ssim(self):
        a = Tensor(np.full((1, 1, 5, 5), 0.2))
        b = Tensor(np.full((1, 1, 5, 5), 0.4))
        np.testing.assert_allclose(L.ssim(a, b).data, SSIM_CONST, rtol=1e-12)
        assert SSIM_CONST == pytest.approx(0.80010, abs=5e-6)
        np.testing.assert_allclose(L.photometric_map(a, b).data, PH_CONST, rtol=1e-12)

    def test_empty_mask_gives_zero(self, rng):
        a, b = Tensor(img(rng)), Tensor(img(rng))
        assert L.photometric_loss(a, [(b, np.zeros((1, 1, 8, 8)))]).item() == 0.0

    def test_minimum_over_aux_frames(self, rng):
        target = Tensor(img(rng))
        good = Tensor(target.data + 0.01)
        bad = Tensor(img(rng))
        ones = np.ones((1, 1, 8, 8))
        pm, _ = L.min_photometric(target, [(good, ones), (bad, ones)])
        np.testing.assert_allclose(pm.data, np.minimum(L.photometric_map(target, good).data, L.photometric_map(target, bad).data))

    def test_invalid_frame_is_skipped_in_minimum(self, rng):
        target = Tensor(img(rng))
        a, b = Tensor(img(rng)), Tensor(target.data.copy())
        mask_b = np.ones((1, 1, 8, 8))
        mask_b[..., :4] = 0
        pm, valid = L.min_photometric(target, [(a, np.ones((1, 1, 8, 8))), (b, mask_b)])
        np.testing.assert_allclose(pm.data[..., :4], L.photometric_map(target, a).data[..., :4])
        assert valid.all()

    def test_gradient(self):
        def build(r):
            return [img(r), img(r)]

        worst = worst_rel_error(build, lambda a, b: L.photometric_loss(a, [(b, np.ones((1, 1, 8, 8)))]), 1e-3)
        assert worst < 1e-3, worst


class TestAdaptiveMask:
    def test_first_epoch_keeps_moderate_error(self):
        assert L.adaptive_mask(np.array([0.3]), epoch=1)[0] == 1

    def test_late_epoch_threshold(self):
        assert 1.5 / 30 == pytest.approx(0.05)
        assert L.adaptive_mask(np.array([0.06]), epoch=30)[0] == 0
        assert L.adaptive_mask(np.array([0.04]), epoch=30)[0] == 1

    def test_threshold_is_strict(self):
        assert L.adaptive_mask(np.array([0.5]), epoch=3)[0] == 0

    def test_min_over_frames(self):
        m = L.adaptive_mask([np.array([0.9, 0.02]), np.array([0.01, 0.9])], epoch=10)
        np.testing.assert_array_equal(m, [1, 1])

    def test_rejects_epoch_zero(self):
        with pytest.raises(ValueError):
            L.adaptive_mask(np.array([0.1]), epoch=0)


class TestBerhu:
    def test_zero(self):
        assert L.berhu(Tensor(np.zeros(3)), c=0.2).data.sum() == 0.0

    def test_continuity_at_threshold(self):
        c = 0.3
        below = L.berhu(Tensor([c]), c=c).item()
        quad = (c * c + c * c) / (2 * c)
        assert below == pytest.approx(c, abs=1e-15) and quad == pytest.approx(c, abs=1e-15)
        assert L.berhu(Tensor([c + 1e-12]), c=c).item() == pytest.approx(c, abs=1e-11)

    def test_quadratic_branch(self):
        assert L.berhu(Tensor([0.5]), c=0.2).item() == pytest.approx(0.725, abs=1e-15)

    def test_threshold_floor(self):
        assert L.berhu_threshold(np.zeros(4)) == 1e-8

    def test_rejects_nonpositive_threshold(self):
        with pytest.raises(ValueError):
            L.berhu(Tensor([1.0]), c=0.0)


class TestDistill:
    def test_equal_depths_give_zero(self, rng):
        d = rng.uniform(size=(1, 1, 4, 4))
        assert L.distill_loss(Tensor(d), d, np.ones_like(d)).item() == 0.0

    def test_empty_mask_gives_zero(self, rng):
        a, b = rng.uniform(size=(2, 1, 1, 4, 4))
        assert L.distill_loss(Tensor(a), b, np.zeros_like(a)).item() == 0.0

    def test_uniform_error_value(self):
        t = np.full((1, 1, 4, 4), 0.2)
        out = L.distill_loss(Tensor(t + 0.5), t, np.ones_like(t))
        assert out.item() == pytest.approx(1.3, abs=1e-12)

    def test_plain_l1_when_disabled(self, rng):
        a, b = rng.uniform(size=(2, 1, 1, 4, 4))
        assert L.distill_loss(Tensor(a), b, None, use_berhu=False).item() == pytest.approx(np.abs(a - b).mean(), abs=1e-15)

    def test_teacher_gets_no_gradient(self, rng):
        s = Tensor(rng.uniform(size=(1, 1, 4, 4)), requires_grad=True)
        t = Tensor(rng.uniform(size=(1, 1, 4, 4)), requires_grad=True)
        L.distill_loss(s, t, np.ones((1, 1, 4, 4))).backward()
        assert s.grad is not None and t.grad is None

    def test_gradient_with_pinned_threshold(self):
        def build(r):
            return [r.uniform(size=(1, 1, 6, 6))]

        teacher = {}

        def f(d):
            key = d.shape
            if key not in teacher:
                teacher[key] = np.random.default_rng(99).uniform(size=key)
            m = (np.random.default_rng(98).uniform(size=key) < 0.7).astype(float)
            return L.distill_loss(d, teacher[key], m, c=0.25)

        assert worst_rel_error(build, f, 1e-3) < 1e-3


class TestTrinityNoise:
    def test_trinity_point_is_zero(self, rng):
        e = rng.normal(size=(2, 1, 4, 4))
        assert L.trinity_noise(Tensor(e), Tensor(e.copy()), e).item() == 0.0

    def test_perturbed_aug_branch(self, rng):
        e = rng.normal(size=(2, 1, 4, 4))
        delta = rng.normal(size=e.shape)
        out = L.trinity_noise(Tensor(e + delta), Tensor(e), e).item()
        assert out == pytest.approx(1.5 * np.mean(delta**2), rel=1e-12)

    def test_symmetry(self):
        for seed in SEEDS:
            r = np.random.default_rng(seed)
            a, b, e = r.normal(size=(3, 2, 1, 4, 4))
            assert abs(L.trinity_noise(Tensor(a), Tensor(b), e).item() - L.trinity_noise(Tensor(b), Tensor(a), e).item()) <= 1e-12

    def test_modes(self, rng):
        a, b, e = rng.normal(size=(3, 1, 1, 4, 4))
        pair = np.mean((a - b) ** 2)
        anchor = np.mean((a - e) ** 2) + np.mean((b - e) ** 2)
        assert L.trinity_noise(Tensor(a), Tensor(b), e, mode="distill").item() == pytest.approx(anchor)
        assert L.trinity_noise(Tensor(a), Tensor(b), e, mode="contrast").item() == pytest.approx(0.5 * pair)
        with pytest.raises(ValueError):
            L.trinity_noise(Tensor(a), Tensor(b), e, mode="kl")

    def test_sampled_noise_gets_no_gradient(self, rng):
        a = Tensor(rng.normal(size=(4,)), requires_grad=True)
        e = Tensor(rng.normal(size=(4,)), requires_grad=True)
        L.trinity_noise(a, Tensor(rng.normal(size=(4,))), e).backward()
        assert e.grad is None

    def test_gradient(self):
        e = np.random.default_rng(50).normal(size=(1, 1, 4, 4))
        build = lambda r: [r.normal(size=(1, 1, 4, 4)), r.normal(size=(1, 1, 4, 4))]  # noqa: E731
        assert worst_rel_error(build, lambda a, b: L.trinity_noise(a, b, e), 1e-3) < 1e-3

    def test_ddim_loss_gradient(self):
        e = np.random.default_rng(51).normal(size=(2, 1, 4, 4))
        build = lambda r: [r.normal(size=(2, 1, 4, 4))]  # noqa: E731
        assert worst_rel_error(build, lambda a: L.ddim_loss(a, e), 1e-3) < 1e-3


class TestTrinityFeature:
    def test_all_equal_gives_zero(self, rng):
        f = rng.normal(size=(1, 1, 4, 4))
        assert L.trinity_feature(Tensor(f), Tensor(f.copy()), f).item() == 0.0

    def test_aug_offset(self, rng):
        f = rng.normal(size=(1, 1, 4, 4))
        delta = rng.normal(size=f.shape)
        out = L.trinity_feature(Tensor(f), Tensor(f + delta), f).item()
        assert out == pytest.approx(1.5 * np.mean(np.abs(delta)), rel=1e-12)

    def test_teacher_offset(self, rng):
        f = rng.normal(size=(1, 1, 4, 4))
        delta = rng.normal(size=f.shape)
        out = L.trinity_feature(Tensor(f), Tensor(f.copy()), f + delta).item()
        assert out == pytest.approx(np.mean(np.abs(delta)), rel=1e-12)

    def test_gradient(self):
        ft = np.random.default_rng(52).normal(size=(1, 1, 4, 4))
        build = lambda r: [r.normal(size=(1, 1, 4, 4)), r.normal(size=(1, 1, 4, 4))]  # noqa: E731
        assert worst_rel_error(build, lambda a, b: L.trinity_feature(a, b, ft), 1e-3) < 1e-3


class TestTrinityImage:
    def test_identity_refinements_give_zero(self, rng):
        i = img(rng)
        assert L.trinity_image(Tensor(i), Tensor(i.copy()), i).item() == 0.0

    def test_aug_offset(self, rng):
        i = img(rng)
        delta = rng.normal(size=i.shape) * 0.1
        out = L.trinity_image(Tensor(i + delta), Tensor(i), i).item()
        assert out == pytest.approx(1.5 * np.mean(np.abs(delta)), rel=1e-12)

    def test_zero_refiner_on_clear_pair(self, rng):
        i = Tensor(img(rng))
        ref = Refiner(rng)
        assert L.trinity_image(ref(i), ref(i), i).item() == 0.0

    def test_gradient(self):
        clear = np.random.default_rng(53).uniform(size=(1, 3, 4, 4))
        build = lambda r: [r.uniform(size=(1, 3, 4, 4)), r.uniform(size=(1, 3, 4, 4))]  # noqa: E731
        assert worst_rel_error(build, lambda a, b: L.trinity_image(a, b, clear), 1e-3) < 1e-3


class TestEdgeSmoothness:
    def test_constant_depth_gives_zero(self, rng):
        assert L.edge_aware_smoothness(Tensor(np.full((1, 1, 4, 4), 3.0)), img(rng, (1, 3, 4, 4))).item() == 0.0

    def test_ramp_on_constant_image(self):
        d = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)
        out = L.edge_aware_smoothness(Tensor(d), np.full((1, 3, 1, 4), 0.5)).item()
        assert out == pytest.approx(1.0 / 2.5, rel=1e-12)

    def test_scale_invariance(self, rng):
        d = rng.uniform(1, 5, size=(1, 1, 6, 6))
        i = img(rng, (1, 3, 6, 6))
        a = L.edge_aware_smoothness(Tensor(d), i).item()
        b = L.edge_aware_smoothness(Tensor(7.3 * d), i).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_rejects_nonpositive_mean(self):
        with pytest.raises(ValueError):
            L.edge_aware_smoothness(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 3, 2, 2)))

    def test_gradient(self):
        i = np.random.default_rng(54).uniform(size=(1, 3, 5, 5))
        build = lambda r: [r.uniform(1.0, 3.0, size=(1, 1, 5, 5))]  # noqa: E731
        assert worst_rel_error(build, lambda d: L.edge_aware_smoothness(d, i), 1e-3) < 1e-3


class TestStageComposition:
    def test_all_zero(self):
        parts = {k: 0.0 for k in L.LOSS_TERMS}
        assert L.compose_stage(1, parts) == 0.0 and L.compose_stage(2, parts) == 0.0

    def test_stage1_arithmetic(self):
        parts = dict(nis=1.0, dis=1.0, ph=1.0, edge=1.0)
        assert L.compose_stage(1, parts) == pytest.approx(3.001, abs=1e-15)

    def test_stage2_arithmetic(self):
        parts = dict(nis=1.0, dis=1.0, ph=1.0, edge=1.0, feat=1.0, img=1.0)
        assert L.compose_stage(2, parts) == pytest.approx(4.001, abs=1e-15)

    def test_stage2_minus_stage1(self, rng):
        parts = dict(zip(L.LOSS_TERMS, rng.uniform(size=6)))
        diff = L.compose_stage(2, parts) - L.compose_stage(1, parts)
        assert diff == pytest.approx(0.5 * (parts["feat"] + parts["img"]), abs=1e-15)

    def test_bootstrap_weight_scales_noise_term_only(self):
        parts = dict(nis=2.0, dis=0.0, ph=0.5, edge=10.0)
        w = LossWeights(bootstrap_nis=0.25)
        assert L.compose_stage(0, parts, w) == pytest.approx(0.5 + 0.5 + 0.01, abs=1e-15)
        assert L.compose_stage(1, parts, w) == pytest.approx(2.0 + 0.5 + 0.01, abs=1e-15)

    def test_missing_part_raises(self):
        with pytest.raises(KeyError):
            L.compose_stage(2, dict(nis=1.0, dis=1.0, ph=1.0, edge=1.0))
        with pytest.raises(ValueError):
            L.compose_stage(3, {})

    def test_report_total_is_recomputable(self, rng):
        parts = {k: Tensor(v) for k, v in zip(L.LOSS_TERMS, rng.uniform(size=6))}
        total, rep = L.stage_loss(2, parts)
        assert isinstance(rep, LossReport)
        assert rep.recompute_total(LossWeights()) == pytest.approx(rep.total, abs=1e-15)
        assert rep.as_row()["total"] == total.item()
