"""Tiling coverage, overlap averaging, bundle validation, distill/finetune mechanics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxanom.autodiff import Tensor
from voxanom.density import DensityTrainConfig, fit_density
from voxanom.pipeline import (
    AnomalyMap,
    BundleError,
    DistillConfig,
    FinetuneConfig,
    ScoreBundle,
    bce_loss,
    distill,
    finetune_segmentation,
    infer_anomaly_map,
    load_bundle,
    load_student,
    predict_probability_map,
    predict_student_map,
    soft_dice_loss,
    tile_volume,
)
from voxanom.ssl import SslConfig, train_condition, train_descriptor
from voxanom.synth import GenConfig, gen_dataset, gen_normal_volume, inject_anomalies
from voxanom.views import AugmentConfig

from conftest import gradcheck


class TestTileVolume:
    def test_exact_tiling(self):
        grid = tile_volume((64, 64, 64), (32, 32, 32), (32, 32, 32))
        assert len(grid.origins) == 8
        cover = np.zeros((64, 64, 64), dtype=int)
        for o in grid.origins:
            cover[o[0] : o[0] + 32, o[1] : o[1] + 32, o[2] : o[2] + 32] += 1
        assert np.all(cover == 1)

    def test_half_stride_counts(self):
        grid = tile_volume((64, 64, 64), (32, 32, 32), (16, 16, 16))
        assert len(grid.origins) == 27
        cover = np.zeros((64, 64, 64), dtype=int)
        for o in grid.origins:
            cover[o[0] : o[0] + 32, o[1] : o[1] + 32, o[2] : o[2] + 32] += 1
        assert cover.min() == 1 and cover.max() == 8

    def test_clamped_final_origin(self):
        grid = tile_volume((40, 40, 40), (32, 32, 32), (32, 32, 32))
        per_axis = sorted({o[0] for o in grid.origins})
        assert per_axis == [0, 8]

    def test_patch_larger_than_volume_errors(self):
        with pytest.raises(ValueError, match="exceeds"):
            tile_volume((16, 64, 64), (32, 32, 32), (16, 16, 16))

    @given(st.integers(8, 40), st.integers(2, 12), st.integers(1, 12))
    @settings(max_examples=60, deadline=None)
    def test_full_coverage_property(self, extent, patch, stride):
        patch = min(patch, extent)
        stride = min(stride, patch)
        grid = tile_volume((extent, 8, 8), (patch, 8, 8), (stride, 8, 8))
        cover = np.zeros(extent, dtype=int)
        for o in grid.origins:
            cover[o[0] : o[0] + patch] += 1
        assert cover.min() >= 1

    def test_gap_inducing_stride_rejected(self):
        with pytest.raises(ValueError, match="gaps"):
            tile_volume((16, 16, 16), (4, 4, 4), (6, 6, 6))


class _ConstantDensity:
    """Stub density model: constant NLL everywhere."""

    def __init__(self, value: float):
        self.value = value

    def nll_map_tensor(self, y_map, c_map=None):
        b, _, d, h, w = y_map.shape
        return Tensor(np.full((b, d, h, w), self.value, dtype=np.float32))


SMOKE_GEN = GenConfig(extents=(48, 48, 48), min_patch=(16, 16, 16), seed=9,
                      anomaly_radius=(3.0, 5.0))
SMOKE_AUG = AugmentConfig(crop_min=(12, 12, 12), crop_max=(20, 20, 20), view_size=(16, 16, 16),
                          min_overlap_voxels=64, mask_block=4, mask_fraction=0.25)
SMOKE_SSL = SslConfig(d_out=8, base_channels=4, depth=2, pairs_per_step=2, positions_per_pair=32,
                      steps=3, warmup_steps=1, seed=1, aug=SMOKE_AUG)
SMOKE_DENS = DensityTrainConfig(kind="gaussian", condition="learned", pool=(2, 2, 2),
                                patch=(16, 16, 16), steps=10, warmup_steps=2, cache_crops=12,
                                batch_crops=2, seed=2, gauss_hidden=8)


@pytest.fixture(scope="module")
def smoke_setup():
    train, test = gen_dataset(SMOKE_GEN, 3, 2)
    desc = train_descriptor(train, SMOKE_SSL)
    cond = train_condition(train, SslConfig(**{**SMOKE_SSL.__dict__, "d_out": 6, "seed": 2}))
    dens = fit_density(desc, cond, train, SMOKE_DENS)
    bundle = load_bundle(desc, cond, dens)
    return train, test, desc, cond, dens, bundle


class TestInference:
    def test_constant_stub_gives_constant_map(self, smoke_setup):
        train, test, desc, cond, dens, bundle = smoke_setup
        stub_bundle = ScoreBundle(
            desc_model=bundle.desc_model, cond_model=bundle.cond_model,
            density_model=_ConstantDensity(2.5), density_cfg=bundle.density_cfg,
            condition=bundle.condition, d_desc=bundle.d_desc, d_cond=bundle.d_cond,
        )
        amap = infer_anomaly_map(train[0], stub_bundle, stride=(8, 8, 8))
        np.testing.assert_allclose(amap.scores, 2.5, rtol=1e-6)
        assert amap.coverage.min() >= 1 and amap.coverage.max() > 1

    def test_single_patch_equals_direct_evaluation(self, smoke_setup):
        train, test, desc, cond, dens, bundle = smoke_setup
        from voxanom.pipeline import _patch_scores

        vol = train[0]
        grid = tile_volume((16, 16, 16), (16, 16, 16), (16, 16, 16))
        sub = vol.data[:16, :16, :16]
        from voxanom.synth import Volume

        small = Volume(sub, vol.spacing, "sub")
        amap = infer_anomaly_map(small, bundle, grid=grid)
        direct = _patch_scores(bundle, sub, (0, 0, 0))
        np.testing.assert_allclose(amap.scores, direct, rtol=1e-6)
        assert np.all(amap.coverage == 1)

    def test_deterministic(self, smoke_setup):
        train, _, _, _, _, bundle = smoke_setup
        a = infer_anomaly_map(train[0], bundle)
        b = infer_anomaly_map(train[0], bundle)
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_mismatched_descriptor_dim_rejected(self, smoke_setup):
        train, test, desc, cond, dens, bundle = smoke_setup
        bad_desc = train_descriptor(train, SslConfig(**{**SMOKE_SSL.__dict__, "d_out": 4, "steps": 1}))
        with pytest.raises(BundleError, match="d_desc"):
            load_bundle(bad_desc, cond, dens)

    def test_condition_source_mismatch_rejected(self, smoke_setup):
        train, test, desc, cond, dens, bundle = smoke_setup
        marg_cfg = DensityTrainConfig(**{**SMOKE_DENS.__dict__, "condition": "none"})
        marg = fit_density(desc, None, train, marg_cfg)
        with pytest.raises(BundleError, match="condition"):
            load_bundle(desc, cond, marg)
        with pytest.raises(BundleError, match="learned condition"):
            load_bundle(desc, None, dens)


class TestLosses:
    def test_bce_perfect_prediction_near_zero(self):
        t = Tensor(np.array([0.0, 1.0, 1.0, 0.0]))
        p = Tensor(np.array([0.0, 1.0, 1.0, 0.0]))
        assert bce_loss(p, t).item() == pytest.approx(0.0, abs=1e-6)

    def test_bce_half_is_log2(self):
        t = Tensor((np.arange(10) % 2).astype(np.float64))
        p = Tensor(np.full(10, 0.5))
        assert bce_loss(p, t).item() == pytest.approx(np.log(2.0), rel=1e-9)

    def test_dice_loss_perfect_prediction(self):
        t = Tensor(np.array([1.0, 0.0, 1.0]))
        assert soft_dice_loss(t, t, smooth=0.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_bce_dice_gradients(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal(12), requires_grad=True)
        targets = Tensor((rng.random(12) < 0.4).astype(np.float64))

        def loss():
            probs = logits.sigmoid()
            return bce_loss(probs, targets) + soft_dice_loss(probs, targets)

        gradcheck(loss, [logits], tol=1e-4)


class TestDistillFinetune:
    def test_constant_teacher_student_converges(self, smoke_setup):
        train, test, desc, cond, dens, bundle = smoke_setup
        stub_bundle = ScoreBundle(
            desc_model=bundle.desc_model, cond_model=bundle.cond_model,
            density_model=_ConstantDensity(1.25), density_cfg=bundle.density_cfg,
            condition=bundle.condition, d_desc=bundle.d_desc, d_cond=bundle.d_cond,
        )
        cfg = DistillConfig(crops=8, steps=220, batch=4, base_lr=3e-3, warmup_steps=10, seed=3)
        ckpt = distill(stub_bundle, (4, 2), train, cfg)
        assert not ckpt.diverged
        student = load_student(ckpt)
        from voxanom import autodiff as ad

        with ad.no_grad():
            out = student(Tensor(train[0].data[:16, :16, :16][None, None])).data
        assert abs(out.mean() - 1.25) < 0.1
        mse = float(((out - 1.25) ** 2).mean())
        assert mse < 1e-2

    def test_distill_loss_decreases(self, smoke_setup):
        train, test, desc, cond, dens, bundle = smoke_setup
        cfg = DistillConfig(crops=8, steps=60, batch=4, seed=4, log_every=10)
        ckpt = distill(bundle, (4, 2), train, cfg)
        losses = [h[1] for h in ckpt.history]
        assert losses[-1] < losses[0]

    def test_finetune_requires_foreground(self, smoke_setup):
        train, test, desc, cond, dens, bundle = smoke_setup
        cfg = DistillConfig(crops=4, steps=2, batch=2, seed=5)
        student = distill(bundle, (4, 2), train, cfg)
        empty = [inject_anomalies(gen_normal_volume(SMOKE_GEN, 77), SMOKE_GEN, count=0)]
        with pytest.raises(ValueError, match="foreground"):
            finetune_segmentation(student, empty, FinetuneConfig(steps=2, seed=6))

    def test_finetune_produces_probability_maps(self, smoke_setup):
        train, test, desc, cond, dens, bundle = smoke_setup
        student = distill(bundle, (4, 2), train, DistillConfig(crops=6, steps=5, batch=2, seed=7))
        tuned = finetune_segmentation(student, test, FinetuneConfig(steps=5, batch=2, seed=8))
        assert tuned.kind == "finetuned"
        probs = predict_probability_map(tuned, test[0].volume, stride=(16, 16, 16))
        assert probs.shape == test[0].volume.data.shape
        assert probs.min() >= 0.0 and probs.max() <= 1.0
        with pytest.raises(ValueError, match="finetuned"):
            predict_probability_map(student, test[0].volume)

    def test_student_map_shape(self, smoke_setup):
        train, test, desc, cond, dens, bundle = smoke_setup
        student = distill(bundle, (4, 2), train, DistillConfig(crops=6, steps=3, batch=2, seed=9))
        smap = predict_student_map(student, train[0], stride=(8, 8, 8))
        assert smap.shape == train[0].data.shape
        assert np.isfinite(smap).all()
