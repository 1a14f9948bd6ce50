"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 5-7 run the full desk-scale pipeline on the default config for three
seeds (cached at session scope); expect roughly 15-25 minutes per seed on a
single core. Run with ``pytest -s tests/test_acceptance.py`` to watch progress.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from voxanom import autodiff as ad
from voxanom.autodiff import Tensor, avg_pool3d, conv3d, linear
from voxanom.config import default_config
from voxanom.density import (
    ConditionalGaussian,
    DensityTrainConfig,
    MarginalGaussian,
    fit_density_on_cache,
    gaussian_nll,
)
from voxanom.experiment import run_experiment
from voxanom.flows import ActNorm, FlowStack, InvLinear, build_flow_stack
from voxanom.metrics import auroc
from voxanom.pipeline import bce_loss, soft_dice_loss
from voxanom.ssl import infonce_loss, train_descriptor, vicreg_loss

from conftest import gradcheck
from test_density import rows_to_cache
from test_flows import numerical_jacobian, randomized_stack

F64 = np.float64
SEEDS = (0, 1, 2)


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}", flush=True)
    assert ok, f"criterion {criterion}: {detail}"


def t64(a, rg=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=rg)


# -- criterion 1: numerical core -------------------------------------------------------


class TestCriterion1NumericalCore:
    def test_all_gradients_match_finite_differences(self):
        start = time.perf_counter()
        worst = 0.0
        rng = np.random.default_rng(0)

        # differentiable tensor ops
        x = t64(rng.standard_normal((1, 2, 5, 5, 5)), rg=True)
        w = t64(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3, rg=True)
        b = t64(rng.standard_normal(3), rg=True)
        coeff = Tensor(rng.standard_normal((1, 3, 3, 3, 3)))
        worst = max(worst, gradcheck(lambda: (conv3d(x, w, b) * coeff).sum(), [x, w, b], tol=1e-4))

        xp = t64(rng.standard_normal((1, 2, 6, 6, 6)), rg=True)
        cp = Tensor(rng.standard_normal((1, 2, 3, 3, 3)))
        worst = max(worst, gradcheck(lambda: (avg_pool3d(xp, 2) * cp).sum(), [xp], tol=1e-4))

        xl = t64(rng.standard_normal((4, 3)), rg=True)
        wl = t64(rng.standard_normal((2, 3)), rg=True)
        cl = Tensor(rng.standard_normal((4, 2)))
        worst = max(worst, gradcheck(lambda: (linear(xl, wl) * cl).sum(), [xl, wl], tol=1e-4))

        # InfoNCE (through L2 normalization, as trained)
        r1 = t64(rng.standard_normal((3, 4)), rg=True)
        r2 = t64(rng.standard_normal((3, 4)), rg=True)

        def l2n(t):
            return t * (((t * t).sum(axis=1, keepdims=True) + 1e-12) ** -0.5)

        worst = max(worst, gradcheck(lambda: infonce_loss(l2n(r1), l2n(r2), 0.5), [r1, r2], tol=1e-4))

        # VICReg, all three terms active
        v1 = t64(rng.standard_normal((5, 3)) * 1.5, rg=True)
        v2 = t64(rng.standard_normal((5, 3)) * 0.4, rg=True)
        worst = max(worst, gradcheck(lambda: vicreg_loss(v1, v2, 25.0, 25.0, 1.0, 1e-4), [v1, v2], tol=1e-4))

        # all four density NLLs
        y = t64(rng.standard_normal((4, 3)), rg=True)
        mu = t64(rng.standard_normal(3), rg=True)
        lv = t64(rng.standard_normal(3) * 0.4, rg=True)
        worst = max(worst, gradcheck(lambda: gaussian_nll(y, mu, lv).sum(), [y, mu, lv], tol=1e-4))

        cg = ConditionalGaussian(2, 3, hidden=4, rng=rng, dtype=F64)
        cg.mu_out.weight.data = rng.standard_normal(cg.mu_out.weight.shape) * 0.3
        cg.lv_out.weight.data = rng.standard_normal(cg.lv_out.weight.shape) * 0.2
        ym = t64(rng.standard_normal((1, 2, 2, 2, 2)), rg=True)
        cm = t64(rng.standard_normal((1, 3, 2, 2, 2)), rg=True)
        worst = max(worst, gradcheck(lambda: cg.nll_map_tensor(ym, cm).sum(), [ym, cm] + cg.parameters(), tol=1e-4))

        marg = randomized_stack(3, 1, seed=5)
        yf = t64(rng.standard_normal((3, 3)), rg=True)
        worst = max(worst, gradcheck(lambda: marg.nll_rows(yf).sum(), [yf] + marg.parameters(), tol=1e-4))

        condf = randomized_stack(4, 1, cond_dim=2, seed=6)
        yc = t64(rng.standard_normal((3, 4)), rg=True)
        cc = t64(rng.standard_normal((3, 2)), rg=True)
        worst = max(worst, gradcheck(lambda: condf.nll_rows(yc, cc).sum(), [yc, cc] + condf.parameters(), tol=1e-4))

        # BCE + Dice through the sigmoid used in fine-tuning
        logits = t64(rng.standard_normal(12), rg=True)
        targets = Tensor((rng.random(12) < 0.4).astype(F64))
        worst = max(
            worst,
            gradcheck(
                lambda: bce_loss(logits.sigmoid(), targets) + soft_dice_loss(logits.sigmoid(), targets),
                [logits],
                tol=1e-4,
            ),
        )

        elapsed = time.perf_counter() - start
        report("1 (numerical core)", worst < 1e-4 and elapsed < 120,
               f"max rel err {worst:.2e} over all ops/losses, runtime {elapsed:.0f}s")


# -- criterion 2: flow correctness -----------------------------------------------------


class TestCriterion2FlowCorrectness:
    def test_invertibility_logdet_and_normalization(self):
        start = time.perf_counter()
        rng = np.random.default_rng(1)

        worst_rt = 0.0
        for dim, blocks in ((2, 2), (3, 3), (4, 2)):
            stack = randomized_stack(dim, blocks, seed=10 + dim)
            y = rng.standard_normal((16, dim))
            z, _ = stack.forward(Tensor(y))
            worst_rt = max(worst_rt, float(np.max(np.abs(stack.inverse(z.data) - y))))

        worst_ld = 0.0
        for dim in (2, 3, 4):
            stack = randomized_stack(dim, 2, seed=20 + dim)
            for _ in range(2):
                y0 = rng.standard_normal(dim)

                def fwd(v):
                    zz, _ = stack.forward(Tensor(v[None].astype(F64)))
                    return zz.data[0]

                _, logdet = stack.forward(Tensor(y0[None].astype(F64)))
                jac = numerical_jacobian(fwd, y0)
                worst_ld = max(worst_ld, abs(logdet.data[0] - math.log(abs(np.linalg.det(jac)))))

        # quadrature d=1 and d=2
        s1 = build_flow_stack(1, blocks=2, rng=np.random.default_rng(2), dtype=F64)
        s1.initialize_from((rng.standard_normal((512, 1)) * 1.3 + 0.4).astype(F64))
        grid = np.linspace(-10, 10, 4001)
        q1 = np.trapezoid(np.exp(-s1.nll_rows(Tensor(grid[:, None].astype(F64))).data), grid)

        s2 = randomized_stack(2, 2, seed=18, gentle=True)
        xs = np.linspace(-16, 16, 481)
        xx, yy = np.meshgrid(xs, xs, indexing="ij")
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        nll2 = s2.nll_rows(Tensor(pts.astype(F64))).data.reshape(481, 481)
        dx = xs[1] - xs[0]
        q2 = np.trapezoid(np.trapezoid(np.exp(-nll2), dx=dx, axis=1), dx=dx)

        elapsed = time.perf_counter() - start
        ok = worst_rt < 1e-6 and worst_ld < 1e-5 and abs(q1 - 1) < 1e-3 and abs(q2 - 1) < 1e-3 and elapsed < 120
        report("2 (flow correctness)", ok,
               f"roundtrip {worst_rt:.1e}, logdet err {worst_ld:.1e}, "
               f"quadrature d1 {q1:.6f} / d2 {q2:.6f}, runtime {elapsed:.0f}s")


# -- criterion 3: closed-form loss values ------------------------------------------------


class TestCriterion3ClosedForms:
    def test_reference_values(self):
        errs = {}
        z = t64([[1.0, 0.0], [0.0, 1.0]])
        errs["infonce orthogonal"] = abs(
            infonce_loss(z, z, 1.0).item() - 4.0 * -math.log(math.e / (math.e + 2.0))
        )
        v = np.array([[0.6, 0.8], [0.6, 0.8]])
        errs["infonce identical"] = abs(infonce_loss(t64(v), t64(v), 1.0).item() - 4.0 * math.log(3.0))
        errs["gaussian mode d2"] = abs(
            gaussian_nll(t64([0.0, 0.0]), t64([0.0, 0.0]), t64([0.0, 0.0])).item() - math.log(2 * math.pi)
        )
        an = ActNorm(3, dtype=F64)
        an.set_params(np.full(3, 2.0), np.zeros(3))
        _, ld = an(t64(np.zeros((1, 3))))
        errs["actnorm logdet"] = abs(ld.data[0] - 3 * math.log(2.0))
        il = InvLinear(2, rng=np.random.default_rng(0), dtype=F64)
        il.perm = np.eye(2)
        il.lower.data = np.eye(2)
        il.upper.data = np.diag([2.0, 3.0])
        _, ld2 = il(t64(np.zeros((1, 2))))
        errs["invlinear logdet"] = abs(ld2.data[0] - math.log(6.0))
        worst = max(errs.values())
        report("3 (closed forms)", worst < 1e-6,
               "; ".join(f"{k} err {v:.1e}" for k, v in errs.items()))


# -- criterion 4: density recovery ------------------------------------------------------


class TestCriterion4DensityRecovery:
    def test_gaussian_recovery_and_conditional_reduction(self):
        start = time.perf_counter()
        rng = np.random.default_rng(3)
        mu_true = np.array([0.4, -1.0, 1.6, 0.1])
        sigma_true = np.array([1.0, 1.4, 0.9, 1.1])
        rows = rng.normal(mu_true, sigma_true, size=(10_000, 4))
        cache = rows_to_cache(rows, n_vols=10)
        model = MarginalGaussian(4)
        cfg = DensityTrainConfig(kind="gaussian", condition="none", steps=300, warmup_steps=30, seed=0)
        fit_density_on_cache(model, cache, cfg)
        mu_err = float(np.max(np.abs(model.mu.data - mu_true)))
        var_err = float(np.max(np.abs(np.exp(model.logvar.data) - sigma_true**2) / sigma_true**2))

        mu2 = np.array([0.2, -0.7])
        sg2 = np.array([1.1, 0.8])
        rows2 = rng.normal(mu2, sg2, size=(8_000, 2))
        cfg2 = DensityTrainConfig(kind="gaussian", condition="learned", steps=400, warmup_steps=40,
                                  seed=1, gauss_hidden=8)
        marg = MarginalGaussian(2)
        fit_density_on_cache(marg, rows_to_cache(rows2), cfg2)
        cond = ConditionalGaussian(2, 3, hidden=8, rng=np.random.default_rng(4))
        fit_density_on_cache(cond, rows_to_cache(rows2, cond_rows=np.zeros((8_000, 3))), cfg2)
        held = rng.normal(mu2, sg2, size=(4_000, 2)).astype(np.float32)
        held_map = Tensor(held.reshape(1, 4000, 1, 1, 2).transpose(0, 4, 1, 2, 3).copy())
        zeros_map = Tensor(np.zeros((1, 3, 4000, 1, 1), dtype=np.float32))
        with ad.no_grad():
            gap = abs(float(marg.nll_map_tensor(held_map).data.mean())
                      - float(cond.nll_map_tensor(held_map, zeros_map).data.mean()))
        elapsed = time.perf_counter() - start
        ok = mu_err < 0.05 and var_err < 0.10 and gap < 0.01 and elapsed < 60
        report("4 (density recovery)", ok,
               f"mu err {mu_err:.3f} (<0.05), var err {var_err:.1%} (<10%), "
               f"conditional-constant gap {gap:.4f} nat (<0.01), runtime {elapsed:.0f}s")


# -- criteria 5-7: desk-scale end-to-end ---------------------------------------------------


@pytest.fixture(scope="session")
def desk_runs():
    results = {}
    for seed in SEEDS:
        cfg = default_config()
        cfg.run.seed = seed
        t0 = time.perf_counter()
        print(f"\n[desk run] seed {seed} starting", flush=True)
        results[seed] = run_experiment(cfg, with_distill=(seed == SEEDS[0]), verbose=True)
        print(f"[desk run] seed {seed} finished in {time.perf_counter() - t0:.0f}s", flush=True)
    return results


class TestCriterion5EndToEnd:
    def test_auroc_and_ablation_ordering(self, desk_runs):
        passing = []
        details = []
        for seed, res in desk_runs.items():
            learned = res.metrics["gaussian_learned"].auroc
            none = res.metrics["gaussian_none"].auroc
            sincos = res.metrics["gaussian_sincos"].auroc
            ok = learned >= 0.90 and learned - none >= 0.03 and learned - sincos >= 0.03
            passing.append(ok)
            details.append(
                f"seed {seed}: learned {learned:.3f} vs none {none:.3f} / sincos {sincos:.3f}"
                f" [{res.timings['total']:.0f}s]{' ok' if ok else ' MISS'}"
            )
        n_pass = sum(passing)
        times_ok = all(res.timings["total"] <= 1800 for res in desk_runs.values())
        report("5 (desk-scale end-to-end)", n_pass >= 2 and times_ok,
               f"{n_pass}/3 seeds pass; " + "; ".join(details))


class TestCriterion6FlowParity:
    def test_marginal_flow_close_to_conditioned_gaussian(self, desk_runs):
        passing = []
        details = []
        for seed, res in desk_runs.items():
            flow = res.metrics["flow_none"].auroc
            learned = res.metrics["gaussian_learned"].auroc
            ok = flow >= learned - 0.05
            passing.append(ok)
            details.append(f"seed {seed}: flow {flow:.3f} vs learned-gaussian {learned:.3f}")
        report("6 (flow parity)", sum(passing) >= 2,
               f"{sum(passing)}/3 seeds pass; " + "; ".join(details))


class TestCriterion7Distillation:
    def test_student_and_finetuning(self, desk_runs):
        res = desk_runs[SEEDS[0]]
        ok_student = res.student_auroc >= res.teacher_auroc - 0.05
        ok_dice = res.finetuned_dice >= res.teacher_dice + 0.05
        report("7 (distillation + fine-tuning)", ok_student and ok_dice,
               f"student AUROC {res.student_auroc:.3f} vs teacher {res.teacher_auroc:.3f} (-0.05 allowed); "
               f"finetuned Dice {res.finetuned_dice:.3f} vs thresholded {res.teacher_dice:.3f} (+0.05 required)")


# -- criterion 8: metric protocol -----------------------------------------------------------


class TestCriterion8MetricProtocol:
    def test_estimator_properties(self):
        rng = np.random.default_rng(5)
        pos = rng.normal(1.0, 1.0, 10**5)
        neg = rng.normal(0.0, 1.0, 10**5)
        expected = 0.5 * (1 + math.erf(0.5))  # Phi(1/sqrt(2)) = 0.5 (1 + erf(1/(sqrt2*sqrt2)))
        gauss_err = abs(auroc(pos, neg) - expected)

        tie = auroc(np.full(100, 2.0), np.full(80, 2.0))

        p = rng.integers(0, 7, 500).astype(float)
        n = rng.integers(0, 7, 500).astype(float)
        brute = (np.sum(p[:, None] > n[None, :]) + 0.5 * np.sum(p[:, None] == n[None, :])) / (500 * 500)
        pool_err = abs(auroc(p, n) - brute)

        ok = gauss_err < 0.01 and tie == 0.5 and pool_err < 1e-12
        report("8 (metric protocol)", ok,
               f"two-gaussian err {gauss_err:.4f} (<0.01), tie case {tie}, brute-force gap {pool_err:.1e}")


# -- criterion 9: reproducibility ------------------------------------------------------------


class TestCriterion9Reproducibility:
    def _tiny_cfg(self):
        from voxanom.views import AugmentConfig

        cfg = default_config()
        cfg.run.seed = 4
        cfg.data.n_train, cfg.data.n_label, cfg.data.n_test = 3, 2, 2
        aug = AugmentConfig(crop_min=(12, 12, 12), crop_max=(20, 20, 20), view_size=(16, 16, 16),
                            min_overlap_voxels=64, mask_block=4, mask_fraction=0.25)
        cfg.descriptor = dataclasses.replace(cfg.descriptor, steps=6, warmup_steps=2, d_out=8,
                                             base_channels=4, pairs_per_step=2,
                                             positions_per_pair=32, aug=aug)
        cfg.condition = dataclasses.replace(cfg.condition, steps=6, warmup_steps=2, d_out=6,
                                            base_channels=4, pairs_per_step=2,
                                            positions_per_pair=32, aug=aug)
        cfg.density = dataclasses.replace(cfg.density, steps=8, warmup_steps=2, cache_crops=8,
                                          batch_crops=2, patch=(16, 16, 16))
        cfg.pipeline.infer_stride = (8, 8, 8)
        return cfg

    def test_pipeline_bit_determinism_and_resume(self):
        from voxanom.synth import gen_dataset
        from voxanom.volio import load_checkpoint, save_checkpoint

        cfg = self._tiny_cfg()
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        same_metrics = all(
            a.metrics[k].auroc == b.metrics[k].auroc and a.metrics[k].dice_mean == b.metrics[k].dice_mean
            for k in a.metrics
        )

        train, _ = gen_dataset(cfg.data.gen, 3, 1)
        full = train_descriptor(train, cfg.descriptor)
        half = train_descriptor(train, cfg.descriptor, until_step=3)
        import tempfile, os

        with tempfile.TemporaryDirectory() as d:
            p = os.path.join(d, "half.sckp")
            save_checkpoint(p, half)
            resumed = train_descriptor(train, cfg.descriptor, resume=load_checkpoint(p))
        same_resume = resumed.history == full.history and all(
            np.array_equal(resumed.state[k], full.state[k]) for k in full.state
        )
        report("9 (reproducibility)", same_metrics and same_resume,
               f"identical reruns: {same_metrics}; checkpoint resume == uninterrupted: {same_resume}")
