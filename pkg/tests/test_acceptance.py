"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The enrichment check trains the full desk pipeline for five seeds and
dominates the runtime.
"""

import time

import numpy as np
import pytest
import torch

from maskdiff import datapipe, metrics, pipeline as pl, segmenter
from maskdiff.denoiser import DenoiserConfig, empty_bundle
from maskdiff.sampler import SamplerRun, ddim_step, guided_prediction, sample, training_loss, uniform_grid
from maskdiff.schedules import Schedule, alpha_sigma, eps_from, forward_marginal, log_snr, v_from, x0_from_v

from oracles import (
    ConstantDenoiser,
    OracleDenoiser,
    brute_force_aji,
    brute_force_dice,
    finite_diff_grads,
    random_instance_map,
    relative_error,
)

SCH = Schedule()


def _report(name: str, detail: str = "") -> None:
    print(f"\nACCEPTANCE {name}: PASS {detail}")


class TestScheduleAlgebraSuite:
    def test_schedule_algebra(self):
        t0 = time.time()
        gen = torch.Generator().manual_seed(0)
        # monotonic lambda on an ordered grid
        ts = torch.linspace(0.002, 0.998, 500, dtype=torch.float64)
        lams = log_snr(SCH, ts)
        assert bool((lams[:-1] > lams[1:]).all())
        # variance preservation within 1e-9 on 1000 random t
        t = torch.rand(1000, generator=gen, dtype=torch.float64)
        a, s = alpha_sigma(SCH, t)
        assert float((a**2 + s**2 - 1).abs().max()) < 1e-9
        # eps/v/x0 round-trips within 1e-5 on 1000 random cases
        worst = 0.0
        for _ in range(1000):
            tt = float(torch.rand((), generator=gen))
            x0 = torch.rand(3, 4, 4, generator=gen, dtype=torch.float64) * 2 - 1
            eps = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64)
            av, sv = alpha_sigma(SCH, tt)
            z = forward_marginal(SCH, x0, tt, eps)
            v = v_from(x0, eps, av, sv)
            worst = max(worst, float((x0_from_v(z, v, av, sv) - x0).abs().max()))
            worst = max(worst, float((eps_from(z, x0, av, sv) - eps).abs().max()))
        assert worst < 1e-5
        elapsed = time.time() - t0
        assert elapsed < 5.0
        _report("schedule-algebra", f"(round-trip max err {worst:.2e}, {elapsed:.1f}s)")


class TestOracleSamplerSuite:
    def test_oracle_sampler(self, schedule):
        t0 = time.time()
        worst = 0.0
        for param in ("eps", "v"):
            cfg = DenoiserConfig(resolution=16, base_width=8, depth=1, num_classes=3,
                                 parameterization=param)
            gen = torch.Generator().manual_seed(7)
            x0 = torch.rand(1, 3, 16, 16, generator=gen) * 1.6 - 0.8
            oracle = OracleDenoiser(cfg, x0)
            for steps in (1, 8, 64):
                run = SamplerRun(seed=steps, grid=uniform_grid(steps))
                out = sample(oracle, schedule, empty_bundle(1, cfg), run, w=0.0)
                worst = max(worst, float((out - x0).abs().max()))
        assert worst < 1e-3
        # DDIM semigroup property within 1e-5
        cfg = DenoiserConfig(resolution=16, base_width=8, depth=1, num_classes=3)
        gen = torch.Generator().manual_seed(8)
        x0 = torch.rand(1, 3, 16, 16, generator=gen) * 1.6 - 0.8
        oracle = OracleDenoiser(cfg, x0)
        eps = torch.randn(1, 3, 16, 16, generator=gen)
        z_t = forward_marginal(schedule, x0, 0.9, eps)
        direct = ddim_step(schedule, z_t, oracle(z_t, log_snr(schedule, 0.9), None), 0.9, 0.2, "eps")
        mid = ddim_step(schedule, z_t, oracle(z_t, log_snr(schedule, 0.9), None), 0.9, 0.55, "eps")
        via = ddim_step(schedule, mid, oracle(mid, log_snr(schedule, 0.55), None), 0.55, 0.2, "eps")
        semi_err = float((direct - via).abs().max())
        assert semi_err < 1e-5
        elapsed = time.time() - t0
        assert elapsed < 30.0
        _report("oracle-sampler", f"(recovery {worst:.2e}, semigroup {semi_err:.2e}, {elapsed:.1f}s)")


class TestGuidanceSuite:
    def test_guidance(self):
        cfg = DenoiserConfig(resolution=8, base_width=4, depth=1, num_classes=3)
        z = torch.zeros(1, 3, 8, 8)
        cond = empty_bundle(1, cfg)
        # w = 0 identity
        stub = ConstantDenoiser(cfg, value_cond=0.2, value_null=0.9)
        assert torch.equal(guided_prediction(stub, z, 0.0, cond, 0.0), torch.full_like(z, 0.2))
        # fixed point when conditional == unconditional
        stub = ConstantDenoiser(cfg, value_cond=0.37, value_null=0.37)
        for w in (0.0, 1.0, 4.0):
            assert float((guided_prediction(stub, z, 0.0, cond, w) - 0.37).abs().max()) < 1e-6
        # three-point collinearity in w within 1e-6 on a real network
        from maskdiff.denoiser import ConditioningBundle, Denoiser

        torch.manual_seed(0)
        model = Denoiser(cfg)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        zr = torch.randn(1, 3, 8, 8)
        cond_r = ConditioningBundle(mask=torch.ones(1, 2, 8, 8))
        with torch.no_grad():
            o0, o1, o2 = (guided_prediction(model, zr, 0.3, cond_r, w) for w in (0.0, 1.0, 2.0))
        col_err = float(((o2 - o1) - (o1 - o0)).abs().max())
        assert col_err < 1e-6
        _report("guidance", f"(collinearity residual {col_err:.2e})")


class TestGradientChecks:
    def test_gradient_checks(self, schedule):
        t0 = time.time()
        # diffusion training loss on an 8x8 toy model
        torch.manual_seed(7)
        from maskdiff.denoiser import Denoiser

        dcfg = DenoiserConfig(resolution=8, base_width=4, depth=1, num_classes=3, scalar_dim=2)
        dmodel = Denoiser(dcfg).double()
        with torch.no_grad():
            for p in dmodel.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        x0 = (torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1) * 0.8
        cond = empty_bundle(2, dcfg, dtype=torch.float64)

        def diff_loss():
            return training_loss(dmodel, schedule, x0, cond, torch.Generator().manual_seed(123))

        diff_loss().backward()
        params = [p for p in dmodel.parameters() if p.grad is not None]
        gen = torch.Generator().manual_seed(5)
        picks = []
        for _ in range(10):
            pi = int(torch.randint(len(params), (1,), generator=gen))
            fi = int(torch.randint(params[pi].numel(), (1,), generator=gen))
            picks.append((pi, fi))
        worst_d = 0.0
        for (pi, fi), fd in zip(picks, finite_diff_grads(diff_loss, params, picks, h=1e-5)):
            worst_d = max(worst_d, relative_error(float(params[pi].grad.view(-1)[fi]), fd))
        assert worst_d <= 1e-3

        # segmentation total loss on an 8x8, 3-class toy model
        torch.manual_seed(11)
        smodel = segmenter.SegUNet(segmenter.SegConfig(resolution=8, num_classes=3, base_width=4, depth=2)).double()
        xs = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        gt = torch.randint(0, 3, (1, 8, 8))
        loss_cfg = segmenter.SegLossConfig(beta=0.5)

        def seg_loss():
            return segmenter.total_loss(smodel(xs), gt, loss_cfg)

        seg_loss().backward()
        sparams = [p for p in smodel.parameters() if p.grad is not None]
        picks = []
        for _ in range(10):
            pi = int(torch.randint(len(sparams), (1,), generator=gen))
            fi = int(torch.randint(sparams[pi].numel(), (1,), generator=gen))
            picks.append((pi, fi))
        worst_s = 0.0
        for (pi, fi), fd in zip(picks, finite_diff_grads(seg_loss, sparams, picks, h=1e-5)):
            worst_s = max(worst_s, relative_error(float(sparams[pi].grad.view(-1)[fi]), fd))
        assert worst_s <= 1e-3
        elapsed = time.time() - t0
        assert elapsed < 60.0
        _report("gradient-checks", f"(diffusion {worst_d:.2e}, segmentation {worst_s:.2e}, {elapsed:.1f}s)")


class TestMetricOracles:
    def test_metric_oracles(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(200):
            pred = random_instance_map(rng, size=16, max_blobs=4)
            gt = random_instance_map(rng, size=16, max_blobs=4)
            worst = max(worst, abs(metrics.aji(pred, gt) - brute_force_aji(pred, gt)))
            pm = (pred > 0).astype(int)
            gm = (gt > 0).astype(int)
            worst = max(worst, abs(metrics.dice_metric(pm, gm, 1) - brute_force_dice(pm, gm, 1)))
        assert worst < 1e-9
        # the hand example: gt A(4px) + B(4px), pred exactly A -> 0.5
        gt = np.zeros((6, 6), int)
        gt[0, 0:4] = 1
        gt[3, 0:4] = 2
        pred = np.zeros((6, 6), int)
        pred[0, 0:4] = 1
        assert metrics.aji(pred, gt) == 0.5
        _report("metric-oracles", f"(200 random maps, max deviation {worst:.2e})")


class TestOverfitChecks:
    def test_overfit_checks(self, schedule, overfit_diffusion):
        t0 = time.time()
        model, x0, loss_estimate = overfit_diffusion
        assert loss_estimate < 1e-2
        rms_list = []
        for seed in (0, 1):
            out = sample(model, schedule, empty_bundle(1, model.config),
                         SamplerRun(seed=seed, grid=uniform_grid(64)), w=0.0)
            rms_list.append(float(((out - x0) ** 2).mean().sqrt()))
        assert max(rms_list) < 0.1

        # segmentation overfit on a single record
        seg_dir = "/tmp/maskdiff-acceptance-segoverfit"
        manifest = datapipe.make_toy_dataset(1, 32, 4, seed=2, out_dir=seg_dir,
                                             split_fractions=(1.0, 0.0, 0.0))
        torch.manual_seed(0)
        seg = segmenter.SegUNet(segmenter.SegConfig(resolution=32, num_classes=4, base_width=16, depth=3))
        segmenter.train(seg, manifest, manifest, epochs=200, batch_size=1, seed=0)
        rec = manifest.records[0]
        pred = segmenter.predict_mask(seg, datapipe.load_image(rec.image))
        gt = datapipe.load_mask(rec.mask)
        dice = float(np.mean([metrics.dice_metric(pred, gt, c) for c in range(1, 4)]))
        assert dice >= 0.98
        elapsed = time.time() - t0
        assert elapsed < 600.0
        _report("overfit-checks",
                f"(diffusion loss {loss_estimate:.4f}, sample RMS {max(rms_list):.3f}, seg dice {dice:.3f}, {elapsed:.0f}s)")


class TestEnrichmentEffect:
    def test_enrichment_effect(self, tmp_path_factory):
        t0 = time.time()
        seeds = (0, 1, 2, 3, 4)
        rows = {}
        for seed in seeds:
            out = tmp_path_factory.mktemp(f"desk_seed{seed}")
            cfg = pl.desk_config(seed=seed)
            reports = pl.run_all(out, cfg)
            rows[seed] = {r.variant: r.dice_all for r in reports}
            print(f"\nseed {seed}: " + "  ".join(f"v{v}={100 * d:.2f}" for v, d in sorted(rows[seed].items())))
        enrich_ok = sum(rows[s]["5"] >= rows[s]["1a"] + 0.02 for s in seeds)
        order_ok = sum(rows[s]["1"] >= rows[s]["4"] for s in seeds)
        both_ok = sum(
            (rows[s]["5"] >= rows[s]["1a"] + 0.02) and (rows[s]["1"] >= rows[s]["4"]) for s in seeds
        )
        elapsed = time.time() - t0
        assert both_ok >= 4, f"orderings held on {both_ok}/5 seeds (enrichment {enrich_ok}, real-vs-synth {order_ok})"
        assert elapsed <= 3600.0
        _report("enrichment-effect", f"(orderings held on {both_ok}/5 seeds, {elapsed / 60:.1f} min)")


class TestReproducibility:
    def test_reproducibility(self, tmp_path_factory):
        t0 = time.time()
        cfg = pl.ExperimentConfig(
            profile="desk",
            seed=13,
            toy_n=16,
            resolution=32,
            n1=8,
            k=2,
            stages=[
                pl.DiffusionStageConfig(resolution=16, parameterization="eps", num_steps=8,
                                        pretrain_steps=60, finetune_steps=40, base_width=16),
                pl.DiffusionStageConfig(resolution=32, parameterization="v", num_steps=8,
                                        pretrain_steps=60, finetune_steps=40, base_width=16),
            ],
            seg=pl.SegTrainConfig(base_width=8, depth=2, epochs=6, finetune_epochs=3),
        )
        outputs = []
        for name in ("repro_a", "repro_b"):
            out = tmp_path_factory.mktemp(name)
            pl.run_all(out, cfg)
            outputs.append((out / "reports" / "table.csv").read_bytes())
        assert outputs[0] == outputs[1]
        _report("reproducibility", f"(identical CSVs, {time.time() - t0:.0f}s)")
