import pytest
import torch

from maskdiff.checkpoints import MAGIC, load_checkpoint, save_checkpoint
from maskdiff.denoiser import (
    ConditioningBundle,
    Denoiser,
    DenoiserConfig,
    drop_conditioning,
    empty_bundle,
    predict,
)
from maskdiff.sampler import training_loss

from oracles import finite_diff_grads, relative_error


def tiny_config(**kw):
    base = dict(resolution=8, base_width=4, depth=1, num_classes=3, scalar_dim=2)
    base.update(kw)
    return DenoiserConfig(**base)


class TestConfig:
    def test_resolution_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            DenoiserConfig(resolution=12)
        with pytest.raises(ValueError):
            DenoiserConfig(resolution=4)

    def test_depth_bound(self):
        with pytest.raises(ValueError):
            DenoiserConfig(resolution=8, depth=2)
        DenoiserConfig(resolution=16, depth=2)  # fine

    def test_parameterization_enum(self):
        with pytest.raises(ValueError):
            DenoiserConfig(resolution=16, parameterization="x0")


class TestPredict:
    def test_zero_initialized_head_outputs_zero(self):
        model = Denoiser(tiny_config())
        z = torch.randn(2, 3, 8, 8)
        out = predict(model, z, 1.3, empty_bundle(2, model.config))
        assert torch.equal(out, torch.zeros_like(z))

    def test_deterministic(self):
        model = Denoiser(tiny_config())
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        z = torch.randn(2, 3, 8, 8)
        cond = empty_bundle(2, model.config)
        a = predict(model, z, 0.4, cond)
        b = predict(model, z, 0.4, cond)
        assert torch.equal(a, b)

    @pytest.mark.parametrize("res", [16, 32, 64])
    def test_output_shape_matches_input(self, res):
        cfg = DenoiserConfig(resolution=res, base_width=8, depth=2, num_classes=4)
        model = Denoiser(cfg)
        z = torch.randn(1, 3, res, res)
        assert predict(model, z, 0.0, empty_bundle(1, cfg)).shape == z.shape

    def test_resolution_mismatch_rejected(self):
        model = Denoiser(tiny_config())
        with pytest.raises(ValueError):
            predict(model, torch.randn(1, 3, 16, 16), 0.0, empty_bundle(1, model.config))

    def test_mask_shape_rejected(self):
        model = Denoiser(tiny_config())
        bad = ConditioningBundle(mask=torch.zeros(1, 5, 8, 8))
        with pytest.raises(ValueError):
            predict(model, torch.randn(1, 3, 8, 8), 0.0, bad)

    def test_nonfinite_rejected(self):
        model = Denoiser(tiny_config())
        z = torch.full((1, 3, 8, 8), float("nan"))
        with pytest.raises(ValueError):
            predict(model, z, 0.0, empty_bundle(1, model.config))

    def test_null_token_consistency(self):
        # the null bundle's output ignores whatever content it replaced
        model = Denoiser(tiny_config())
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        z = torch.randn(1, 3, 8, 8)
        a = ConditioningBundle(mask=torch.ones(1, 2, 8, 8), scalars=torch.rand(1, 2))
        b = ConditioningBundle(mask=torch.zeros(1, 2, 8, 8), scalars=-torch.rand(1, 2))
        out_a = predict(model, z, 0.2, a.null_like())
        out_b = predict(model, z, 0.2, b.null_like())
        assert torch.equal(out_a, out_b)


class TestDropConditioning:
    def _bundle(self):
        return ConditioningBundle(mask=torch.ones(1, 2, 8, 8), scalars=torch.ones(1, 2), lowres=torch.ones(1, 3, 8, 8))

    def test_p_zero_never_drops(self):
        cond = self._bundle()
        for u in (0.0, 0.5, 0.999):
            assert drop_conditioning(cond, u, 0.0) is cond

    def test_p_one_always_drops(self):
        for u in (0.0, 0.5, 0.999):
            out = drop_conditioning(self._bundle(), u, 1.0)
            assert out.is_null
            assert torch.equal(out.mask, torch.zeros_like(out.mask))
            assert torch.equal(out.scalars, torch.zeros_like(out.scalars))

    def test_threshold_arithmetic(self):
        cond = self._bundle()
        assert drop_conditioning(cond, 0.05, 0.1).is_null
        assert drop_conditioning(cond, 0.95, 0.1) is cond

    def test_lowres_preserved_in_null(self):
        cond = self._bundle()
        out = drop_conditioning(cond, 0.0, 1.0)
        assert out.lowres is cond.lowres

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            drop_conditioning(self._bundle(), 0.5, 1.5)


class TestGradients:
    def test_training_loss_matches_finite_differences(self, schedule):
        torch.manual_seed(7)
        model = Denoiser(tiny_config()).double()
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        x0 = (torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1) * 0.8
        cond = empty_bundle(2, model.config, dtype=torch.float64)

        def loss_fn():
            gen = torch.Generator().manual_seed(123)
            return training_loss(model, schedule, x0, cond, gen)

        loss = loss_fn()
        loss.backward()
        params = [p for p in model.parameters() if p.grad is not None]
        rng = torch.Generator().manual_seed(5)
        picks = []
        for _ in range(10):
            pi = int(torch.randint(len(params), (1,), generator=rng))
            fi = int(torch.randint(params[pi].numel(), (1,), generator=rng))
            picks.append((pi, fi))
        fd = finite_diff_grads(loss_fn, params, picks, h=1e-5)
        for (pi, fi), fd_val in zip(picks, fd):
            an_val = float(params[pi].grad.view(-1)[fi])
            assert relative_error(an_val, fd_val) <= 1e-3


class TestConditioningSensitivity:
    def test_mask_changes_prediction_after_overfit(self, schedule):
        torch.manual_seed(3)
        cfg = tiny_config(cond_dropout_p=0.1)
        model = Denoiser(cfg)
        mask_a = torch.zeros(1, 2, 8, 8)
        mask_a[:, 0, :4] = 1.0
        mask_b = torch.zeros(1, 2, 8, 8)
        mask_b[:, 1, 4:] = 1.0
        x = torch.stack([torch.full((3, 8, 8), 0.5), torch.full((3, 8, 8), -0.5)])
        cond = ConditioningBundle(mask=torch.cat([mask_a, mask_b]), scalars=torch.zeros(2, 2))
        opt = torch.optim.Adam(model.parameters(), lr=2e-3)
        gen = torch.Generator().manual_seed(0)
        for _ in range(300):
            opt.zero_grad()
            loss = training_loss(model, schedule, x, cond, gen)
            loss.backward()
            opt.step()
        z = torch.randn(1, 3, 8, 8)
        with torch.no_grad():
            out_a = predict(model, z, 0.0, ConditioningBundle(mask=mask_a, scalars=torch.zeros(1, 2)))
            out_b = predict(model, z, 0.0, ConditioningBundle(mask=mask_b, scalars=torch.zeros(1, 2)))
        assert float((out_a - out_b).abs().max()) > 1e-3


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        model = Denoiser(tiny_config())
        path = save_checkpoint(tmp_path / "m.pt", kind="denoiser", config=model.config,
                               state_dict=model.state_dict(), step=42)
        ckpt = load_checkpoint(path)
        assert ckpt.kind == "denoiser"
        assert ckpt.step == 42
        clone = Denoiser(DenoiserConfig(**ckpt.config))
        clone.load_state_dict(ckpt.state_dict)
        z = torch.randn(1, 3, 8, 8)
        cond = empty_bundle(1, model.config)
        assert torch.equal(predict(model, z, 0.1, cond), predict(clone, z, 0.1, cond))

    def test_magic_enforced(self, tmp_path):
        bad = tmp_path / "bad.pt"
        torch.save({"magic": "NOPE", "kind": "denoiser"}, bad)
        with pytest.raises(ValueError):
            load_checkpoint(bad)
        assert MAGIC == "MASKDIFF-CKPT-1"

    def test_kind_validated(self, tmp_path):
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "x.pt", kind="other", config={}, state_dict={})
