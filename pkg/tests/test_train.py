import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from dped import nets
from dped import train as tm
from dped.errors import EmptyDataset, NonFiniteGradient, NonFiniteLoss, ShapeError


@pytest.fixture
def tiny_cfg(small_disc_cfg):
    return tm.TrainConfig(
        batch_size=2,
        iterations=2,
        pretrain_iters=2,
        loss_profile="mse_texture",
        generator_channels=16,
        disc_config=small_disc_cfg,
        checkpoint_every=1,
    )


class TestConfig:
    def test_validate_rejects_bad_values(self):
        with pytest.raises(ValueError):
            tm.TrainConfig(batch_size=0).validate()
        with pytest.raises(ValueError):
            tm.TrainConfig(lr=0.0).validate()
        with pytest.raises(ValueError):
            tm.TrainConfig(adam_beta1=1.0).validate()
        with pytest.raises(ValueError):
            tm.TrainConfig(loss_profile="everything").validate()

    def test_hash_stable_and_sensitive(self):
        a, b = tm.TrainConfig(), tm.TrainConfig()
        assert a.hash() == b.hash()
        assert a.hash() != tm.TrainConfig(lr=1e-3).hash()

    def test_profiles_paper_order(self):
        assert tm.PROFILES == ("full", "content_texture", "mse_texture", "mse")


class TestAdamStep:
    def test_zero_gradient_no_change(self):
        cfg = tm.TrainConfig()
        p = [torch.randn(3, 4, dtype=torch.float64)]
        z = [torch.zeros(3, 4, dtype=torch.float64)]
        new_p, _, _ = tm.adam_step(p, z, [torch.zeros_like(p[0])], [torch.zeros_like(p[0])], 1, cfg)
        np.testing.assert_array_equal(new_p[0].numpy(), p[0].numpy())

    def test_scalar_first_step(self):
        cfg = tm.TrainConfig()
        p = [torch.zeros(1, dtype=torch.float64)]
        g = [torch.ones(1, dtype=torch.float64)]
        new_p, _, _ = tm.adam_step(p, g, [torch.zeros(1, dtype=torch.float64)], [torch.zeros(1, dtype=torch.float64)], 1, cfg)
        # bias-corrected m_hat = v_hat = 1, so the step is -lr / (1 + eps)
        assert float(new_p[0]) == pytest.approx(-cfg.lr / (1 + cfg.adam_eps), rel=1e-12)

    def test_purity(self):
        cfg = tm.TrainConfig()
        p = [torch.randn(5, dtype=torch.float64)]
        g = [torch.randn(5, dtype=torch.float64)]
        m = [torch.randn(5, dtype=torch.float64).abs()]
        v = [torch.randn(5, dtype=torch.float64).abs()]
        out1 = tm.adam_step(p, g, m, v, 3, cfg)
        out2 = tm.adam_step(p, g, m, v, 3, cfg)
        for a, b in zip(out1, out2):
            np.testing.assert_array_equal(a[0].numpy(), b[0].numpy())

    def test_shape_mismatch(self):
        cfg = tm.TrainConfig()
        with pytest.raises(ShapeError):
            tm.adam_step([torch.zeros(3)], [torch.zeros(4)], [torch.zeros(3)], [torch.zeros(3)], 1, cfg)

    def test_nonfinite_gradient(self):
        cfg = tm.TrainConfig()
        g = [torch.tensor([float("nan")])]
        with pytest.raises(NonFiniteGradient):
            tm.adam_step([torch.zeros(1)], g, [torch.zeros(1)], [torch.zeros(1)], 1, cfg)


class TestPretrain:
    def test_brightness_separable_accuracy(self, toy_pairs, small_disc_cfg):
        data = [((0.25 * dst).astype(np.float32), dst) for _, dst in toy_pairs]
        cfg = tm.TrainConfig(
            batch_size=8, iterations=1, pretrain_iters=40,
            loss_profile="mse_texture", generator_channels=16, disc_config=small_disc_cfg,
        )
        _, acc = tm.pretrain_discriminator(data, cfg)
        assert acc > 0.9

    def test_zero_iters_returns_init(self, toy_pairs, small_disc_cfg):
        cfg = tm.TrainConfig(batch_size=2, pretrain_iters=0, disc_config=small_disc_cfg)
        disc, acc = tm.pretrain_discriminator(toy_pairs, cfg)
        init = nets.discriminator_init(cfg.seed + 1, small_disc_cfg)
        for a, b in zip(disc.parameters(), init.parameters()):
            np.testing.assert_array_equal(a.detach().numpy(), b.detach().numpy())
        assert acc == 0.5

    def test_empty_dataset(self, small_disc_cfg):
        with pytest.raises(EmptyDataset):
            tm.pretrain_discriminator([], tm.TrainConfig(disc_config=small_disc_cfg))

    def test_deterministic(self, toy_pairs, small_disc_cfg):
        torch.set_num_threads(1)
        cfg = tm.TrainConfig(batch_size=4, pretrain_iters=5, disc_config=small_disc_cfg)
        d1, a1 = tm.pretrain_discriminator(toy_pairs, cfg)
        d2, a2 = tm.pretrain_discriminator(toy_pairs, cfg)
        assert a1 == a2
        for p1, p2 in zip(d1.parameters(), d2.parameters()):
            np.testing.assert_array_equal(p1.detach().numpy(), p2.detach().numpy())


class TestTrainStep:
    def test_mse_profile_evaluates_only_mse(self, toy_pairs, tiny_cfg):
        cfg = replace(tiny_cfg, loss_profile="mse")
        state = tm.init_state(cfg)
        tm.train_step(state, toy_pairs[:2], cfg)
        assert state.counters["mse"] == 1
        assert state.counters["content"] == 0
        assert state.counters["texture"] == 0
        assert state.counters["color"] == 0
        assert state.counters["tv"] == 0

    def test_tiny_lr_keeps_weights_close_but_reports_losses(self, toy_pairs, tiny_cfg):
        # lr must be > 0 by contract; an epsilon rate pins the weights in place
        cfg = replace(tiny_cfg, lr=1e-30, loss_profile="mse")
        state = tm.init_state(cfg)
        before = [p.detach().clone() for p in state.gen.parameters()]
        breakdown, _, _ = tm.train_step(state, toy_pairs[:2], cfg)
        assert breakdown.content > 0.0
        for p, b in zip(state.gen.parameters(), before):
            assert torch.abs(p - b).max() < 1e-20

    def test_wrong_batch_size(self, toy_pairs, tiny_cfg):
        state = tm.init_state(tiny_cfg)
        with pytest.raises(ShapeError):
            tm.train_step(state, toy_pairs[:3], tiny_cfg)

    def test_nan_input_aborts(self, toy_pairs, tiny_cfg):
        cfg = replace(tiny_cfg, loss_profile="mse")
        state = tm.init_state(cfg)
        src, dst = toy_pairs[0]
        bad = src.copy()
        bad[0, 0, 0] = np.nan
        with pytest.raises((NonFiniteLoss, NonFiniteGradient)):
            tm.train_step(state, [(bad, dst), toy_pairs[1]], cfg)

    def test_zero_weight_equals_removed_code_path(self, toy_pairs, tiny_cfg, vgg):
        # "full" with w_color = 0 must match "content_texture" exactly
        torch.set_num_threads(1)
        w0 = replace(tiny_cfg, loss_profile="full", content_layer="relu1_1",
                     loss_weights=tm.LossWeights(w_color=0.0))
        removed = replace(tiny_cfg, loss_profile="content_texture", content_layer="relu1_1")
        params = []
        for cfg in (w0, removed):
            state = tm.init_state(cfg)
            tm.train_step(state, toy_pairs[:2], cfg, vgg=vgg)
            params.append([p.detach().clone() for p in state.gen.parameters()])
        for a, b in zip(*params):
            np.testing.assert_array_equal(a.numpy(), b.numpy())


class TestCheckpoint:
    def test_round_trip(self, toy_pairs, tiny_cfg, tmp_path):
        state = tm.init_state(tiny_cfg)
        tm.train_step(state, toy_pairs[:2], tiny_cfg)
        tm.save_checkpoint(state, tiny_cfg, tmp_path / "ck")
        back = tm.load_checkpoint(tmp_path / "ck", tiny_cfg)
        assert back.iteration == state.iteration
        assert back.counters == state.counters
        assert back.adam_gen.t == state.adam_gen.t
        for a, b in zip(back.gen.parameters(), state.gen.parameters()):
            np.testing.assert_array_equal(a.detach().numpy(), b.detach().numpy())
        for a, b in zip(back.adam_gen.m, state.adam_gen.m):
            np.testing.assert_array_equal(a.numpy(), b.numpy())
        assert back.rng.bit_generator.state == state.rng.bit_generator.state

    def test_manifest_contents(self, toy_pairs, tiny_cfg, tmp_path):
        state = tm.init_state(tiny_cfg)
        tm.save_checkpoint(state, tiny_cfg, tmp_path / "ck")
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert manifest["iter"] == 0
        assert manifest["seed"] == tiny_cfg.seed
        assert manifest["config_hash"] == tiny_cfg.hash()


class TestTrainLoop:
    def test_single_iteration_artifacts(self, toy_pairs, tiny_cfg, tmp_path):
        cfg = replace(tiny_cfg, iterations=1, pretrain_iters=1)
        result = tm.train(toy_pairs, cfg, tmp_path, deterministic=True)
        rows = [json.loads(line) for line in result.log_path.read_text().splitlines()]
        assert len(rows) == 1
        assert set(rows[0]) == {"iter", "total", "content", "texture", "color", "tv", "d_loss", "d_acc", "wallclock_ms"}
        assert rows[0]["iter"] == 1
        assert (result.checkpoint_dir / "generator.dpedw").exists()
        assert (result.checkpoint_dir / "moments.dpedw").exists()
        assert (result.checkpoint_dir / "rng_state.json").exists()

    def test_empty_dataset(self, tiny_cfg, tmp_path):
        with pytest.raises(EmptyDataset):
            tm.train([], tiny_cfg, tmp_path)

    def test_missing_vgg_rejected(self, toy_pairs, tiny_cfg, tmp_path):
        cfg = replace(tiny_cfg, loss_profile="full")
        with pytest.raises(ValueError):
            tm.train(toy_pairs, cfg, tmp_path)

    def test_mse_profile_skips_discriminator(self, toy_pairs, tiny_cfg, tmp_path):
        cfg = replace(tiny_cfg, loss_profile="mse", iterations=2)
        result = tm.train(toy_pairs, cfg, tmp_path, deterministic=True)
        rows = [json.loads(line) for line in result.log_path.read_text().splitlines()]
        assert all(r["d_loss"] == 0.0 for r in rows)
        assert result.state.counters["texture"] == 0
