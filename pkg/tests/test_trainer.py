import numpy as np
import pytest

from sptlab.bagstore import SyntheticSpec, generate_synthetic
from sptlab.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from sptlab.errors import ConfigError
from sptlab.objectives import ObjectiveConfig
from sptlab.optim import (OptimizerError, adamw_init, adamw_step,
                          ema_update, lr_at)
from sptlab.rng import RandomSource
from sptlab.trainer import (GRADCHECK_COMPONENTS, ModelConfig, TrainConfig, fit,
                            grad_check)
from sptlab.transforms import TransformConfig


def tiny_dataset(seed=7, sep=1.5, bags=8):
    spec = SyntheticSpec(num_classes=2, bags_per_class=bags // 2, val_bags_per_class=2,
                         grid_side=8, tokens_per_bag=24, dim=4, num_phenotypes=2,
                         phenotype_separation=sep, noise_sigma=1.0, seed=seed)
    train, _ = generate_synthetic(spec)
    return train


def tiny_config(objective="simclr", epochs=1, batch_size=4, seed=0, **kw):
    return TrainConfig(
        model=ModelConfig(d_model=16, n_layers=1, n_heads=2, ffn_mult=2,
                          d_proj=8, fourier_dim=8),
        objective=ObjectiveConfig(name=objective, temperature=0.5),
        transform=TransformConfig(crop_area_range=(9.0, 36.0),
                                  mask_ratio_range=(0.4, 0.9), max_token_limit=12),
        batch_size=batch_size, epochs=epochs, lr_max=1e-3, lr_min=1e-5,
        warmup_frac=0.1, weight_decay=1e-4, seed=seed, **kw)


class TestSchedule:
    def test_warmup_end_hits_peak(self):
        # warmup covers ceil(0.1 * 100) = 10 steps
        assert lr_at(10, 100, 0.1, 1e-3, 1e-6) == pytest.approx(1e-3)

    def test_final_step_hits_floor(self):
        assert lr_at(100, 100, 0.1, 1e-3, 1e-6) == pytest.approx(1e-6)

    def test_cosine_midpoint(self):
        # progress 0.5 through the decay -> average of the endpoints
        assert lr_at(55, 100, 0.1, 1e-3, 1e-6) == pytest.approx((1e-3 + 1e-6) / 2)

    def test_monotone_after_warmup(self):
        lrs = [lr_at(s, 200, 0.1, 1e-2, 1e-5) for s in range(20, 201)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_zero_warmup(self):
        assert lr_at(0, 50, 0.0, 1e-3, 1e-6) == pytest.approx(1e-3)

    def test_out_of_range(self):
        with pytest.raises(OptimizerError):
            lr_at(101, 100, 0.1, 1e-3, 1e-6)


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        params = {"w": np.array([1.0, -2.0])}
        state = adamw_init(params)
        adamw_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_closed_form(self):
        # bias correction makes m-hat = v-hat^0.5 = 1 -> step of -lr (up to eps)
        params = {"w": np.array([0.0])}
        state = adamw_init(params)
        adamw_step(params, {"w": np.array([1.0])}, state, lr=0.1,
                   beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
        np.testing.assert_allclose(params["w"], [-0.1], atol=1e-8)

    def test_pure_decoupled_decay(self):
        params = {"w": np.array([1.0])}
        state = adamw_init(params)
        adamw_step(params, {"w": np.array([0.0])}, state, lr=0.1, weight_decay=0.01)
        np.testing.assert_allclose(params["w"], [0.999], atol=1e-15)

    def test_non_finite_gradient_names_parameter(self):
        params = {"bad.tensor": np.array([1.0])}
        state = adamw_init(params)
        with pytest.raises(OptimizerError, match="bad.tensor"):
            adamw_step(params, {"bad.tensor": np.array([np.nan])}, state, lr=0.1)


class TestEMA:
    def test_momentum_zero_copies(self):
        target = {"w": np.zeros(3)}
        ema_update(target, {"w": np.ones(3)}, 0.0)
        np.testing.assert_array_equal(target["w"], 1.0)

    def test_momentum_near_one_freezes(self):
        target = {"w": np.zeros(3)}
        ema_update(target, {"w": np.ones(3)}, 1.0 - 1e-12)
        np.testing.assert_allclose(target["w"], 0.0, atol=1e-10)

    def test_geometric_series(self):
        target = {"w": np.zeros(1)}
        online = {"w": np.ones(1)}
        for _ in range(100):
            ema_update(target, online, 0.99)
        np.testing.assert_allclose(target["w"], [1.0 - 0.99**100], atol=1e-12)
        np.testing.assert_allclose(target["w"], [0.6340], atol=5e-5)


class TestFit:
    def test_step_count(self):
        train = tiny_dataset()
        ckpt, metrics = fit(train, tiny_config(epochs=1, batch_size=4))
        assert len(metrics) == 2  # 8 bags, batch 4 -> 2 steps
        assert ckpt.step == 2

    def test_bitwise_determinism(self):
        train = tiny_dataset()
        cfg = tiny_config(epochs=2)
        ckpt_a, metrics_a = fit(train, cfg)
        ckpt_b, metrics_b = fit(train, cfg)
        assert metrics_a == metrics_b
        for k in ckpt_a.params:
            assert np.array_equal(ckpt_a.params[k], ckpt_b.params[k]), k
        for k in ckpt_a.opt_m:
            assert np.array_equal(ckpt_a.opt_m[k], ckpt_b.opt_m[k]), k

    def test_checkpoint_resume_matches_uninterrupted(self, tmp_path):
        train = tiny_dataset()
        full_ckpt, _ = fit(train, tiny_config(epochs=3))
        half_ckpt, _ = fit(train, tiny_config(epochs=3, checkpoint_every=3),
                           out_dir=tmp_path)
        mid = load_checkpoint(tmp_path / "checkpoint-000003.ckpt")
        assert mid.step == 3
        resumed, _ = fit(train, tiny_config(epochs=3), start=mid)
        assert resumed.step == full_ckpt.step
        for k in full_ckpt.params:
            assert np.array_equal(resumed.params[k], full_ckpt.params[k]), k

    def test_byol_target_updates_and_stop_gradient(self):
        train = tiny_dataset()
        cfg = tiny_config(objective="byol", epochs=1)
        ckpt, metrics = fit(train, cfg)
        assert ckpt.target_params is not None
        assert not any(k.startswith("head.pred.") for k in ckpt.target_params)
        # the target must be an EMA mixture: neither frozen at init nor equal
        # to the online weights
        init_ckpt, _ = fit(train, tiny_config(objective="byol", epochs=0))
        for k in ckpt.target_params:
            if ckpt.target_params[k].std() == 0:
                continue
            assert not np.array_equal(ckpt.target_params[k], ckpt.params[k])
        assert any(not np.array_equal(ckpt.target_params[k], init_ckpt.params[k])
                   for k in ckpt.target_params)

    def test_objectives_all_trainable(self):
        train = tiny_dataset()
        for objective in ("simclr", "vicreg", "supcon", "byol"):
            ckpt, metrics = fit(train, tiny_config(objective=objective, epochs=1))
            assert all(np.isfinite(m["loss"]) for m in metrics), objective

    def test_supcon_requires_labels(self):
        train = tiny_dataset()
        for bag in train.bags:
            bag.label = None
        with pytest.raises(ConfigError, match="supcon"):
            fit(train, tiny_config(objective="supcon"))

    def test_batch_larger_than_dataset(self):
        train = tiny_dataset()
        with pytest.raises(ConfigError, match="batch_size"):
            fit(train, tiny_config(batch_size=64))

    def test_metrics_log_written(self, tmp_path):
        train = tiny_dataset()
        fit(train, tiny_config(epochs=1), out_dir=tmp_path)
        lines = (tmp_path / "metrics.ndjson").read_text().strip().splitlines()
        assert len(lines) == 2
        assert (tmp_path / "checkpoint.ckpt").exists()

    def test_loss_decreases_on_separable_data(self):
        # planted structure with wide separation: contrastive training must cut
        # the loss by at least 30% (first-20 vs last-20 step means)
        spec = SyntheticSpec(num_classes=3, bags_per_class=20, val_bags_per_class=10,
                             grid_side=12, tokens_per_bag=64, dim=8, num_phenotypes=4,
                             phenotype_separation=6.0, noise_sigma=1.0, seed=7)
        train, _ = generate_synthetic(spec)
        cfg = TrainConfig(
            model=ModelConfig(d_model=32, n_layers=2, n_heads=4, ffn_mult=2,
                              d_proj=16, fourier_dim=16),
            objective=ObjectiveConfig(name="simclr", temperature=0.1),
            transform=TransformConfig(crop_area_range=(25.0, 81.0),
                                      mask_ratio_range=(0.3, 0.8), max_token_limit=32),
            batch_size=16, epochs=100, lr_max=1e-3, lr_min=1e-5,
            warmup_frac=0.1, weight_decay=1e-4, seed=0)
        _, metrics = fit(train, cfg)
        losses = [m["loss"] for m in metrics]
        first, last = np.mean(losses[:20]), np.mean(losses[-20:])
        assert last < first * 0.7


class TestCheckpointIO:
    def test_round_trip_bitwise(self, tmp_path):
        rng = RandomSource(0)
        ckpt = Checkpoint(
            step=17, objective="simclr", arch={"d_in": 4}, config={"x": 1},
            params={"a": rng.child("a").normal((3, 4)), "b": np.zeros(2)},
            opt_m={"a": rng.child("m").normal((3, 4)), "b": np.zeros(2)},
            opt_v={"a": rng.child("v").normal((3, 4)) ** 2, "b": np.zeros(2)},
            target_params={"a": rng.child("t").normal((3, 4))},
        )
        save_checkpoint(ckpt, tmp_path / "c.ckpt")
        loaded = load_checkpoint(tmp_path / "c.ckpt")
        assert loaded.step == 17 and loaded.objective == "simclr"
        assert loaded.config == {"x": 1}
        for group in ("params", "opt_m", "opt_v", "target_params"):
            a, b = getattr(ckpt, group), getattr(loaded, group)
            assert set(a) == set(b)
            for k in a:
                assert np.array_equal(a[k], b[k])

    def test_identical_saves_are_byte_identical(self, tmp_path):
        ckpt = Checkpoint(step=1, objective="vicreg", arch={}, config={},
                          params={"w": np.arange(6.0).reshape(2, 3)})
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        save_checkpoint(ckpt, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


class TestGradCheck:
    @pytest.mark.parametrize("component", GRADCHECK_COMPONENTS)
    def test_component_passes(self, component):
        report = grad_check(component, seed=0)
        assert report.passed, (component, report.max_error)

    def test_unknown_component(self):
        with pytest.raises(ConfigError, match="unknown gradcheck component"):
            grad_check("everything")
