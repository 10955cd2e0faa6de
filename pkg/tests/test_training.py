import numpy as np
import pytest
import torch

from msf import (
    Codec,
    ConfigError,
    DivergenceError,
    ScaleSchedule,
    TrainConfig,
    VelocityConfig,
    extract_priors,
    extract_residuals,
    init_params,
    make_example,
    plateau_reached,
    prepare_training_set,
    rf_loss,
    rf_loss_and_grads,
    train_stage,
)

from conftest import random_grid


def make_items(rng, schedule, n=6, num_classes=4, channels=2):
    h, w = schedule.full_size
    images = [
        (random_grid(rng, h, w, channels), int(rng.integers(num_classes)))
        for _ in range(n)
    ]
    return prepare_training_set(images, schedule, Codec())


@pytest.fixture
def items(rng, two_scale_schedule):
    return make_items(rng, two_scale_schedule)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(stage=2, steps=10)
        with pytest.raises(ConfigError):
            TrainConfig(stage=0, steps=0)
        with pytest.raises(ConfigError):
            TrainConfig(stage=0, steps=10, batch_sizes=(0,))
        with pytest.raises(ConfigError):
            TrainConfig(stage=0, steps=10, cfg_dropout_prob=1.5)

    def test_weight_and_batch_defaults(self):
        cfg = TrainConfig(stage=1, steps=5, batch_sizes=(8, 4), loss_weights=(2.0,))
        assert cfg.weight(0) == 2.0
        assert cfg.weight(1) == 1.0
        assert cfg.batch_size(0) == 8
        assert cfg.batch_size(1) == 4
        assert cfg.batch_size(3) == 4


class TestMakeExample:
    def test_interpolation_identity(self, items, rng):
        item = items[0]
        ex = make_example(item.pyramid, item.priors, item.class_id, 1, rng)
        t = np.float32(ex.t)
        want_zt = t * ex.z1.data + (np.float32(1.0) - t) * ex.z0.data
        assert np.array_equal(ex.z_t.data, want_zt)
        assert np.array_equal(ex.target.data, ex.z1.data - ex.z0.data)
        assert np.array_equal(ex.z0.data, item.pyramid.residuals[1].data)
        assert ex.cond.prior is item.priors.priors[0]
        assert 0.0 <= ex.t <= 1.0

    def test_scale_zero_has_no_prior(self, items, rng):
        ex = make_example(items[0].pyramid, items[0].priors, items[0].class_id, 0, rng)
        assert ex.cond.prior is None
        assert ex.cond.scale_index == 0

    def test_forced_t(self, items, rng):
        ex = make_example(
            items[0].pyramid, items[0].priors, items[0].class_id, 0, rng, t=0.0
        )
        assert ex.t == 0.0
        assert np.array_equal(ex.z_t.data, ex.z0.data)
        ex = make_example(
            items[0].pyramid, items[0].priors, items[0].class_id, 0, rng, t=1.0
        )
        assert np.array_equal(ex.z_t.data, ex.z1.data)

    def test_label_dropout_rate(self, items):
        rng = np.random.default_rng(77)
        n = 2000
        null = 4
        hits = 0
        for _ in range(n):
            ex = make_example(
                items[0].pyramid,
                items[0].priors,
                items[0].class_id,
                0,
                rng,
                cfg_dropout_prob=0.1,
                null_class=null,
            )
            hits += ex.cond.class_id == null
        assert 0.05 < hits / n < 0.15

    def test_dropout_requires_null_class(self, items, rng):
        with pytest.raises(ValueError, match="null"):
            make_example(
                items[0].pyramid,
                items[0].priors,
                items[0].class_id,
                0,
                rng,
                cfg_dropout_prob=0.1,
            )


class TestRfLoss:
    def test_zero_field_oracle(self, tiny_params, items, rng):
        # the freshly initialized field predicts v = 0 everywhere, so the
        # loss must equal the mean squared target computed by hand
        examples = [
            make_example(it.pyramid, it.priors, it.class_id, s, rng)
            for it in items[:3]
            for s in (0, 1)
        ]
        loss = float(rf_loss(tiny_params, examples).detach())
        by_scale = {0: [], 1: []}
        for e in examples:
            by_scale[e.scale_index].append(
                np.mean(e.target.data.astype(np.float64) ** 2)
            )
        want = sum(float(np.mean(v)) for v in by_scale.values())
        assert loss == pytest.approx(want, rel=1e-5)

    def test_weights_scale_terms(self, tiny_params, items, rng):
        examples = [
            make_example(items[0].pyramid, items[0].priors, items[0].class_id, 0, rng)
        ]
        base = float(rf_loss(tiny_params, examples).detach())
        double = float(rf_loss(tiny_params, examples, loss_weights=(2.0,)).detach())
        assert double == pytest.approx(2.0 * base, rel=1e-6)

    def test_zero_weight_scale_skipped(self, tiny_params, items, rng):
        examples = [
            make_example(it.pyramid, it.priors, it.class_id, s, rng)
            for it in items[:2]
            for s in (0, 1)
        ]
        only1 = float(
            rf_loss(tiny_params, examples, loss_weights=(0.0, 1.0)).detach()
        )
        just_scale1 = [e for e in examples if e.scale_index == 1]
        want = float(rf_loss(tiny_params, just_scale1).detach())
        assert only1 == pytest.approx(want, rel=1e-6)
        with pytest.raises(ValueError, match="zero"):
            rf_loss(tiny_params, examples, loss_weights=(0.0, 0.0))

    def test_empty_batch_rejected(self, tiny_params):
        with pytest.raises(ValueError, match="empty"):
            rf_loss(tiny_params, [])


class TestGradients:
    def test_matches_finite_differences(self, rng):
        config = VelocityConfig(
            channels=1,
            scale_sizes=((4, 4), (8, 8)),
            patch_sizes=(2, 2),
            hidden_width=16,
            depth=1,
            heads=2,
            num_classes=3,
        )
        params = init_params(config, seed=0).double()
        gen = torch.Generator().manual_seed(5)
        with torch.no_grad():
            for p in params.parameters():
                p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.05)
        schedule = ScaleSchedule(((4, 4), (8, 8)))
        items = make_items(rng, schedule, n=3, num_classes=3, channels=1)
        examples = [
            make_example(it.pyramid, it.priors, it.class_id, s, rng)
            for it in items[:2]
            for s in (0, 1)
        ]
        _, grads = rf_loss_and_grads(params, examples)
        h = 1e-4
        idx_rng = np.random.default_rng(0)
        for name, p in params.named_parameters():
            an = grads[name].ravel()
            flat = p.detach().view(-1)
            k = min(6, flat.numel())
            sel = idx_rng.choice(flat.numel(), size=k, replace=False)
            fd = np.zeros(k)
            for j, i in enumerate(sel):
                with torch.no_grad():
                    orig = float(flat[i])
                    flat[i] = orig + h
                    up = float(rf_loss(params, examples).detach())
                    flat[i] = orig - h
                    down = float(rf_loss(params, examples).detach())
                    flat[i] = orig
                fd[j] = (up - down) / (2 * h)
            an_sel = an[sel]
            denom = max(np.linalg.norm(an_sel), 1e-8)
            assert np.linalg.norm(fd - an_sel) / denom < 1e-3, name

    def test_unused_parameters_get_zero_grads(self, tiny_params, items, rng):
        # a scale-0-only batch cannot touch the other scale's embeddings
        examples = [
            make_example(items[0].pyramid, items[0].priors, items[0].class_id, 0, rng)
        ]
        _, grads = rf_loss_and_grads(tiny_params, examples)
        assert np.all(grads["pos_embed.1"] == 0.0)
        assert grads["pos_embed.0"].shape == (1, 16, 32)


class TestTrainStage:
    def test_stage1_requires_checkpoint(self, tiny_params, items):
        with pytest.raises(ConfigError, match="stage-0"):
            train_stage(tiny_params, items, TrainConfig(stage=1, steps=1))

    def test_stage1_joint_from_scratch_allowed(self, tiny_params, items):
        cfg = TrainConfig(
            stage=1, steps=1, batch_sizes=(4, 2), joint_from_scratch=True
        )
        result = train_stage(tiny_params, items, cfg)
        assert len(result.loss_curve) == 1

    def test_empty_dataset_rejected(self, tiny_params):
        with pytest.raises(ValueError, match="empty"):
            train_stage(tiny_params, [], TrainConfig(stage=0, steps=1))

    def test_stage0_trains_base_scale_only(self, tiny_config, items):
        params = init_params(tiny_config, seed=0)
        before = {
            n: p.detach().clone() for n, p in params.named_parameters()
        }
        result = train_stage(
            params, items, TrainConfig(stage=0, steps=3, batch_sizes=(4, 2))
        )
        assert sorted(result.scale_curves) == [0]
        after = dict(params.named_parameters())
        assert not torch.equal(before["pos_embed.0"], after["pos_embed.0"])
        assert torch.equal(before["pos_embed.1"], after["pos_embed.1"])

    def test_stage1_trains_all_scales(self, tiny_config, items):
        params = init_params(tiny_config, seed=0)
        result = train_stage(
            params,
            items,
            TrainConfig(stage=1, steps=3, batch_sizes=(4, 2)),
            stage0_checkpoint=True,
        )
        assert sorted(result.scale_curves) == [0, 1]
        assert all(len(c) == 3 for c in result.scale_curves.values())

    def test_deterministic_per_seed(self, tiny_config, items):
        curves = []
        for _ in range(2):
            params = init_params(tiny_config, seed=0)
            r = train_stage(
                params, items, TrainConfig(stage=0, steps=4, batch_sizes=(4, 2), seed=9)
            )
            curves.append(r.loss_curve)
        assert curves[0] == curves[1]

    def test_loss_decreases(self, tiny_config, rng, two_scale_schedule):
        # a single repeated item is easy to fit quickly
        items = make_items(rng, two_scale_schedule, n=1)
        params = init_params(tiny_config, seed=0)
        cfg = TrainConfig(
            stage=0, steps=60, batch_sizes=(8, 4), learning_rate=1e-3,
            cfg_dropout_prob=0.0,
        )
        result = train_stage(params, items, cfg)
        head = np.mean(result.loss_curve[:10])
        tail = np.mean(result.loss_curve[-10:])
        assert tail < head

    def test_divergence_diagnostic(self, tiny_config, items):
        params = init_params(tiny_config, seed=0)
        with torch.no_grad():
            next(params.parameters()).fill_(float("nan"))
        with pytest.raises(DivergenceError) as err:
            train_stage(params, items, TrainConfig(stage=0, steps=3, batch_sizes=(2, 2)))
        assert err.value.step == 0
        assert err.value.loss_curve == []

    def test_zero_weight_scale_untouched_in_stage1(self, tiny_config, items):
        params = init_params(tiny_config, seed=0)
        before = dict((n, p.detach().clone()) for n, p in params.named_parameters())
        train_stage(
            params,
            items,
            TrainConfig(
                stage=1, steps=2, batch_sizes=(4, 2), loss_weights=(1.0, 0.0)
            ),
            stage0_checkpoint=True,
        )
        after = dict(params.named_parameters())
        assert torch.equal(before["pos_embed.1"], after["pos_embed.1"])
        assert not torch.equal(before["pos_embed.0"], after["pos_embed.0"])


class TestPlateau:
    def test_short_curves_not_converged(self):
        assert not plateau_reached([1.0, 0.9])

    def test_flat_curve_converges(self):
        assert plateau_reached([1.0] * 100)

    def test_decreasing_curve_not_converged(self):
        curve = [1.0 / (i + 1) for i in range(100)]
        assert not plateau_reached(curve)


class TestPrepareTrainingSet:
    def test_structure(self, rng, two_scale_schedule):
        img = random_grid(rng, 16, 16, 2)
        items = prepare_training_set([(img, 3)], two_scale_schedule, Codec())
        assert len(items) == 1
        item = items[0]
        assert item.class_id == 3
        pyramid = extract_residuals(img, None, two_scale_schedule)
        for a, b in zip(item.pyramid.residuals, pyramid.residuals):
            assert np.array_equal(a.data, b.data)
        priors = extract_priors(pyramid)
        assert np.array_equal(item.priors.priors[0].data, priors.priors[0].data)
