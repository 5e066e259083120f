"""Tests for the two-stream model: encoding, prediction, training loop."""

import math

import numpy as np
import pytest

from cib import model as M
from cib import objective as O
from cib import tensor as T
from cib.model import ToyModel, TrainingDiverged, build_loss, train_model
from cib.objective import CIBConfig
from cib.task import TaskConfig, generate_dataset


def mini_task(**overrides):
    base = dict(objects=2, shapes=3, colors=3, sizes=2, answers=3,
                visual_tokens=3, question_tokens=4, rep_dim=4, vocab=32,
                shortcut_dims=2, n_train=64, n_eval=16)
    base.update(overrides)
    return TaskConfig(**base)


def mini_model(cfg, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    return ToyModel(cfg, rng, head_hidden=6, critic_hidden=5)


@pytest.fixture(scope="module")
def setup():
    cfg = mini_task()
    ds = generate_dataset(cfg, seed=0)
    return cfg, ds


class TestEncode:
    def test_eval_mode_is_deterministic(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        batch = ds["clean"][:6]
        a = model.encode(batch, train=False)
        b = model.encode(batch, train=False)
        assert np.array_equal(a.pooled_v.data, b.pooled_v.data)
        assert np.array_equal(a.v.mu.data, b.v.mu.data)

    def test_zero_noise_samples_equal_means(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        batch = ds["clean"][:4]
        n, k, ell, d = 4, cfg.visual_tokens, cfg.question_tokens, cfg.rep_dim
        enc = model.encode(batch, train=True,
                           noise_v=np.zeros((n * k, d)), noise_l=np.zeros((n * ell, d)))
        assert np.array_equal(enc.v.samples.data, enc.v.mu.data)
        assert np.array_equal(enc.l.samples.data, enc.l.mu.data)

    def test_degenerate_variance_pins_samples_to_means(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        model.params["vis.log_var"].assign_(np.full(cfg.rep_dim, -10.0))
        batch = ds["clean"][:4]
        n, k, d = 4, cfg.visual_tokens, cfg.rep_dim
        noise = np.ones((n * k, d))
        enc = model.encode(batch, train=True, noise_v=noise,
                           noise_l=np.zeros((n * cfg.question_tokens, d)))
        assert np.max(np.abs(enc.v.samples.data - enc.v.mu.data)) <= 1e-2

    def test_token_permutation_permutes_representations(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        ex = ds["clean"][0]
        enc = model.encode([ex], train=False)
        perm = np.random.default_rng(3).permutation(cfg.visual_tokens)
        import dataclasses
        ex2 = dataclasses.replace(ex, x_v=ex.x_v[perm])
        enc2 = model.encode([ex2], train=False)
        np.testing.assert_allclose(enc2.v.mu.data, enc.v.mu.data[perm], atol=1e-15)

    def test_empty_batch_rejected(self, setup):
        cfg, _ = setup
        with pytest.raises(ValueError):
            mini_model(cfg).encode([], train=False)


class TestPredict:
    def test_fresh_model_near_uniform(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        enc = model.encode(ds["clean"], train=False)
        loss = O.vqa_loss(model.predict_logits(enc), [ex.y for ex in ds["clean"]])
        assert abs(loss.item() - math.log(cfg.answers)) < 0.1

    def test_duplicated_example_gives_identical_rows(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        ex = ds["clean"][0]
        logits = model.predict_logits(model.encode([ex, ex, ds["clean"][1]], train=False))
        np.testing.assert_array_equal(logits.data[0], logits.data[1])

    def test_logit_shift_preserves_argmax(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        logits = model.predict_logits(model.encode(ds["clean"][:8], train=False)).data
        assert np.array_equal(np.argmax(logits, axis=1), np.argmax(logits + 5.0, axis=1))


class TestTraining:
    def test_loss_decreases_over_early_epochs(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        res = train_model(model, ds, CIBConfig(beta=0.0, seed=0, epochs=4,
                                               batch_size=16, learning_rate=0.15))
        losses = res.epoch_losses()
        assert losses[0] > losses[1] > losses[2]

    def test_history_reports_all_terms(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        res = train_model(model, ds, CIBConfig(beta=1e-4, seed=0, epochs=2, batch_size=16))
        row = res.history[0]
        for key in ("loss", "vqa", "i_xv_tv", "i_xl_tl", "i_tv_tl", "d_skl", "reg_total"):
            assert key in row and math.isfinite(row[key])
        assert res.total_steps == 2 * math.ceil(cfg.n_train / 16)

    def test_gradients_reach_every_parameter_group(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        rng = np.random.default_rng(5)
        batch = ds["train"][:8]
        n = len(batch)
        loss, _, _, _ = build_loss(
            model, batch, CIBConfig(beta=1e-2, seed=0),
            noise_v=rng.standard_normal((n * cfg.visual_tokens, cfg.rep_dim)),
            noise_l=rng.standard_normal((n * cfg.question_tokens, cfg.rep_dim)))
        grads = T.backward(loss)
        for name, p in model.params.items():
            g = grads.raw(p)
            assert np.any(g != 0.0), f"zero gradient for {name}"

    def test_beta_zero_leaves_critic_untrained(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        before = {k: v.data.copy() for k, v in model.critic.params.items()}
        train_model(model, ds, CIBConfig(beta=0.0, seed=0, epochs=1, batch_size=16))
        for k, v in model.critic.params.items():
            np.testing.assert_array_equal(before[k], v.data)

    def test_divergence_aborts_with_step_index(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        with pytest.raises(TrainingDiverged) as exc:
            train_model(model, ds, CIBConfig(beta=0.05, seed=0, epochs=3,
                                             batch_size=16, learning_rate=1e3))
        assert exc.value.step >= 0

    def test_alternative_estimator_pairing_trains(self, setup):
        from cib.estimators import Estimator

        cfg, ds = setup
        model = mini_model(cfg)
        run_cfg = CIBConfig(beta=1e-3, seed=0, epochs=2, batch_size=16,
                            upper_estimator=Estimator.L1OUT,
                            lower_estimator=Estimator.MINE)
        res = train_model(model, ds, run_cfg)
        assert len(res.history) == 2
        assert all(math.isfinite(row["loss"]) for row in res.history)

    def test_training_is_deterministic(self, setup):
        cfg, ds = setup
        cfg_run = CIBConfig(beta=1e-4, seed=3, epochs=1, batch_size=16)
        m1, m2 = mini_model(cfg, seed=3), mini_model(cfg, seed=3)
        r1 = train_model(m1, ds, cfg_run)
        r2 = train_model(m2, ds, cfg_run)
        assert r1.history == r2.history
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data)


class TestEvaluation:
    def test_accuracy_bounds_and_determinism(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        a1 = M.accuracy(model, ds["clean"])
        a2 = M.accuracy(model, ds["clean"])
        assert 0.0 <= a1 <= 1.0 and a1 == a2

    def test_mi_snapshot_has_finite_terms(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        snap = M.mi_snapshot(model, ds["clean"], CIBConfig())
        for v in (snap.i_xv_tv, snap.i_xl_tl, snap.i_tv_tl, snap.d_skl, snap.total):
            assert math.isfinite(v)


class TestCheckpointing:
    def test_roundtrip_preserves_predictions(self, setup, tmp_path):
        cfg, ds = setup
        model = mini_model(cfg)
        train_model(model, ds, CIBConfig(beta=1e-4, seed=0, epochs=1, batch_size=16))
        preds = M.predict_answers(model, ds["clean"])
        path = tmp_path / "model.json"
        T.save_checkpoint(model.params, path)

        fresh = mini_model(cfg, seed=99)
        T.load_into(fresh.params, T.load_checkpoint(path))
        np.testing.assert_array_equal(M.predict_answers(fresh, ds["clean"]), preds)


class TestFullLossGradient:
    def test_finite_differences_on_miniature_batch(self, setup):
        cfg, ds = setup
        model = mini_model(cfg)
        rng = np.random.default_rng(11)
        batch = ds["train"][:4]
        n = len(batch)
        noise_v = rng.standard_normal((n * cfg.visual_tokens, cfg.rep_dim))
        noise_l = rng.standard_normal((n * cfg.question_tokens, cfg.rep_dim))
        run_cfg = CIBConfig(beta=1e-2, seed=0)

        def f(params):
            loss, _, _, _ = build_loss(model, batch, run_cfg, noise_v, noise_l)
            return loss

        err = T.finite_diff_check(f, list(model.params.values()), h=1e-5)
        assert err < 1e-4
