"""Optimizer, schedule, loss composition, checkpoints, and training runs."""

import math
import warnings
from pathlib import Path

import numpy as np
import pytest

from fixtures_util import build_overfit_fixture

from mmner import autodiff as ad
from mmner.autodiff import ContractError, Tensor, backward
from mmner.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mmner.data import ImageStore, Vocabulary, parse_iob2
from mmner.gradcheck import check_gradients, max_error
from mmner.model import ModelConfig, MultimodalNerModel
from mmner.training import (
    Adam,
    TrainConfig,
    clip_global_norm,
    evaluate_model,
    format_config,
    load_run,
    lr_at,
    parse_config_text,
    total_loss,
    train,
)


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.zeros(2)
        opt.step(lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_hand_evaluated_first_step(self):
        # w=1, g=1, lr=0.1: m_hat=1, v_hat=1 -> w = 1 - 0.1/(1 + 1e-8)
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.array([1.0])
        opt.step(lr=0.1)
        expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
        assert p.data[0] == pytest.approx(expected, abs=1e-15)
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_identical_seeds_identical_trajectories(self):
        def run():
            rng = np.random.default_rng(5)
            p = Tensor(rng.normal(size=4), requires_grad=True)
            opt = Adam({"p": p})
            trace = []
            for step in range(5):
                loss = ad.tensor_sum(ad.mul(p, p))
                backward(loss)
                opt.step(lr=0.05)
                trace.append(p.data.copy())
            return np.stack(trace)

        np.testing.assert_array_equal(run(), run())

    def test_grads_cleared_after_step(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.ones(2)
        opt.step(lr=0.1)
        assert p.grad is None


class TestClip:
    def test_norm_reduced_to_max(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 10.0)
        norm = clip_global_norm({"p": p}, max_norm=1.0)
        assert norm == pytest.approx(20.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0)

    def test_small_gradients_untouched(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([0.1, 0.2])
        clip_global_norm({"p": p}, max_norm=1.0)
        np.testing.assert_array_equal(p.grad, [0.1, 0.2])


class TestLrSchedule:
    def test_boundaries(self):
        assert lr_at(0, 100, 5e-5) == 5e-5
        assert lr_at(100, 100, 5e-5) == 0.0

    def test_midpoint(self):
        assert abs(lr_at(50, 100, 1.0) - 0.5) < 1e-12

    def test_exactly_linear(self):
        base = 3e-4
        values = [lr_at(s, 10, base) for s in range(11)]
        diffs = np.diff(values)
        np.testing.assert_allclose(diffs, -base / 10, atol=1e-18)

    def test_clamps_past_end_with_warning(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            assert lr_at(11, 10, 1.0) == 0.0
        assert len(caught) == 1

    def test_bad_args(self):
        with pytest.raises(ContractError):
            lr_at(0, 0, 1.0)
        with pytest.raises(ContractError):
            lr_at(-1, 10, 1.0)


class TestTotalLoss:
    def test_alpha_one_is_crf_bitwise(self):
        crf = Tensor(2.0)
        out = total_loss(crf, Tensor(0.5), Tensor(0.25), alpha=1.0)
        assert out is crf

    def test_alpha_zero_is_contrastive_sum_bitwise(self):
        cl_vit, cl_conv = Tensor(0.5), Tensor(0.25)
        out = total_loss(Tensor(2.0), cl_vit, cl_conv, alpha=0.0)
        assert out.item() == (cl_vit.data + cl_conv.data)

    def test_weighted_arithmetic(self):
        out = total_loss(Tensor(2.0), Tensor(0.5), Tensor(0.25), alpha=0.8)
        assert out.item() == pytest.approx(0.8 * 2.0 + 0.2 * 0.75, abs=1e-15)
        assert out.item() == pytest.approx(1.75, abs=1e-12)

    def test_alpha_out_of_range(self):
        with pytest.raises(ContractError):
            total_loss(Tensor(1.0), Tensor(0.0), Tensor(0.0), alpha=1.5)

    def test_gradients_flow_through_both_terms(self):
        a = Tensor(1.0, requires_grad=True)
        b = Tensor(2.0, requires_grad=True)
        out = total_loss(ad.mul(a, a), ad.mul(b, b), Tensor(0.0), alpha=0.8)
        backward(out)
        assert a.grad == pytest.approx(0.8 * 2.0)
        assert b.grad == pytest.approx(0.2 * 4.0)


class TestCheckpoint:
    def make_params(self, seed=0):
        rng = np.random.default_rng(seed)
        return {
            "layer.w": Tensor(rng.normal(size=(3, 4)), requires_grad=True),
            "layer.b": Tensor(rng.normal(size=4), requires_grad=True),
            "scalarish": Tensor(rng.normal(size=(1,)), requires_grad=True),
        }

    def test_round_trip_bitwise(self, tmp_path):
        params = self.make_params()
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(params)
        for name, tensor in params.items():
            np.testing.assert_array_equal(loaded[name], tensor.data)

    def test_save_canonicalizes_to_float32_precision(self, tmp_path):
        params = self.make_params()
        original = {k: p.data.copy() for k, p in params.items()}
        save_checkpoint(params, tmp_path / "m.ckpt")
        for name, tensor in params.items():
            np.testing.assert_array_equal(
                tensor.data, original[name].astype(np.float32).astype(np.float64))

    def test_corrupted_payload_fails_checksum(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(self.make_params(), path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_corrupted_checksum_fails(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(self.make_params(), path)
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOTMNER\x00" * 4)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)


class TestConfigText:
    def test_round_trip(self):
        cfg = TrainConfig(alpha=0.5, lr=1e-3, epochs=3, preset="desk", use_vit=False)
        parsed = TrainConfig(**parse_config_text(format_config(cfg)))
        assert parsed == cfg

    def test_comments_and_blanks(self):
        values = parse_config_text("# comment\n\nalpha = 0.25\nepochs = 7\n")
        assert values == {"alpha": 0.25, "epochs": 7}

    def test_unknown_key(self):
        with pytest.raises(ContractError, match="unknown key"):
            parse_config_text("nope = 1\n")

    def test_bad_line(self):
        with pytest.raises(ContractError, match="key = value"):
            parse_config_text("alpha 0.5\n")


def tiny_train_config(**overrides):
    defaults = dict(
        alpha=0.8, lr=5e-3, batch_size=8, dropout=0.0, tau=0.07,
        epochs=2, seed=0, preset="desk",
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def tiny_model_config(**overrides):
    defaults = dict(
        d=8, text_layers=1, vit_layers=1, heads=2, max_len=8, mlp_ratio=1,
        image_size=8, patch_size=4, vit_embed_dim=8,
        conv_stem_channels=2, conv_stage_channels=(2, 3, 3),
        proj_hidden=4, proj_out=4, dropout=0.0,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


class TestModelAssembly:
    def test_emission_width_tracks_active_paths(self):
        for use_vit, use_resnet, want in [
            (True, True, 16), (True, False, 8), (False, True, 8), (False, False, 8),
        ]:
            cfg = tiny_model_config(use_vit=use_vit, use_resnet=use_resnet)
            model = MultimodalNerModel(cfg, vocab_size=10, seed=0)
            assert model.fused_dim == want
            rng = np.random.default_rng(0)
            emissions, pooled = model.sentence_forward(
                [2, 3, 4], rng.normal(size=(3, 8, 8)))
            assert emissions.shape == (3, 9)
            assert set(pooled) == ({"vit"} if use_vit and not use_resnet else
                                   {"conv"} if use_resnet and not use_vit else
                                   {"vit", "conv"} if use_vit else set())

    def test_text_only_reduces_to_text_to_crf(self):
        cfg = tiny_model_config(use_vit=False, use_resnet=False)
        model = MultimodalNerModel(cfg, vocab_size=10, seed=0)
        assert model.vit is None and model.conv is None
        assert model.crf.emission_w.shape == (8, 9)

    def test_disabled_contrastive_changes_loss_not_shapes(self, tmp_path):
        root = build_overfit_fixture(tmp_path / "d", n_sentences=4)
        corpus = parse_iob2(root / "train.iob2")
        vocab = Vocabulary.from_corpus(corpus)
        store = ImageStore(root / "images", 8)
        from mmner.data import make_batches
        results = {}
        for flag in (True, False):
            cfg = tiny_model_config(use_contrastive=flag)
            model = MultimodalNerModel(cfg, len(vocab), seed=1)
            # keep projection outputs away from the exact-zero dead-relu
            # corner the tiny head dimension makes reachable at init
            perturb = np.random.default_rng(9)
            for p in model.parameters().values():
                p.data += perturb.uniform(-0.1, 0.1, p.shape)
            (batch,) = list(make_batches(corpus, 4, 0, False, vocab, store))
            nll, clv, clc = model.batch_losses(batch, train=False)
            results[flag] = (nll.item(), clv.item(), clc.item())
        assert results[True][0] == results[False][0]  # same init, same nll
        assert results[False][1] == 0.0 and results[False][2] == 0.0
        assert results[True][1] > 0.0

    def test_full_composite_gradients_match_finite_differences(self, tmp_path):
        # every parameter of the assembled model, one tiny batch
        cfg = tiny_model_config()
        model = MultimodalNerModel(cfg, vocab_size=8, seed=2)
        # seeds give a generic point: every relu pre-activation sits well
        # clear of its kink, so h=1e-4 differences stay on one linear piece
        perturb = np.random.default_rng(6)
        for p in model.parameters().values():
            p.data += perturb.uniform(-0.2, 0.2, p.shape)
        rng = np.random.default_rng(3)
        batch_tokens = [[2, 3], [5, 6]]
        batch_labels = [[1, 2], [3, 0]]
        batch_images = [rng.uniform(-1, 1, size=(3, 8, 8)) for _ in range(2)]

        def loss_fn():
            nlls = []
            pooled_t, pooled_v = [], []
            for ids, labels, img in zip(batch_tokens, batch_labels, batch_images):
                emissions, pooled = model.sentence_forward(ids, img)
                nlls.append(model.crf.nll(emissions, labels))
                t, v = pooled["vit"]
                pooled_t.append(model.vit_text_head(t))
                pooled_v.append(model.vit_image_head(v))
            from mmner.alignment import contrastive_loss
            cl = contrastive_loss(ad.stack(pooled_t), ad.stack(pooled_v), 0.5)
            return total_loss(ad.mean(ad.stack(nlls)), cl, Tensor(0.0), alpha=0.8)

        errors = check_gradients(loss_fn, model.parameters())
        worst = max(errors.values())
        assert worst < 1e-5, sorted(errors.items(), key=lambda kv: -kv[1])[:5]


class TestTrainLoop:
    def test_two_runs_identical(self, tmp_path):
        root = build_overfit_fixture(tmp_path / "data", n_sentences=8)
        results = []
        for run in range(2):
            cfg = tiny_train_config(epochs=2)
            result = train(cfg, root)
            results.append(result)
        a, b = results
        assert [l.loss for l in a.epoch_logs] == [l.loss for l in b.epoch_logs]
        assert [l.eval_f1 for l in a.epoch_logs] == [l.eval_f1 for l in b.epoch_logs]
        assert a.final_report.kv_lines() == b.final_report.kv_lines()

    def test_checkpoint_round_trip_preserves_forward(self, tmp_path):
        root = build_overfit_fixture(tmp_path / "data", n_sentences=8)
        out = tmp_path / "run"
        cfg = tiny_train_config(epochs=1)
        train(cfg, root, out_dir=out)
        model, vocab, _ = load_run(out)
        corpus = parse_iob2(root / "train.iob2")
        store = ImageStore(root / "images", model.config.image_size)
        ids = vocab.encode(corpus.examples[0].tokens)
        img = store.load(corpus.examples[0].image_ref)
        with ad.no_grad():
            before, _ = model.sentence_forward(ids, img)
        save_checkpoint(model.parameters(), out / "model2.ckpt")
        model.load_parameters(load_checkpoint(out / "model2.ckpt"))
        with ad.no_grad():
            after, _ = model.sentence_forward(ids, img)
        np.testing.assert_array_equal(before.data, after.data)

    def test_alpha_one_logs_zero_contrastive_contribution(self, tmp_path):
        root = build_overfit_fixture(tmp_path / "data", n_sentences=8)
        cfg = tiny_train_config(epochs=1, alpha=1.0)
        result = train(cfg, root)
        log = result.epoch_logs[0]
        assert log.loss == log.crf_nll

    def test_counters_present(self, tmp_path):
        root = build_overfit_fixture(tmp_path / "data", n_sentences=8)
        result = train(tiny_train_config(epochs=1), root)
        assert set(result.counters) == {
            "unk_tokens", "truncated_sentences", "missing_images", "repaired_labels",
        }

    def test_schema_mismatch_rejected(self, tmp_path):
        cfg = tiny_model_config()
        model = MultimodalNerModel(cfg, vocab_size=8, seed=0)
        arrays = {k: p.data.copy() for k, p in model.parameters().items()}
        arrays["crf.emission_b"] = np.zeros(5)  # wrong label count
        with pytest.raises(Exception, match="schema"):
            model.load_parameters(arrays)
