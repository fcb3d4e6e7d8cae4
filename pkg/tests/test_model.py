"""Tests for the set encoder, text tower, forward_batch, and checkpoints."""

import numpy as np
import pytest
from gradcheck import per_tensor_fd_errors

from listalign import autodiff as ad
from listalign import model
from listalign.errors import ConfigError, DegenerateInput, ShapeMismatch


def tiny_setup(seed=0, pool="last", p_max=3, n_layers=2):
    cfg = model.SetEncoderConfig(
        d_in=6, d_model=8, n_layers=n_layers, n_heads=2, d_out=8, p_max=p_max, pool=pool
    )
    ps = model.init_set_encoder(cfg, seed=seed)
    te = model.init_text_tower(model.TextTowerConfig(dims=(5, 8, 8)), seed=seed + 100)
    return cfg, ps, te


def random_batch(cfg, b, seed=0):
    rng = np.random.default_rng(seed)
    photos = rng.normal(size=(b, cfg.p_max, cfg.d_in))
    counts = rng.integers(1, cfg.p_max + 1, size=b)
    for i in range(b):
        photos[i, counts[i] :] = 0.0
    texts = rng.normal(size=(b, 5))
    return photos, counts, texts


class TestEncoding:
    def test_output_is_unit_norm(self):
        cfg, ps, te = tiny_setup()
        photos, counts, texts = random_batch(cfg, 6, seed=1)
        out = model.encode_photoset_batch(ps, photos, counts)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.ones(6), rtol=1e-12)
        tout = model.encode_text(te, texts)
        np.testing.assert_allclose(np.linalg.norm(tout, axis=1), np.ones(6), rtol=1e-12)

    def test_single_encode_matches_batch_row_bitwise(self):
        cfg, ps, _ = tiny_setup()
        photos, counts, _ = random_batch(cfg, 5, seed=2)
        batch_out = model.encode_photoset_batch(ps, photos, counts)
        for i in range(5):
            alone = model.encode_photoset(ps, photos[i], int(counts[i]))
            np.testing.assert_array_equal(alone, batch_out[i])

    def test_padding_content_cannot_leak(self):
        '''Garbage in rows at or past photo_count leaves the output bit-identical.'''
        cfg, ps, _ = tiny_setup()
        rng = np.random.default_rng(3)
        photos = rng.normal(size=(cfg.p_max, cfg.d_in))
        count = 2
        clean = photos.copy()
        clean[count:] = 0.0
        dirty = photos.copy()
        dirty[count:] = 1e6
        a = model.encode_photoset(ps, clean, count)
        # encode_photoset zeroes past-count rows itself, so feed the dirty buffer
        # through the batch path where the buffer is used as given.
        b = model.encode_photoset_batch(ps, dirty[None], np.array([count]))[0]
        np.testing.assert_array_equal(a, b)

    def test_appending_a_photo_changes_output(self):
        cfg, ps, _ = tiny_setup()
        rng = np.random.default_rng(4)
        photos = np.zeros((cfg.p_max, cfg.d_in))
        photos[:3] = rng.normal(size=(3, cfg.d_in))
        two = model.encode_photoset(ps, photos, 2)
        three = model.encode_photoset(ps, photos, 3)
        assert np.linalg.norm(two - three) > 1e-6

    def test_permutation_sensitivity_last_pool(self):
        '''Positional embeddings make photo order matter.'''
        cfg, ps, _ = tiny_setup(seed=7)
        rng = np.random.default_rng(5)
        photos = np.zeros((cfg.p_max, cfg.d_in))
        photos[:3] = rng.normal(size=(3, cfg.d_in))
        permuted = photos.copy()
        permuted[[0, 1, 2]] = photos[[2, 0, 1]]
        a = model.encode_photoset(ps, photos, 3)
        b = model.encode_photoset(ps, permuted, 3)
        assert np.linalg.norm(a - b) > 1e-6

    def test_mean_pool_is_permutation_invariant(self):
        # mean pooling skips the positional table entirely
        cfg, ps, _ = tiny_setup(pool="mean", seed=8)
        rng = np.random.default_rng(6)
        photos = np.zeros((cfg.p_max, cfg.d_in))
        photos[:3] = rng.normal(size=(3, cfg.d_in))
        permuted = photos.copy()
        permuted[[0, 1, 2]] = photos[[2, 0, 1]]
        a = model.encode_photoset(ps, photos, 3)
        b = model.encode_photoset(ps, permuted, 3)
        assert np.linalg.norm(a - b) <= 1e-6

    def test_norm_guard_returns_first_basis_vector(self):
        cfg, ps, _ = tiny_setup()
        ps.tensors["w_out"].value = np.zeros_like(ps.tensors["w_out"].value)
        ps.tensors["b_out"].value = np.zeros_like(ps.tensors["b_out"].value)
        photos, counts, _ = random_batch(cfg, 2, seed=9)
        out = model.encode_photoset_batch(ps, photos, counts)
        expected = np.zeros((2, cfg.d_out))
        expected[:, 0] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_input_validation(self):
        cfg, ps, te = tiny_setup()
        with pytest.raises(DegenerateInput):
            model.encode_photoset(ps, np.zeros((3, cfg.d_in)), 0)
        with pytest.raises(ShapeMismatch):
            model.encode_photoset(ps, np.zeros((3, cfg.d_in + 1)), 2)
        with pytest.raises(DegenerateInput):
            model.encode_photoset_batch(
                ps, np.full((1, cfg.p_max, cfg.d_in), np.nan), np.array([2])
            )
        with pytest.raises(ShapeMismatch):
            model.encode_text(te, np.zeros((4, 99)))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            model.SetEncoderConfig(d_in=4, d_model=10, n_heads=4).validate()
        with pytest.raises(ConfigError):
            model.SetEncoderConfig(d_in=4, pool="max").validate()
        with pytest.raises(ConfigError):
            model.TextTowerConfig(dims=(8,)).validate()


class TestForwardBatch:
    def test_logits_are_pairwise_cosines(self):
        cfg, ps, te = tiny_setup()
        photos, counts, texts = random_batch(cfg, 4, seed=10)
        logits, _ = model.forward_batch(ps, te, photos, counts, texts)
        p_emb = model.encode_photoset_batch(ps, photos, counts)
        t_emb = model.encode_text(te, texts)
        np.testing.assert_allclose(logits.value, p_emb @ t_emb.T, atol=1e-12)
        assert np.all(np.abs(logits.value) <= 1.0 + 1e-12)

    def test_batch_of_one_rejected(self):
        cfg, ps, te = tiny_setup()
        photos, counts, texts = random_batch(cfg, 1, seed=11)
        with pytest.raises(DegenerateInput):
            model.forward_batch(ps, te, photos, counts, texts)

    def test_full_path_gradients_match_finite_differences(self):
        '''Every trainable parameter, through attention, pooling, and both towers.'''
        cfg, ps, te = tiny_setup(seed=12)
        photos, counts, texts = random_batch(cfg, 4, seed=12)
        rng = np.random.default_rng(99)
        w = rng.normal(size=(4, 4))  # fixed mixing so every logit matters

        def loss_builder():
            logits, tape = model.forward_batch(ps, te, photos, counts, texts)
            with tape:
                loss = (logits * ad.constant(w)).sum()
            return loss, tape

        errors = per_tensor_fd_errors(loss_builder, [ps, te])
        worst = max(errors.values())
        assert worst < 1e-4, {k: v for k, v in errors.items() if v >= 1e-4}

    def test_frozen_text_layers_get_zero_gradient(self):
        cfg, ps, te = tiny_setup()
        model.set_text_freeze(te, [1])  # layer 0 frozen
        photos, counts, texts = random_batch(cfg, 3, seed=13)
        logits, tape = model.forward_batch(ps, te, photos, counts, texts)
        with tape:
            loss = logits.sum()
        grads = model.backward(tape, loss, ps, te)
        assert not grads["text0.w"].any()
        assert not grads["text0.b"].any()
        assert grads["text1.w"].any()

    def test_unfreeze_out_of_range_rejected(self):
        _, _, te = tiny_setup()
        with pytest.raises(ConfigError):
            model.set_text_freeze(te, [5])


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        _, ps, te = tiny_setup(seed=20)
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        model.save_checkpoint(p1, ps, te, extra={"temp": 2.639})
        ps2, te2, extra = model.load_checkpoint(p1)
        model.save_checkpoint(p2, ps2, te2, extra=extra)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_loaded_model_encodes_identically(self, tmp_path):
        cfg, ps, te = tiny_setup(seed=21)
        path = str(tmp_path / "m.ckpt")
        model.save_checkpoint(path, ps, te)
        ps2, te2, _ = model.load_checkpoint(path)
        photos, counts, texts = random_batch(cfg, 4, seed=21)
        # Storage rounds to float32; compare against the round-tripped params.
        for (_, a), (_, b) in zip(ps.named() + te.named(), ps2.named() + te2.named()):
            np.testing.assert_array_equal(a.value.astype(np.float32), b.value.astype(np.float32))
        out1 = model.encode_photoset_batch(ps2, photos, counts)
        ps3, te3, _ = model.load_checkpoint(path)
        np.testing.assert_array_equal(out1, model.encode_photoset_batch(ps3, photos, counts))
        np.testing.assert_array_equal(model.encode_text(te2, texts), model.encode_text(te3, texts))

    def test_freeze_flags_survive_round_trip(self, tmp_path):
        _, ps, te = tiny_setup()
        model.set_text_freeze(te, [1])
        path = str(tmp_path / "f.ckpt")
        model.save_checkpoint(path, ps, te)
        _, te2, _ = model.load_checkpoint(path)
        assert te2.frozen == [True, False]
        assert not te2.tensors["text0.w"].requires_grad
        assert te2.tensors["text1.w"].requires_grad
