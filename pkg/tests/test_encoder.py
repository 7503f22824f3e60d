"""Encoder geometry, padding invariance, and parameter accounting."""

import numpy as np
import pytest

from conftest import tiny_model
from maskslu import tensor as T
from maskslu.encoder import ModelConfig, SpeechEncoder, subsampled_length
from maskslu.model import SpeechModel


class TestGeometry:
    def test_subsampled_length_map(self):
        assert subsampled_length(100) == 25
        assert subsampled_length(7) == 2
        assert subsampled_length(1) == 1

    def test_output_shape_default_width(self):
        model = tiny_model(d_model=16, mel_bins=8)
        feats = np.random.default_rng(0).normal(size=(2, 10, 8)).astype(np.float32)
        out = model.encoder(feats, np.array([10, 7]))
        assert out.h.shape == (2, 3, 16)
        assert out.lengths.tolist() == [3, 2]

    def test_t100_gives_25(self):
        model = tiny_model(d_model=16, mel_bins=8)
        feats = np.zeros((1, 100, 8), dtype=np.float32)
        out = model.encoder(feats, np.array([100]))
        assert out.h.shape[1] == 25

    def test_empty_batch_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.encoder(np.zeros((0, 5, 8), dtype=np.float32), np.array([]))

    def test_length_beyond_padding_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.encoder(np.zeros((1, 5, 8), dtype=np.float32), np.array([9]))


class TestPaddingInvariance:
    def test_padding_does_not_change_valid_positions(self):
        rng = np.random.default_rng(1)
        model = tiny_model(enc_layers=2, d_model=16, mel_bins=8)
        feats = rng.normal(size=(1, 30, 8)).astype(np.float32)
        out_a = model.encoder(feats, np.array([30]))
        padded = np.zeros((1, 70, 8), dtype=np.float32)
        padded[:, :30] = feats
        out_b = model.encoder(padded, np.array([30]))
        n = out_a.lengths[0]
        assert out_b.lengths[0] == n
        assert np.allclose(out_a.h.data[0, :n], out_b.h.data[0, :n], atol=1e-5)

    def test_mixed_batch_matches_solo_run(self):
        rng = np.random.default_rng(2)
        model = tiny_model(enc_layers=2, d_model=16, mel_bins=8)
        a = rng.normal(size=(31, 8)).astype(np.float32)
        b = rng.normal(size=(57, 8)).astype(np.float32)
        solo = model.encoder(a[None], np.array([31]))
        batch_feats = np.zeros((2, 57, 8), dtype=np.float32)
        batch_feats[0, :31] = a
        batch_feats[1] = b
        batch = model.encoder(batch_feats, np.array([31, 57]))
        n = solo.lengths[0]
        assert np.allclose(solo.h.data[0, :n], batch.h.data[0, :n], atol=1e-5)

    def test_eval_determinism(self):
        rng = np.random.default_rng(3)
        model = tiny_model(enc_layers=2)
        feats = rng.normal(size=(2, 20, 8)).astype(np.float32)
        a = model.encoder(feats, np.array([20, 12])).h.data
        b = model.encoder(feats, np.array([20, 12])).h.data
        assert np.array_equal(a, b)


class TestParameterCounts:
    def test_default_config_near_paper_total(self):
        model = SpeechModel(ModelConfig(), seed=0)
        total = model.num_parameters()
        assert abs(total - 30.9e6) / 30.9e6 < 0.05, total

    def test_output_norm_bounded_after_init(self):
        rng = np.random.default_rng(4)
        model = tiny_model(enc_layers=2, d_model=32, mel_bins=8, ffn=64)
        feats = rng.normal(size=(2, 40, 8)).astype(np.float32)
        out = model.encoder(feats, np.array([40, 25]))
        rms = float(np.sqrt((out.h.data ** 2).mean()))
        assert rms < 100.0

    def test_unique_dotted_parameter_names(self):
        model = tiny_model(enc_layers=2, dec_layers=2)
        names = [name for name, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert all("." in n for n in names)


class TestConfigValidation:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=30, heads=4)

    def test_positive_fields(self):
        with pytest.raises(ValueError):
            ModelConfig(enc_layers=0)

    def test_dropout_applied_only_in_train_mode(self):
        rng = np.random.default_rng(5)
        model = tiny_model(enc_layers=1, dropout=0.5)
        feats = rng.normal(size=(1, 16, 8)).astype(np.float32)
        ev = model.encoder(feats, np.array([16]), mode="eval").h.data
        tr = model.encoder(
            feats, np.array([16]), mode="train", rng=np.random.default_rng(0)
        ).h.data
        assert not np.allclose(ev, tr)

    def test_post_norm_variant_runs(self):
        cfg = ModelConfig(enc_layers=1, dec_layers=1, heads=2, d_model=16, ffn=24,
                          vocab_size=8, mel_bins=8, conv_channels=(2, 2), post_norm=True)
        model = SpeechModel(cfg, seed=0)
        feats = np.random.default_rng(6).normal(size=(1, 12, 8)).astype(np.float32)
        out = model.encoder(feats, np.array([12]))
        assert np.all(np.isfinite(out.h.data))
