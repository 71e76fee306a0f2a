import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdsim.checkpoint import (load_model, load_overlay, model_hash,
                               save_model, save_overlay)
from spdsim.data import (detokenize, load_and_tokenize, load_calibration,
                         sample_calibration, save_calibration,
                         synthetic_corpus, tokenize_bytes)
from spdsim.errors import DataError
from spdsim.model import init_model


class TestCheckpoint:
    def test_model_round_trip_bit_exact(self, tmp_path, small_model):
        path = str(tmp_path / "m.ckpt")
        save_model(path, small_model)
        loaded = load_model(path)
        assert loaded.config == small_model.config
        for (n1, t1), (n2, t2) in zip(small_model.named_tensors(),
                                      loaded.named_tensors()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)
        assert model_hash(loaded) == model_hash(small_model)

    def test_bias_model_round_trip(self, tmp_path, bias_model):
        path = str(tmp_path / "m.ckpt")
        save_model(path, bias_model)
        assert model_hash(load_model(path)) == model_hash(bias_model)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(DataError):
            load_model(str(path))

    def test_overlay_round_trip(self, tmp_path, small_model):
        path = str(tmp_path / "o.ckpt")
        modified = small_model.blocks[1].copy()
        modified.w_q.data = modified.w_q.data * 2.0
        base = model_hash(small_model)
        save_overlay(path, {1: modified}, base, small_model.config)
        overlays, loaded_hash = load_overlay(path)
        assert loaded_hash == base
        assert set(overlays) == {1}
        assert np.array_equal(overlays[1].w_q.data, modified.w_q.data)


class TestTokenize:
    def test_ascii_bytes(self):
        assert tokenize_bytes(b"AB").tolist() == [65, 66]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.txt"
        p.write_bytes(b"")
        assert load_and_tokenize(str(p)).size == 0

    def test_unreadable_file(self):
        with pytest.raises(DataError):
            load_and_tokenize("/nonexistent/corpus.txt")

    @given(st.binary(max_size=200))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, raw):
        assert detokenize(tokenize_bytes(raw)) == raw

    def test_file_round_trip(self, tmp_path):
        p = tmp_path / "c.txt"
        data = synthetic_corpus(500, seed=1)
        p.write_bytes(data)
        assert detokenize(load_and_tokenize(str(p))) == data


class TestCalibration:
    def test_deterministic_per_seed(self, corpus_tokens):
        a = sample_calibration(corpus_tokens, 4, 32, seed=9)
        b = sample_calibration(corpus_tokens, 4, 32, seed=9)
        for s1, s2 in zip(a.samples, b.samples):
            assert np.array_equal(s1, s2)

    def test_whole_stream_when_exact_fit(self):
        stream = np.arange(16)
        c = sample_calibration(stream, 1, 16, seed=0)
        assert np.array_equal(c.samples[0], stream)

    def test_different_seeds_differ(self, corpus_tokens):
        a = sample_calibration(corpus_tokens, 8, 32, seed=1)
        b = sample_calibration(corpus_tokens, 8, 32, seed=2)
        assert any(not np.array_equal(x, y)
                   for x, y in zip(a.samples, b.samples))

    def test_no_duplicate_windows(self, corpus_tokens):
        c = sample_calibration(corpus_tokens, 16, 32, seed=0)
        starts = {tuple(s[:8]) + (i,) for i, s in enumerate(c.samples)}
        assert len(starts) == 16

    def test_too_short_stream_rejected(self):
        with pytest.raises(DataError):
            sample_calibration(np.arange(4), 1, 16)

    def test_save_load_round_trip(self, tmp_path, corpus_tokens):
        c = sample_calibration(corpus_tokens, 3, 24, seed=5)
        path = str(tmp_path / "calib.bin")
        save_calibration(path, c)
        loaded = load_calibration(path)
        assert loaded.seed == 5
        assert len(loaded.samples) == 3
        for s1, s2 in zip(c.samples, loaded.samples):
            assert np.array_equal(s1, s2)


def test_synthetic_corpus_deterministic():
    assert synthetic_corpus(1000, seed=4) == synthetic_corpus(1000, seed=4)
    assert synthetic_corpus(1000, seed=4) != synthetic_corpus(1000, seed=5)
    assert len(synthetic_corpus(1234, seed=0)) == 1234
