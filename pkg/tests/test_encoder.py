"""Tokenizer, vocabulary, and transformer encoder tests."""

from __future__ import annotations

import math

import numpy as np
import pytest

from refres import encoder as E
from refres import tensor as T
from refres.datamodel import Mention, Utterance


def utt(idx, tokens, t0=None):
    t0 = 2.0 * idx if t0 is None else t0
    return Utterance(idx, " ".join(tokens), tuple(tokens), t0, t0 + 2.0)


@pytest.fixture
def vocab():
    return E.Vocab(list(E.RESERVED) + ["give", "me", "red", "take", "the", "cup"])


class TestVocab:
    def test_reserved_ids_are_fixed(self, vocab):
        assert vocab.id_of(E.PAD) == 0
        assert vocab.id_of(E.UNK) == 1
        assert vocab.id_of(E.BOS) == 2
        assert vocab.id_of(E.SPEAKER_A) == 3
        assert vocab.id_of(E.SPEAKER_B) == 4

    def test_unknown_token_maps_to_unk(self, vocab):
        assert vocab.id_of("zzz") == E.UNK_ID

    def test_roundtrip_through_file(self, tmp_path, vocab):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        assert E.Vocab.load(path).tokens == vocab.tokens

    def test_missing_reserved_block_rejected(self):
        with pytest.raises(E.VocabError, match="first five"):
            E.Vocab(["a", "b", "c", "d", "e", "f"])

    def test_build_collects_sorted_corpus_tokens(self):
        class Doc:
            utterances = [utt(0, ["b", "a"]), utt(1, ["c", "a"])]
        v = E.Vocab.build([Doc()])
        assert v.tokens == list(E.RESERVED) + ["a", "b", "c"]


class TestTokenize:
    def test_empty_window_is_bos_only(self, vocab):
        enc = E.tokenize(vocab, [])
        np.testing.assert_array_equal(enc.token_ids, [E.BOS_ID])
        assert enc.pad_mask.tolist() == [True]

    def test_speaker_tags_alternate_with_utterance_parity(self, vocab):
        enc = E.tokenize(vocab, [utt(0, ["take", "the", "cup"]), utt(1, ["me"])])
        ids = enc.token_ids.tolist()
        assert ids[0] == E.BOS_ID
        assert ids[1] == E.SPEAKER_A_ID
        assert ids[5] == E.SPEAKER_B_ID

    def test_window_starting_at_odd_utterance_opens_with_b(self, vocab):
        enc = E.tokenize(vocab, [utt(1, ["me"]), utt(2, ["me"])])
        assert enc.token_ids.tolist()[1] == E.SPEAKER_B_ID
        assert enc.token_ids.tolist()[3] == E.SPEAKER_A_ID

    def test_mention_spans_reindex_into_concatenation(self, vocab):
        us = [utt(0, ["take", "the", "cup"]), utt(1, ["give", "me", "the", "cup"])]
        ms = [Mention("m0", 0, (1, 3), "noun"), Mention("m1", 1, (2, 4), "noun"),
              Mention("p0", 1, (0, 1), "predicate")]
        enc = E.tokenize(vocab, us, ms)
        # layout: [bos] [spk_a] take the cup [spk_b] give me the cup
        assert enc.mention_spans == {"m0": (3, 5), "m1": (8, 10), "p0": (6, 7)}
        assert enc.mention_rows == {"m0": 3, "m1": 8, "p0": 6}
        toks = [E.BOS, E.SPEAKER_A, "take", "the", "cup", E.SPEAKER_B, "give", "me", "the", "cup"]
        np.testing.assert_array_equal(enc.token_ids, [vocab.id_of(t) for t in toks])

    def test_truncation_drops_cut_mentions(self, vocab):
        us = [utt(0, ["take", "the", "cup"])]
        ms = [Mention("m0", 0, (0, 1), "predicate"), Mention("m1", 0, (1, 3), "noun")]
        enc = E.tokenize(vocab, us, ms, max_len=4)
        assert len(enc.token_ids) == 4
        assert "m1" in enc.dropped and "m0" in enc.mention_rows

    def test_mention_outside_window_dropped(self, vocab):
        enc = E.tokenize(vocab, [utt(0, ["me"])], [Mention("mx", 5, (0, 1), "noun")])
        assert enc.dropped == ("mx",)

    def test_padding_mask_marks_real_tokens(self, vocab):
        enc = E.tokenize(vocab, [utt(0, ["me"])], pad_to=8)
        assert len(enc.token_ids) == 8
        assert enc.pad_mask.tolist() == [True] * 3 + [False] * 5
        assert (enc.token_ids[3:] == E.PAD_ID).all()


class TestSinusoid:
    def test_matches_formula_oracle(self):
        d, n = 8, 12
        table = E.sinusoidal_positions(n, d, dtype=np.float64)
        for pos in range(n):
            for i in range(d // 2):
                angle = pos / (10000.0 ** (2.0 * i / d))
                np.testing.assert_allclose(table[pos, 2 * i], math.sin(angle), atol=1e-12)
                np.testing.assert_allclose(table[pos, 2 * i + 1], math.cos(angle), atol=1e-12)

    def test_position_zero_alternates_zero_one(self):
        table = E.sinusoidal_positions(4, 6)
        np.testing.assert_allclose(table[0], [0, 1, 0, 1, 0, 1])


class TestTransformerEncoder:
    def make(self, vocab, layers=2, d=16, seed=0, dtype="float32"):
        cfg = E.EncoderConfig(max_len=32, d_model=d, layers=layers, heads=2,
                              ffn_mult=2, dtype=dtype)
        return E.TransformerEncoder(len(vocab), cfg, np.random.default_rng(seed)), cfg

    def test_zero_layer_output_is_embedding_plus_positions(self, vocab):
        enc_model, cfg = self.make(vocab, layers=0)
        ids = np.array([2, 5, 6, 7])
        out = enc_model.forward(ids)
        want = enc_model.params["embed"].data[ids] + E.sinusoidal_positions(4, cfg.d_model)
        np.testing.assert_array_equal(out.data, want)

    def test_output_shape_and_padded_rows_zeroed(self, vocab):
        enc_model, cfg = self.make(vocab)
        ids = np.array([2, 5, 6, 0, 0])
        mask = np.array([True, True, True, False, False])
        out = enc_model.forward(ids, mask)
        assert out.data.shape == (5, cfg.d_model)
        np.testing.assert_array_equal(out.data[3:], np.zeros((2, cfg.d_model)))

    def test_pad_region_content_cannot_touch_real_rows(self, vocab):
        enc_model, _ = self.make(vocab)
        real = np.array([2, 5, 6, 7])
        mask = np.array([True] * 4 + [False] * 3)
        a = enc_model.forward(np.concatenate([real, [0, 0, 0]]), mask)
        b = enc_model.forward(np.concatenate([real, [7, 5, 9]]), mask)
        np.testing.assert_allclose(a.data[:4], b.data[:4], atol=1e-6)

    def test_same_seed_same_output_bitwise(self, vocab):
        m1, _ = self.make(vocab, seed=3)
        m2, _ = self.make(vocab, seed=3)
        ids = np.array([2, 3, 5, 8])
        np.testing.assert_array_equal(m1.forward(ids).data, m2.forward(ids).data)

    def test_every_parameter_tensor_reaches_the_loss(self, vocab):
        enc_model, _ = self.make(vocab, d=8)
        ids = np.array([2, 5, 6, 7, 8])
        out = enc_model.forward(ids)
        T.backward(T.sum_all(out * out))
        for name, param in enc_model.parameters().items():
            assert param.grad is not None and np.abs(param.grad).max() > 0, name

    def test_gradients_match_finite_differences(self, vocab):
        cfg = E.EncoderConfig(max_len=16, d_model=4, layers=1, heads=2, ffn_mult=1,
                              dtype="float64")
        enc_model = E.TransformerEncoder(len(vocab), cfg, np.random.default_rng(5))
        ids = np.array([2, 5, 6])
        params = list(enc_model.parameters().values())

        def f():
            out = enc_model.forward(ids)
            return T.sum_all(out * out)
        # eps=1e-4: round-off noise dominates smaller steps for the tiny
        # attention-projection gradients at init scale
        assert T.finite_difference_check(f, params, eps=1e-4) < 5e-5

    def test_sequence_above_max_len_rejected(self, vocab):
        enc_model, _ = self.make(vocab)
        with pytest.raises(ValueError, match="max_len"):
            enc_model.forward(np.full(40, 2))

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError, match="divisible"):
            E.EncoderConfig(d_model=10, heads=3)
