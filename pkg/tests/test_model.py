"""Transformer: hidden stream, probability stream, causality and checkpoints."""
import numpy as np
import pytest

from simtlab import BOS, EOS
from simtlab.core import AdamState, precision
from simtlab.data import SentencePair, collate
from simtlab.model import (
    CheckpointError,
    ModelConfig,
    Transformer,
    forced_confidence_matrix,
    load_checkpoint,
    probability_stream,
    save_checkpoint,
)

from conftest import TINY


def random_pair(rng, vocab=12, length=None):
    length = length or int(rng.integers(2, 8))
    src = rng.integers(3, vocab, length)
    tgt = rng.integers(3, vocab, int(rng.integers(2, 8)))
    return SentencePair(src, tgt, [(i, i) for i in range(1, min(len(src), len(tgt)) + 1)])


class TestConfig:
    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError, match="divisible"):
            Transformer(ModelConfig(dim=10, heads=3))

    def test_dims_positive(self):
        with pytest.raises(ValueError):
            Transformer(ModelConfig(encoder_layers=0))

    def test_seeded_init_is_reproducible(self):
        a, b = Transformer(TINY), Transformer(TINY)
        assert all(a.params[p].values.tobytes() == b.params[p].values.tobytes() for p in a.params)

    def test_xavier_bounds(self):
        model = Transformer(TINY)
        w = model.params["decoder.layer0.ffn.in.weight"].values
        assert np.abs(w).max() <= np.sqrt(6 / (8 + 16))


class TestHiddenStream:
    def test_single_token(self, tiny_model):
        stream = tiny_model.encode_full([5])
        assert len(stream) == 1 and stream[0].shape == (1, TINY.dim)

    def test_truncation_is_exact(self, tiny_model):
        stream = tiny_model.encode_full([4, 7, 5, 9, 1])
        for j, h in enumerate(stream, 1):
            assert h.shape == (j, TINY.dim)
            assert h.tobytes() == stream[-1][:j].tobytes()

    def test_matches_independent_prefix_encoding(self, tiny_model, rng):
        for _ in range(20):
            src = list(rng.integers(3, 12, int(rng.integers(1, 12))))
            stream = tiny_model.encode_full(src)
            for j in range(1, len(src) + 1):
                np.testing.assert_allclose(stream[j - 1], tiny_model.encode_source(src[:j]), atol=1e-5, rtol=0)

    def test_empty_source(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.encode_full([])

    def test_padding_does_not_leak(self, tiny_model):
        short = collate([SentencePair([4, 5], [6], [(1, 1)])])
        long = collate([SentencePair([4, 5], [6], [(1, 1)]), SentencePair([4, 5, 6, 7, 8], [6], [(1, 1)])])
        a = tiny_model.encode(short.src, short.src_len).values[0]
        b = tiny_model.encode(long.src, long.src_len).values[0, : a.shape[0]]
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestDecodeDistribution:
    def test_sums_to_one(self, tiny_model):
        dist = tiny_model.decode_distribution([BOS, 5], tiny_model.encode_source([4, 6, EOS]))
        assert dist.shape == (TINY.tgt_vocab,)
        assert dist.sum() == pytest.approx(1.0, abs=1e-6)

    def test_repeatable(self, tiny_model):
        h = tiny_model.encode_source([4, 6])
        a = tiny_model.decode_distribution([BOS], h)
        b = tiny_model.decode_distribution([BOS], h)
        assert a.tobytes() == b.tobytes()

    def test_requires_bos_and_hidden(self, tiny_model):
        h = tiny_model.encode_source([4])
        with pytest.raises(ValueError, match="BOS"):
            tiny_model.decode_distribution([5], h)
        with pytest.raises(ValueError, match="H_j"):
            tiny_model.decode_distribution([BOS], np.zeros((0, TINY.dim)))

    def test_predict_is_argmax(self, tiny_model):
        h = tiny_model.encode_source([4, 6, 7])
        dist = tiny_model.decode_distribution([BOS, 3], h)
        token, p = tiny_model.predict(h, [BOS, 3])
        assert token == int(np.argmax(dist)) and p == float(dist.max())


class TestProbabilityStream:
    def test_cells_in_unit_interval(self, tiny_model, rng):
        pair = random_pair(rng)
        conf = forced_confidence_matrix(tiny_model, pair)
        assert conf.values.shape == (len(pair.source) + 1, len(pair.target) + 1)
        assert np.all((conf.values >= 0) & (conf.values <= 1))

    def test_full_prefix_row_is_teacher_forcing(self, tiny_model):
        pair = SentencePair([4, 7, 9], [5, 8, 10], [(1, 1), (2, 2), (3, 3)])
        conf = probability_stream(tiny_model, pair, [4])
        batch = collate([pair])
        logits = tiny_model.schedule_logits(batch, np.full((1, 4), 4)).values[0]
        p = np.exp(logits - logits.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        np.testing.assert_allclose(conf.row(4), p[np.arange(4), batch.tgt_out[0]], atol=1e-6)

    def test_zeroed_output_layer_is_uniform(self, tiny_model, rng):
        tiny_model.zero_output_layer()
        conf = forced_confidence_matrix(tiny_model, random_pair(rng))
        np.testing.assert_allclose(conf.values, 1.0 / TINY.tgt_vocab, rtol=1e-6)

    def test_forced_matrix_is_full_stream(self, tiny_model, rng):
        pair = random_pair(rng)
        full = forced_confidence_matrix(tiny_model, pair)
        stream = probability_stream(tiny_model, pair, list(range(1, len(pair.source) + 2)))
        np.testing.assert_array_equal(full.values, stream.values)

    @pytest.mark.parametrize("prefixes", [[], [0, 1], [2, 1], [1, 99]])
    def test_bad_prefix_sets(self, tiny_model, prefixes):
        pair = SentencePair([4, 7], [5, 8], [(1, 1), (2, 2)])
        with pytest.raises(ValueError):
            probability_stream(tiny_model, pair, prefixes)

    def test_display_mask(self):
        from simtlab.model import ConfidenceMatrix

        conf = ConfidenceMatrix([1, 2], np.array([[0.5, 1e-4], [2e-3, 0.9]]), 2, 2)
        np.testing.assert_array_equal(conf.display_mask(), [[True, False], [True, True]])
        assert conf.render().splitlines()[1].split() == ["1", "#", "."]


class TestCausality:
    def test_decoder_causality(self, tiny_model, rng):
        """Changing y_{>=i} leaves every cell (j, i') with i' <= i unchanged."""
        for _ in range(10):
            pair = random_pair(rng, length=6)
            i = int(rng.integers(1, len(pair.target) + 1))
            changed = list(pair.target)
            for t in range(i - 1, len(changed)):
                changed[t] = 3 + (changed[t] - 3 + 1) % 9
            other = SentencePair(pair.source, changed, pair.alignment)
            a = forced_confidence_matrix(tiny_model, pair).values
            b = forced_confidence_matrix(tiny_model, other).values
            # the cell scores y_{i'} itself, so cells are untouched for i' < i ...
            assert a[:, : i - 1].tobytes() == b[:, : i - 1].tobytes()
            # ... and whole next-token distributions for every i' <= i
            la = tiny_model.schedule_logits(collate([pair]), np.full((1, len(changed) + 1), 3)).values
            lb = tiny_model.schedule_logits(collate([other]), np.full((1, len(changed) + 1), 3)).values
            assert la[0, :i].tobytes() == lb[0, :i].tobytes()

    def test_source_locality(self, tiny_model, rng):
        """Changing x_{>j} leaves row j of the confidence matrix unchanged."""
        for _ in range(10):
            pair = random_pair(rng, length=7)
            j = int(rng.integers(1, len(pair.source)))
            src = list(pair.source)
            for t in range(j, len(src)):
                src[t] = 3 + (src[t] - 3 + 4) % 9
            other = SentencePair(src, pair.target, pair.alignment)
            rows = list(range(1, j + 1))
            a = probability_stream(tiny_model, pair, rows).values
            b = probability_stream(tiny_model, other, rows).values
            assert a.tobytes() == b.tobytes()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, tiny_model, rng):
        adam = AdamState(lr=3e-4, step=7)
        adam.m = {p: rng.standard_normal(t.shape).astype(np.float32) for p, t in tiny_model.params.items()}
        adam.v = {p: rng.random(t.shape).astype(np.float32) for p, t in tiny_model.params.items()}
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model, adam, {"note": "x"})
        model, adam2, meta = load_checkpoint(path)
        assert model.config == tiny_model.config and meta == {"note": "x"}
        for p, t in tiny_model.params.items():
            assert model.params[p].values.tobytes() == t.values.tobytes()
            assert adam2.m[p].tobytes() == adam.m[p].tobytes()
        assert (adam2.lr, adam2.step) == (3e-4, 7)
        save_checkpoint(tmp_path / "again.ckpt", model, adam2, meta)
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_magic(self, tmp_path, tiny_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model)
        data = path.read_bytes()
        assert data[:8] == b"SIMTLAB1"
        (tmp_path / "bad.ckpt").write_bytes(b"NOTSIMT!" + data[8:])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_float64_model_saved_as_float32(self, tmp_path):
        with precision(np.float64):
            model = Transformer(TINY)
        save_checkpoint(tmp_path / "m.ckpt", model)
        loaded, adam, _ = load_checkpoint(tmp_path / "m.ckpt")
        assert adam is None
        assert loaded.dtype == np.float32

    def test_creates_parent_directory(self, tmp_path, tiny_model):
        save_checkpoint(tmp_path / "a" / "b" / "m.ckpt", tiny_model)
        assert load_checkpoint(tmp_path / "a" / "b" / "m.ckpt")[0].config == tiny_model.config
