"""Synthetic corpora, binning, batching and the corpus file format."""
import numpy as np
import pytest

from simtlab import BOS, EOS, PAD
from simtlab.data import (
    CorpusFormatError,
    CorpusSpec,
    CorpusSpecError,
    SentencePair,
    Vocab,
    bin_by_aa,
    build_vocab,
    collate,
    corpus_paths,
    expected_aa,
    generate_corpus,
    make_batches,
    parse_pharaoh,
    read_corpus,
    read_spec,
    write_corpus,
    write_spec,
)
from simtlab.metrics import average_anticipation


class TestGenerateCorpus:
    def test_monotone(self):
        corpus = generate_corpus(CorpusSpec(n_sentences=100, seed=1))
        assert all(p.aa == 0.0 for p in corpus)
        vocab = build_vocab(CorpusSpec())
        assert all(p.target == tuple(vocab.cipher(t) for t in p.source) for p in corpus)

    def test_adjacent_swaps(self):
        corpus = generate_corpus(CorpusSpec(n_sentences=200, length_min=4, length_max=10, distortion=1.0,
                                            block_size=2, seed=2, reversal_cue=False))
        for p in corpus:
            if len(p.source) % 2 == 0:
                assert average_anticipation(p.alignment) == pytest.approx(0.5)

    def test_deterministic(self):
        spec = CorpusSpec(n_sentences=50, distortion=0.5, block_size=3, seed=9)
        assert generate_corpus(spec) == generate_corpus(spec)
        assert generate_corpus(spec) != generate_corpus(CorpusSpec(n_sentences=50, distortion=0.5, block_size=3, seed=10))

    def test_prefix_stable_under_count(self):
        small = generate_corpus(CorpusSpec(n_sentences=10, distortion=0.5, seed=4))
        large = generate_corpus(CorpusSpec(n_sentences=30, distortion=0.5, seed=4))
        assert large[:10] == small

    def test_alignment_is_bijection(self):
        for p in generate_corpus(CorpusSpec(n_sentences=100, distortion=0.7, block_size=3, seed=5)):
            assert sorted(i for i, _ in p.alignment) == list(range(1, len(p.source) + 1))
            assert sorted(j for _, j in p.alignment) == list(range(1, len(p.target) + 1))
            assert p.aa == average_anticipation(p.alignment)

    def test_cue_marks_reversed_blocks(self):
        vocab = build_vocab(CorpusSpec())
        for p in generate_corpus(CorpusSpec(n_sentences=50, distortion=0.6, block_size=3, seed=6)):
            origin = p.target_origin()
            for j, i in origin.items():
                assert p.target[j - 1] == vocab.cipher(p.source[i - 1])
            starts = [s for s, t in enumerate(p.source, 1) if t == 3]
            moved = {i for j, i in origin.items() if i != j}
            assert moved <= {s + d for s in starts for d in range(3)}

    @pytest.mark.parametrize("rho,block", [(0.3, 2), (0.5, 3), (1.0, 4), (0.8, 5)])
    def test_mean_aa_matches_closed_form(self, rho, block):
        spec = CorpusSpec(n_sentences=2000, length_min=5, length_max=12, distortion=rho, block_size=block, seed=11)
        mean = np.mean([p.aa for p in generate_corpus(spec)])
        assert mean == pytest.approx(expected_aa(spec), rel=0.02)

    def test_distortion_knob_is_faithful(self):
        means = [np.mean([p.aa for p in generate_corpus(
            CorpusSpec(n_sentences=300, length_min=6, length_max=12, distortion=rho, block_size=3, seed=1))])
            for rho in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert all(a < b for a, b in zip(means, means[1:]))

    def test_mixed_levels(self):
        spec = CorpusSpec(n_sentences=400, distortion_levels=(0.0, 1.0), block_size=2, seed=3)
        aas = np.array([p.aa for p in generate_corpus(spec)])
        assert 0.3 < np.mean(aas == 0.0) < 0.7

    @pytest.mark.parametrize("kwargs", [
        {"distortion": 0.5, "block_size": 1},
        {"distortion": 0.5, "block_size": 6, "length_min": 5},
        {"distortion": 1.5},
        {"length_min": 0},
        {"length_min": 6, "length_max": 5},
        {"vocab_size": 4},
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(CorpusSpecError):
            generate_corpus(CorpusSpec(**kwargs))


class TestVocab:
    def test_single_content_token(self):
        vocab = build_vocab(CorpusSpec(vocab_size=4, reversal_cue=False))
        assert list(vocab.content_ids) == [3]
        assert vocab.cipher(3) == 3

    def test_cipher_is_bijection(self):
        vocab = Vocab(20, 5)
        images = [vocab.cipher(t) for t in vocab.content_ids]
        assert sorted(images) == list(vocab.content_ids)
        assert all(vocab.decipher(vocab.cipher(t)) == t for t in vocab.content_ids)

    def test_lookup_inverts_name(self):
        vocab = Vocab(20, 5)
        for t in list(vocab.content_ids) + [BOS, EOS, PAD]:
            assert vocab.lookup(vocab.name(t)) == t
        with pytest.raises(KeyError):
            vocab.lookup("src99")

    def test_too_small(self):
        with pytest.raises(CorpusSpecError):
            build_vocab(CorpusSpec(vocab_size=3))


class TestBins:
    def test_remainder_to_last(self):
        corpus = generate_corpus(CorpusSpec(n_sentences=10, distortion=0.5, seed=2))
        assert [len(b) for b in bin_by_aa(corpus).bins] == [2, 2, 2, 4]

    def test_stable_on_ties(self):
        corpus = generate_corpus(CorpusSpec(n_sentences=12, seed=2))
        assert sum(bin_by_aa(corpus, 3).bins, []) == list(range(12))

    def test_partition_and_order(self):
        corpus = generate_corpus(CorpusSpec(n_sentences=101, distortion_levels=(0.0, 0.5, 1.0), seed=8))
        bins = bin_by_aa(corpus).bins
        assert sorted(sum(bins, [])) == list(range(101))
        means = [np.mean([corpus[i].aa for i in b]) for b in bins]
        assert all(a <= b for a, b in zip(means, means[1:]))

    def test_empty(self):
        with pytest.raises(ValueError):
            bin_by_aa([])


class TestBatches:
    def test_one_batch(self, toy_corpus):
        batches = make_batches(toy_corpus, 100)
        assert len(batches) == 1 and sorted(batches[0].indices) == list(range(len(toy_corpus)))

    def test_seeded_order(self, toy_corpus):
        a = [b.indices for b in make_batches(toy_corpus, 8, seed=3)]
        assert a == [b.indices for b in make_batches(toy_corpus, 8, seed=3)]
        assert a != [b.indices for b in make_batches(toy_corpus, 8, seed=4)]

    def test_collate_layout(self):
        batch = collate([SentencePair([4, 5], [9], [(1, 1)]), SentencePair([6], [7, 8], [(1, 1)])])
        np.testing.assert_array_equal(batch.src, [[4, 5, EOS], [6, EOS, PAD]])
        np.testing.assert_array_equal(batch.tgt_in, [[BOS, 9, PAD], [BOS, 7, 8]])
        np.testing.assert_array_equal(batch.tgt_out, [[9, EOS, PAD], [7, 8, EOS]])
        assert batch.src_len.tolist() == [3, 2] and batch.tgt_len.tolist() == [2, 3]

    def test_bad_size(self, toy_corpus):
        with pytest.raises(ValueError):
            make_batches(toy_corpus, 0)


class TestFiles:
    def test_round_trip(self, tmp_path):
        corpus = generate_corpus(CorpusSpec(n_sentences=1000, distortion=0.5, block_size=3, seed=12))
        write_corpus(corpus, tmp_path / "c")
        assert read_corpus(tmp_path / "c") == corpus

    def test_empty_corpus(self, tmp_path):
        write_corpus([], tmp_path / "e")
        assert all(p.read_text() == "" for p in corpus_paths(tmp_path / "e"))
        assert read_corpus(tmp_path / "e") == []

    def test_pharaoh_line(self, tmp_path):
        write_corpus([SentencePair([4, 5], [7, 8, 9], [(1, 1), (2, 3)])], tmp_path / "p")
        assert corpus_paths(tmp_path / "p")[2].read_text() == "1-1 2-3\n"
        assert parse_pharaoh("1-1 2-3") == [(1, 1), (2, 3)]

    @pytest.mark.parametrize("line", ["1-1 2_3", "1-", "a-b", "1-1 1-1"])
    def test_malformed_alignment(self, line):
        with pytest.raises(CorpusFormatError):
            parse_pharaoh(line)

    def test_errors_carry_line_numbers(self, tmp_path):
        write_corpus([SentencePair([4], [7], [(1, 1)])] * 3, tmp_path / "c")
        src, _, align = corpus_paths(tmp_path / "c")
        src.write_text("4\n4 x\n4\n")
        with pytest.raises(CorpusFormatError, match=r"\.src:2:"):
            read_corpus(tmp_path / "c")
        src.write_text("4\n4\n4\n")
        align.write_text("1-1\n1-1\n1-5\n")
        with pytest.raises(CorpusFormatError, match=r"\.align:3:"):
            read_corpus(tmp_path / "c")

    def test_line_count_mismatch(self, tmp_path):
        write_corpus([SentencePair([4], [7], [(1, 1)])] * 2, tmp_path / "c")
        corpus_paths(tmp_path / "c")[1].write_text("7\n")
        with pytest.raises(CorpusFormatError):
            read_corpus(tmp_path / "c")

    def test_spec_round_trip(self, tmp_path):
        spec = CorpusSpec(n_sentences=7, distortion_levels=(0.0, 0.5), block_size=3, reversal_cue=False)
        write_spec(spec, tmp_path / "c.spec")
        assert read_spec(tmp_path / "c.spec") == spec
