"""Latency, anticipation, hallucination and BLEU against brute-force oracles."""
import math

import numpy as np
import pytest

from simtlab import EOS
from simtlab.data import CorpusSpec, build_vocab, generate_corpus
from simtlab.inference import ReadWriteTrace, ScriptedModel, translate_corpus, translate_waitk, InferenceConfig
from simtlab.metrics import (
    CipherAligner,
    LatencyQualityPoint,
    UndefinedMetricError,
    average_anticipation,
    average_lagging,
    corpus_bleu,
    evaluate_traces,
    hallucinated_flags,
    hallucination_ratio,
    read_points,
    write_points,
)


def brute_al(delays, big_j, big_i):
    """AL written out longhand, independent of the library loop."""
    tau = len(delays)
    for i, g in enumerate(delays, 1):
        if g == big_j:
            tau = i
            break
    lags = [delays[i - 1] - (i - 1) * big_j / big_i for i in range(1, tau + 1)]
    return sum(lags) / tau


class TestAverageAnticipation:
    def test_identity(self):
        assert average_anticipation([(t, t) for t in range(1, 8)]) == 0.0

    def test_hand_value(self):
        assert average_anticipation([(3, 1), (1, 3)]) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("length", range(1, 12))
    def test_full_reversal(self, length):
        links = [(length + 1 - j, j) for j in range(1, length + 1)]
        expected = np.mean([max(i - (length + 1 - i), 0) for i in range(1, length + 1)])
        assert average_anticipation(links) == pytest.approx(expected, abs=1e-12)

    def test_empty(self):
        with pytest.raises(UndefinedMetricError):
            average_anticipation([])


class TestAverageLagging:
    @pytest.mark.parametrize("k", range(1, 10))
    def test_waitk_equals_k(self, k):
        big_j = 12
        delays = [min(k + i, big_j) for i in range(big_j)]
        assert average_lagging(delays, big_j, big_j) == k
        assert brute_al(delays, big_j, big_j) == pytest.approx(k, abs=1e-12)

    def test_offline(self):
        assert average_lagging([7] * 7, 7, 7) == 7.0

    def test_eager(self):
        assert average_lagging(list(range(1, 9)), 8, 8) == pytest.approx(1.0, abs=1e-12)

    def test_matches_brute_force(self, rng):
        for _ in range(200):
            big_j, big_i = int(rng.integers(1, 15)), int(rng.integers(1, 15))
            delays = np.sort(rng.integers(1, big_j + 1, big_i)).tolist()
            assert average_lagging(delays, big_j, big_i) == pytest.approx(brute_al(delays, big_j, big_i), abs=1e-9)

    def test_empty(self):
        with pytest.raises(UndefinedMetricError):
            average_lagging([], 3, 3)


class TestHallucination:
    def test_counting(self):
        traces = [ReadWriteTrace([4] * 10 + [EOS], list(range(10, 20)) + [EOS], list(range(1, 12)))]
        aligned = [1, 2, 3, 4, 5, 6, 7, 8, 10, 11, None]  # positions 9 and 10 look past their delays
        assert hallucination_ratio(traces, lambda t: aligned) == pytest.approx(0.2, abs=1e-12)

    def test_unaligned_token_is_hallucinated(self):
        assert hallucinated_flags([5, 6, EOS], [2, 2, 3], [1, None, None]) == [False, True, None]

    def test_oracle_required(self):
        with pytest.raises(UndefinedMetricError):
            hallucination_ratio([], None)

    def test_monotone_corpus_offline_is_zero(self):
        spec = CorpusSpec(n_sentences=50, distortion=0.0, seed=3)
        corpus = generate_corpus(spec)
        vocab = build_vocab(spec)
        # a perfect offline system: emits the reference, all delays J
        traces = []
        for n, p in enumerate(corpus):
            big_j = len(p.source) + 1
            traces.append(ReadWriteTrace(list(p.source) + [EOS], list(p.target) + [EOS], [big_j] * (len(p.target) + 1),
                                         index=n, reference=list(p.target), alignment=list(p.alignment)))
        assert hallucination_ratio(traces, CipherAligner(vocab)) == 0.0

    @pytest.mark.parametrize("shift", [0, 1, 3])
    def test_shifted_alignment_under_wait1(self, shift):
        """Every target token aligns ``shift`` positions ahead; wait-1 delays are g_i = i."""
        length = 9
        source = list(range(3, 3 + length)) + [EOS]
        trace = translate_waitk(ScriptedModel(lambda j, i: (EOS if i == length else 20, 1.0)), source, 1)
        aligned = [min(i + shift, length) if i <= length else None for i in range(1, length + 2)]
        expected = sum(aligned[i - 1] > trace.delays[i - 1] for i in range(1, length + 1)) / length
        assert hallucination_ratio([trace], lambda t: aligned) == pytest.approx(expected, abs=1e-12)
        if shift == 3:
            assert expected == pytest.approx(8 / 9)  # only the last token is covered by its delay

    def test_antitone_under_delay_domination(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 10))
            aligned = rng.integers(1, n + 1, n).tolist()
            early = np.sort(rng.integers(1, n + 1, n))
            late = np.maximum.accumulate(np.minimum(early + rng.integers(0, 3, n), n))
            hyp = list(range(4, 4 + n))
            a = ReadWriteTrace([4] * n, hyp, late.tolist())
            b = ReadWriteTrace([4] * n, hyp, early.tolist())
            assert hallucination_ratio([a], lambda t: aligned) <= hallucination_ratio([b], lambda t: aligned)


class TestCipherAligner:
    def test_inherits_reference_alignment(self):
        vocab = build_vocab(CorpusSpec(vocab_size=12))
        source = [4, 6, 5, EOS]
        target = [vocab.cipher(t) for t in (4, 5, 6)]
        trace = ReadWriteTrace(source, target + [EOS], [1, 3, 3, 4], reference=target,
                               alignment=[(1, 1), (3, 2), (2, 3)])
        assert CipherAligner(vocab)(trace) == [1, 3, 2, None]

    def test_falls_back_to_first_matching_source(self):
        vocab = build_vocab(CorpusSpec(vocab_size=12))
        source = [4, 5, 4, EOS]
        hyp = [vocab.cipher(4), vocab.cipher(4), vocab.cipher(9), EOS]
        trace = ReadWriteTrace(source, hyp, [1, 2, 3, 4], reference=[vocab.cipher(5)] * 3,
                               alignment=[(1, 1), (2, 2), (3, 3)])
        assert CipherAligner(vocab)(trace) == [1, 3, None, None]


class TestBleu:
    def test_identity(self):
        refs = [[3, 4, 5, 6, 7], [8, 9, 10, 11]]
        assert corpus_bleu(refs, refs).score == pytest.approx(100.0)

    def test_no_four_gram_match(self):
        assert corpus_bleu([[3, 4, 5, 6]], [[6, 5, 4, 3]]).score == 0.0

    def test_hand_example(self):
        result = corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
        assert result.precisions == [1.0] * 4
        assert result.brevity_penalty == pytest.approx(math.exp(1 - 5 / 4))
        assert result.score == pytest.approx(77.88, abs=0.01)

    def test_permutation_invariant(self, rng):
        hyps = [rng.integers(3, 8, int(rng.integers(4, 9))).tolist() for _ in range(20)]
        refs = [rng.integers(3, 8, int(rng.integers(4, 9))).tolist() for _ in range(20)]
        perm = rng.permutation(20)
        a = corpus_bleu(hyps, refs).score
        b = corpus_bleu([hyps[p] for p in perm], [refs[p] for p in perm]).score
        assert a == pytest.approx(b, abs=1e-9)

    def test_smoothing(self):
        assert corpus_bleu([[3, 4, 9, 6]], [[3, 4, 5, 6]], smooth=True).score > 0.0

    def test_errors(self):
        with pytest.raises(UndefinedMetricError):
            corpus_bleu([], [])
        with pytest.raises(ValueError):
            corpus_bleu([[3]], [[3], [4]])


class TestPoints:
    def test_tsv_round_trip(self, tmp_path):
        points = [LatencyQualityPoint("waitk(k=3)", 3.0, 55.5, 0.25, {"policy": "waitk", "k": 3}, "traces/a.jsonl"),
                  LatencyQualityPoint("offline", 7.123456, 99.0, 0.0, {"policy": "offline"}, "traces/b.jsonl")]
        write_points(points, tmp_path / "p.tsv")
        back = read_points(tmp_path / "p.tsv")
        assert [(p.label, p.al, p.bleu, p.hallucination, p.trace_path) for p in back] == \
            [(p.label, p.al, p.bleu, p.hallucination, p.trace_path) for p in points]
        assert back[0].settings == {"k": "3", "policy": "waitk"}

    def test_validation(self):
        with pytest.raises(ValueError):
            LatencyQualityPoint("x", 1.0, 10.0, 1.5)
        with pytest.raises(ValueError):
            LatencyQualityPoint("x", float("inf"), 10.0, 0.5)

    def test_points_regenerate_from_traces(self, tmp_path, tiny_model, toy_corpus):
        from simtlab.inference import read_traces, write_traces

        vocab = build_vocab(CorpusSpec(vocab_size=12))
        traces = translate_corpus(tiny_model, toy_corpus[:10], InferenceConfig("waitk", k=2))
        write_traces(traces, tmp_path / "t.jsonl")
        a = evaluate_traces(traces, CipherAligner(vocab))
        b = evaluate_traces(list(reversed(read_traces(tmp_path / "t.jsonl"))), CipherAligner(vocab))
        assert (a.al, a.bleu, a.hallucination) == (b.al, b.bleu, b.hallucination)
