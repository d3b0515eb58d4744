"""Randomised invariants (hypothesis)."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from simtlab import EOS
from simtlab.data import CorpusSpec, Vocab, generate_corpus, parse_pharaoh
from simtlab.inference import InferenceConfig, ScriptedModel, threshold_schedule, translate_threshold, translate_waitk
from simtlab.metrics import average_anticipation, average_lagging, corpus_bleu
from simtlab.weights import (
    cell_grid,
    diagonal_distance,
    diagonal_regularizer,
    reorder_cost,
    sentence_weight,
    token_weight,
)

lengths = st.integers(1, 30)
unit = st.floats(0.0, 1.0)
positive = st.floats(0.1, 8.0)


@st.composite
def grids(draw):
    big_i, big_j = draw(lengths), draw(lengths)
    return big_i, big_j, cell_grid(range(1, big_j + 1), big_i, big_j)


class TestWeightProperties:
    @given(grids(), positive)
    def test_ranges(self, grid, lam):
        big_i, big_j, (i, j) = grid
        d = diagonal_distance(i, big_i, j, big_j)
        reg = diagonal_regularizer(d, lam)
        c = reorder_cost(i, big_i, j, big_j)
        assert np.all((d >= 0) & (d < 1))
        assert np.all((reg > 0) & (reg <= 1))
        assert np.all((c >= 0) & (c < 1))
        assert np.all((c > 0) == (i / big_i > j / big_j))

    @given(unit, unit, st.floats(0.0, 2.0))
    def test_token_weight_bounds(self, p, reg, gamma):
        w = token_weight(p, reg, gamma)
        assert 0.0 <= w <= reg + 1e-12

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=20), st.floats(0.1, 10), st.floats(-10, 10))
    def test_sentence_weight_affine_invariant(self, scores, a, b):
        scores = np.array(scores)
        if np.std(scores) < 1e-3:
            return
        for c in scores:
            w = sentence_weight(c, scores)
            assert w >= 0
            assert np.isclose(w, sentence_weight(a * c + b, a * scores + b), atol=1e-6)


class TestMetricProperties:
    @given(st.lists(st.tuples(st.integers(1, 20), st.integers(1, 20)), min_size=1, max_size=30, unique=True))
    def test_aa(self, links):
        aa = average_anticipation(links)
        assert aa >= 0
        assert (aa == 0) == all(i <= j for i, j in links)

    @given(st.integers(1, 25), st.data())
    def test_al_waitk(self, big_j, data):
        k = data.draw(st.integers(1, big_j))
        delays = [min(k + i, big_j) for i in range(big_j)]
        assert average_lagging(delays, big_j, big_j) == k

    @given(st.lists(st.lists(st.integers(3, 8), min_size=1, max_size=10), min_size=1, max_size=8), st.randoms())
    def test_bleu_range_and_order(self, refs, random):
        hyps = [r[::-1] for r in refs]
        score = corpus_bleu(hyps, refs).score
        order = list(range(len(refs)))
        random.shuffle(order)
        assert 0.0 <= score <= 100.0 + 1e-9
        assert np.isclose(score, corpus_bleu([hyps[o] for o in order], [refs[o] for o in order]).score)


class TestPolicyProperties:
    @given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 2**31 - 1), st.floats(0.1, 6.0),
           st.integers(1, 10))
    @settings(max_examples=60)
    def test_trace_invariants(self, n_src, n_tgt, seed, delta, l_max):
        rng = np.random.default_rng(seed)
        probs = rng.random((n_src + 2, n_tgt + 1))
        model = ScriptedModel(lambda j, i: (EOS if i == n_tgt else 5, probs[j, min(i, n_tgt)]))
        source = [4] * n_src + [EOS]
        for trace in (translate_threshold(model, source, InferenceConfig(l_max=l_max, delta=delta)),
                      translate_waitk(model, source, l_max)):
            assert len(trace.delays) == len(trace.hypothesis)
            assert trace.delays == sorted(trace.delays)
            assert max(trace.delays) <= len(source) and min(trace.delays) >= 1
            assert trace.hypothesis[-1] == EOS

    @given(st.floats(0.0, 1.0), st.integers(1, 20), st.floats(0.05, 8.0))
    def test_schedule_nonincreasing(self, th_max, l_max, delta):
        ths = [threshold_schedule(l, th_max, l_max, delta) for l in range(0, l_max + 3)]
        assert ths[0] == th_max and ths[l_max] == 0.0
        assert all(a >= b for a, b in zip(ths, ths[1:]))


class TestDataProperties:
    @given(st.integers(5, 40), st.integers(0, 40))
    def test_cipher_bijection(self, size, offset):
        vocab = Vocab(size, offset)
        assert sorted(vocab.cipher(t) for t in vocab.content_ids) == list(vocab.content_ids)

    @given(st.floats(0.0, 1.0), st.integers(2, 4), st.integers(0, 1000))
    @settings(max_examples=30)
    def test_generated_alignment_is_bijection(self, rho, block, seed):
        for p in generate_corpus(CorpusSpec(n_sentences=5, length_min=4, length_max=9, distortion=rho,
                                            block_size=block, seed=seed)):
            assert sorted(i for i, _ in p.alignment) == list(range(1, len(p.source) + 1))
            assert sorted(j for _, j in p.alignment) == list(range(1, len(p.target) + 1))
            line = " ".join(f"{i}-{j}" for i, j in p.alignment)
            assert tuple(parse_pharaoh(line)) == p.alignment
