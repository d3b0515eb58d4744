import os

# single-threaded BLAS keeps reductions bit-reproducible across runs
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from simtlab.core import kernels  # noqa: E402
from simtlab.data import CorpusSpec, generate_corpus  # noqa: E402
from simtlab.model import ModelConfig, Transformer  # noqa: E402

TINY = ModelConfig(src_vocab=12, tgt_vocab=12, dim=8, ff_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
                   max_len=32, seed=3)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return Transformer(TINY)


@pytest.fixture
def toy_corpus():
    return generate_corpus(CorpusSpec(n_sentences=40, length_min=3, length_max=6, vocab_size=12, distortion=0.5,
                                      block_size=2, seed=7))


# acceptance results, printed as one line per criterion at the end of the session
ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
