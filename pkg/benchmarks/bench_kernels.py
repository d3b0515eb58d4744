"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times each hot kernel on training-sized inputs, then one offline and one
confidence-weighted training step on the default model, and prints a
table of milliseconds per call and the speed-up.
"""
import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse  # noqa: E402
import timeit  # noqa: E402

import numpy as np  # noqa: E402

from simtlab.core import kernels  # noqa: E402
from simtlab.data import CorpusSpec, collate, generate_corpus  # noqa: E402
from simtlab.model import ModelConfig, Transformer  # noqa: E402
from simtlab.training import cbsimt_batch_loss, ce_batch_loss, sample_prefixes  # noqa: E402
from simtlab.weights import WeightConfig  # noqa: E402


def kernel_cases(rng):
    # attention rows flattened to (batch * heads * queries, keys), as the ops pass them
    scores = rng.standard_normal((320 * 2 * 12, 12)).astype(np.float32)
    mask = np.tile(np.tril(np.ones((12, 12), dtype=bool)), (320 * 2, 1))
    probs = kernels.masked_softmax(scores, mask)
    grad = rng.standard_normal(scores.shape).astype(np.float32)
    x = rng.standard_normal((320 * 12, 64)).astype(np.float32)
    gain, shift = np.ones(64, np.float32), np.zeros(64, np.float32)
    y, xhat, rstd, floored = kernels.layer_norm_forward(x, gain, shift, 1e-5)
    index = rng.integers(0, 20, size=320 * 12).astype(np.int64)
    return {
        "masked_softmax": lambda: kernels.masked_softmax(scores, mask),
        "masked_softmax_backward": lambda: kernels.masked_softmax_backward(probs, grad),
        "layer_norm_forward": lambda: kernels.layer_norm_forward(x, gain, shift, 1e-5),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(x, xhat, rstd, floored, gain),
        "scatter_add_rows": lambda: kernels.scatter_add_rows(20, index, x),
    }


def training_cases():
    corpus = generate_corpus(CorpusSpec(n_sentences=32, distortion=0.5, block_size=4, seed=3))
    batch = collate(corpus)
    model = Transformer(ModelConfig())
    prefixes = [sample_prefixes(int(j), 10, [0, b]) for b, j in enumerate(batch.src_len)]

    def offline_step():
        loss, _ = ce_batch_loss(model, batch)
        loss.backward()
        model.params.zero_grad()

    def weighted_step():
        out = cbsimt_batch_loss(model, batch, WeightConfig(), prefixes)
        out.loss.backward()
        model.params.zero_grad()

    return {"train_step_offline": offline_step, "train_step_weighted": weighted_step}


def measure(cases, repeat):
    out = {}
    for name, fn in cases.items():
        fn()
        out[name] = min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    backends = kernels.available_backends()
    results = {}
    for backend in backends:
        with kernels.use_backend(backend):
            rng = np.random.default_rng(0)
            results[backend] = measure({**kernel_cases(rng), **training_cases()}, args.repeat)
    names = list(results[backends[0]])
    header = f"{'case':<26}" + "".join(f"{b + ' ms':>14}" for b in backends)
    if "compiled" in results and "python" in results:
        header += f"{'speed-up':>10}"
    print(header)
    for name in names:
        line = f"{name:<26}" + "".join(f"{results[b][name]:>14.3f}" for b in backends)
        if "compiled" in results and "python" in results:
            line += f"{results['python'][name] / results['compiled'][name]:>9.2f}x"
        print(line)
    if "compiled" not in results:
        print("compiled backend unavailable; build with `pip install -e . --no-build-isolation`")


if __name__ == "__main__":
    main()
