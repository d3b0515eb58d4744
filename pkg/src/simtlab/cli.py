"""Command-line entry point: ``simtlab <subcommand> [flags]``.

Exit codes: 0 success, 1 stage failure, 2 usage or configuration error.
Diagnostics go to stderr prefixed with the failing stage.
"""
import os

# single-threaded BLAS keeps floating-point reductions reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

from .config import ConfigError, read_kv, replace_kv  # noqa: E402
from .data import CorpusSpec, build_vocab, generate_corpus, read_corpus, read_spec, write_corpus, write_spec  # noqa: E402
from .harness import HarnessError, load_config, run_experiment  # noqa: E402
from .inference import InferenceConfig, read_traces, translate_corpus, write_traces  # noqa: E402
from .metrics import CipherAligner, evaluate_traces, write_points  # noqa: E402
from .model import ModelConfig, Transformer, load_checkpoint, save_checkpoint  # noqa: E402
from .training import PHASES, TrainPlan, run_training  # noqa: E402
from .weights import WeightConfig  # noqa: E402


class StageFailure(Exception):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(message)


def _spec_for(args):
    """Corpus spec from ``--spec`` (a key=value file) or the flags, flags winning when given."""
    spec = read_spec(args.spec) if getattr(args, "spec", None) else CorpusSpec()
    flags = {
        "n_sentences": args.n_sentences,
        "length_min": args.length_min,
        "length_max": args.length_max,
        "vocab_size": args.vocab_size,
        "distortion": args.distortion,
        "distortion_levels": args.distortion_levels,
        "block_size": args.block_size,
        "seed": args.seed,
        "cipher_offset": args.cipher_offset,
    }
    spec = replace_kv(spec, {k: v for k, v in flags.items() if v is not None})
    if args.no_reversal_cue:
        spec = dataclasses.replace(spec, reversal_cue=False)
    return spec


def _add_corpus_flags(p):
    p.add_argument("--spec", help="corpus spec key=value file")
    p.add_argument("--n-sentences", type=int)
    p.add_argument("--length-min", type=int)
    p.add_argument("--length-max", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--distortion", type=float)
    p.add_argument("--distortion-levels", help="comma-separated mixture levels")
    p.add_argument("--block-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--cipher-offset", type=int)
    p.add_argument("--no-reversal-cue", action="store_true")


def cmd_gen_data(args):
    spec = _spec_for(args)
    corpus = generate_corpus(spec)
    write_corpus(corpus, args.out)
    write_spec(spec, args.out + ".spec")
    print(f"wrote {len(corpus)} pairs to {args.out}.{{src,tgt,align,spec}}")


def _model_config(args, vocab_size):
    base = ModelConfig(src_vocab=vocab_size, tgt_vocab=vocab_size)
    if args.model_config:
        return replace_kv(base, read_kv(args.model_config))
    return base


def cmd_train(args):
    corpus = read_corpus(args.corpus)
    vocab_size = read_spec(args.corpus + ".spec").vocab_size if os.path.exists(args.corpus + ".spec") else args.vocab_size
    if args.init:
        model, adam, _ = load_checkpoint(args.init)
        adam = adam if args.resume_optimizer else None
    else:
        model, adam = Transformer(_model_config(args, vocab_size)), None
    if model.config.src_vocab != vocab_size:
        raise ConfigError(f"checkpoint vocab {model.config.src_vocab} != corpus vocab {vocab_size}")
    weights = WeightConfig(
        lam=args.lam, gamma=args.gamma, use_sentence_weight=not args.no_sentence_weight, use_diagonal=not args.no_diagonal
    )
    plan = TrainPlan(args.phase, args.lr, args.steps, args.batch_size, args.prefix_cap, args.seed, args.k,
                     args.log_every, args.warmup, weights)
    result = run_training(plan, corpus, model, log_path=args.log, adam=adam)
    save_checkpoint(args.out, result.model, result.adam, {"phase": plan.phase, "steps": plan.steps, "seed": plan.seed,
                                                          "complete": True})
    print(f"{plan.phase}: {plan.steps} steps, final loss {result.curve[-1][1]:.6f} -> {args.out}")


def _inference_config(args):
    return InferenceConfig(args.policy, th_max=args.th_max, l_max=args.l_max, delta=args.delta, k=args.k,
                           max_output=args.max_output)


def cmd_translate(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.corpus)
    if max(max(p.source) for p in corpus) >= model.config.src_vocab:
        raise ConfigError("corpus contains ids outside the checkpoint vocabulary")
    traces = translate_corpus(model, corpus, _inference_config(args))
    write_traces(traces, args.out)
    print(f"wrote {len(traces)} traces to {args.out}")


def cmd_evaluate(args):
    spec = read_spec(args.spec) if args.spec else CorpusSpec(vocab_size=args.vocab_size, cipher_offset=args.cipher_offset)
    aligner = CipherAligner(build_vocab(spec))
    points = [evaluate_traces(read_traces(path), aligner, label=os.path.basename(path), trace_path=path)
              for path in args.traces]
    if args.out:
        write_points(points, args.out)
    for p in points:
        print(f"{p.label}\tAL={p.al:.3f}\tBLEU={p.bleu:.2f}\tR_H={p.hallucination:.4f}")


def make_experiment_command(kind):
    def command(args):
        overrides = [f"kind={kind}"] + list(args.set or [])
        if args.output_dir:
            overrides.append(f"output_dir={args.output_dir}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        report = run_experiment(cfg)
        print(f"{kind}: {len(report.points)} points, {report.wall_clock:.1f}s -> {cfg.output_dir}/report.json")

    return command


def build_parser():
    parser = argparse.ArgumentParser(prog="simtlab", description="Simultaneous translation lab on synthetic corpora.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _add_corpus_flags(p)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training phase")
    p.add_argument("--phase", choices=PHASES, required=True)
    p.add_argument("--corpus", required=True, help="corpus prefix")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--resume-optimizer", action="store_true")
    p.add_argument("--model-config", help="key=value model config file")
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--prefix-cap", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--log", help="training log TSV")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.25)
    p.add_argument("--no-sentence-weight", action="store_true")
    p.add_argument("--no-diagonal", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode a corpus and write trace JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", choices=("threshold", "waitk", "offline"), default="threshold")
    p.add_argument("--th-max", type=float, default=0.9)
    p.add_argument("--l-max", type=int, default=9)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-output", type=int, default=0)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="metrics TSV from trace files")
    p.add_argument("traces", nargs="+")
    p.add_argument("--spec", help="corpus spec file (for the alignment oracle)")
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--cipher-offset", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    for kind, help_text in (
        ("sweep", "latency-quality sweep for CBSiMT and wait-k"),
        ("bin-study", "per-AA-bin offline vs wait-k study"),
        ("ablate", "weight ablation"),
        ("e2e", "generate, train, sweep and report"),
    ):
        p = sub.add_parser(kind, help=help_text)
        p.add_argument("--config", help="experiment key=value file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=make_experiment_command(kind))
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="simtlab %(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except HarnessError as err:
        print(f"simtlab[{err.stage}]: error: {err}", file=sys.stderr)
        if err.artifacts:
            print(f"simtlab[{err.stage}]: artifacts on disk: {', '.join(err.artifacts)}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as err:
        print(f"simtlab[{args.command}]: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        print(f"simtlab[{args.command}]: error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
