"""Experiment driver: end-to-end pipeline, latency sweeps, bin study, ablation.

Every experiment writes into one output directory::

    config.txt                 echo of the effective configuration
    data/train.*, data/test.*  corpora (src / tgt / align)
    checkpoints/*.ckpt         SIMTLAB1 checkpoints, one per training stage
    logs/*.tsv                 training logs (contain wall-clock, not compared)
    traces/*.jsonl             one trace file per inference setting
    metrics/*.tsv              metric tables (byte-identical across reruns)
    metrics/checksums.tsv      sha256 of every deterministic artifact
    report.json                points, config echo, wall-clock, checksums

Stages are skipped when their artifact already exists, so a run with a
deleted checkpoint resumes from that stage.
"""
import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import ConfigError, dump_kv, format_value, parse_kv, read_kv, replace_kv, to_kv
from .data import CorpusSpec, bin_by_aa, build_vocab, generate_corpus, read_corpus, write_corpus
from .inference import InferenceConfig, read_traces, translate_corpus, write_traces
from .metrics import CipherAligner, evaluate_traces, write_points
from .model import ModelConfig, Transformer, load_checkpoint, save_checkpoint
from .training import TrainPlan, run_training
from .weights import WeightConfig

log = logging.getLogger(__name__)

KINDS = ("e2e", "sweep", "bin-study", "ablate")
ABLATIONS = {
    "full": (True, True),
    "no_beta": (False, True),
    "no_diag": (True, False),
    "no_both": (False, False),
}
THRESHOLD_GRID = ("9:0.1", "9:0.3", "9:0.5", "9:0.9", "9:1.5", "9:2.0", "9:3.0", "9:5.0", "19:1.5", "19:3.0", "19:5.0")


class HarnessError(RuntimeError):
    """A stage failed; carries the stage name and the artifacts present at that point."""

    def __init__(self, stage, message, artifacts=()):
        self.stage = stage
        self.artifacts = list(artifacts)
        super().__init__(message)


@dataclass(frozen=True)
class StageConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 32
    warmup: int = 0
    k: int = 9  # wait-k training lag (wait-k stage only)
    prefix_cap: int = 10
    log_every: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "e2e"
    output_dir: str = "runs/e2e"
    seed: int = 0
    corpus_path: str = ""  # if set, read the training corpus from this prefix
    test_sentences: int = 200
    test_seed: int = 1000
    th_max: float = 0.9
    threshold_grid: tuple[str, ...] = THRESHOLD_GRID  # l_max:delta pairs
    waitk_grid: tuple[int, ...] = (1, 3, 5, 7, 9, 11, 13)
    ablation_deltas: tuple[float, ...] = (0.5, 2.0, 7.0)
    ablation_l_max: int = 9
    bins: int = 4
    bin_k: int = 5
    min_bin_size: int = 32
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: StageConfig = field(default_factory=StageConfig)
    finetune: StageConfig = field(default_factory=lambda: StageConfig(steps=500, lr=1e-4))
    waitk: StageConfig = field(default_factory=StageConfig)
    weights: WeightConfig = field(default_factory=WeightConfig)

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        self.corpus.validate()
        self.model.validate()
        if self.corpus_path and not all(p.exists() for p in _corpus_files(self.corpus_path)):
            raise ConfigError(f"corpus_path {self.corpus_path!r}: missing .src/.tgt/.align files")
        for side in ("src_vocab", "tgt_vocab"):
            if getattr(self.model, side) != self.corpus.vocab_size:
                raise ConfigError(f"model.{side}={getattr(self.model, side)} != corpus.vocab_size={self.corpus.vocab_size}")
        if self.kind in ("e2e", "sweep") and not self.inference_grid():
            raise ConfigError("threshold_grid is empty")
        if self.kind == "sweep" and not self.waitk_grid:
            raise ConfigError("waitk_grid is empty")
        if self.kind == "ablate" and not self.ablation_deltas:
            raise ConfigError("ablation_deltas is empty")
        if self.bins < 2:
            raise ConfigError("bins must be >= 2")
        return self

    def inference_grid(self):
        grid = []
        for item in self.threshold_grid:
            try:
                l_max, delta = item.split(":")
                grid.append(InferenceConfig("threshold", th_max=self.th_max, l_max=int(l_max), delta=float(delta)))
            except ValueError as err:
                raise ConfigError(f"bad threshold_grid entry {item!r}: expected l_max:delta ({err})") from None
        return grid

    def waitk_configs(self):
        return [InferenceConfig("waitk", k=k) for k in self.waitk_grid]

    def plan(self, phase, stage, weights=None, seed_offset=0):
        return TrainPlan(
            phase=phase,
            lr=stage.lr,
            steps=stage.steps,
            batch_size=stage.batch_size,
            prefix_cap=stage.prefix_cap,
            seed=self.seed + seed_offset,
            k=stage.k,
            log_every=stage.log_every,
            warmup=stage.warmup,
            weights=weights or self.weights,
        )


SECTIONS = {
    "corpus": CorpusSpec,
    "model": ModelConfig,
    "pretrain": StageConfig,
    "finetune": StageConfig,
    "waitk": StageConfig,
    "weights": WeightConfig,
}


def config_from_mapping(mapping):
    """Build an ExperimentConfig from flat ``section.key`` / ``key`` strings.

    Model vocabulary sizes follow ``corpus.vocab_size`` unless set explicitly.
    """
    top, sections = {}, {name: {} for name in SECTIONS}
    for key, value in mapping.items():
        section, dot, sub = key.partition(".")
        if not dot:
            top[key] = value
        elif section in SECTIONS:
            sections[section][sub] = value
        else:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
    if set(top) & set(SECTIONS):
        raise ConfigError(f"section names used as plain keys: {sorted(set(top) & set(SECTIONS))}")
    vocab = sections["corpus"].get("vocab_size")
    if vocab is not None:
        sections["model"] = {"src_vocab": vocab, "tgt_vocab": vocab, **sections["model"]}
    cfg = ExperimentConfig()
    try:
        cfg = replace_kv(cfg, top)
        cfg = dataclasses.replace(cfg, **{n: replace_kv(getattr(cfg, n), sections[n]) for n in SECTIONS})
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    return cfg.validate()


def config_to_mapping(cfg):
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in SECTIONS:
            out.update({f"{f.name}.{k}": v for k, v in to_kv(value).items()})
        else:
            out[f.name] = value
    return out


def load_config(path=None, overrides=()):
    """Read a key=value file (optional) and apply ``key=value`` override strings."""
    mapping = read_kv(path) if path else {}
    extra = parse_kv("\n".join(overrides), "<overrides>")
    mapping.update(extra)
    return config_from_mapping(mapping)


# --- artifacts ---


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _corpus_files(prefix):
    return [Path(str(prefix) + ext) for ext in (".src", ".tgt", ".align")]


@dataclass
class ExperimentReport:
    kind: str
    points: list
    rows: list
    config: dict
    trace_paths: list
    wall_clock: float
    checksums: dict
    output_dir: str = ""

    def to_json(self):
        return json.dumps(
            {
                "kind": self.kind,
                "points": [dataclasses.asdict(p) for p in self.points],
                "rows": self.rows,
                "config": {k: format_value(v) for k, v in self.config.items()},
                "trace_paths": self.trace_paths,
                "wall_clock": round(self.wall_clock, 3),
                "checksums": self.checksums,
                "decoding": "greedy",
            },
            indent=2,
            sort_keys=True,
        )


def verify_checksums(report, root=None):
    """Paths whose on-disk sha256 differs from the report (empty when consistent)."""
    root = Path(root or report.output_dir)
    return sorted(p for p, digest in report.checksums.items() if not (root / p).exists() or sha256_file(root / p) != digest)


class Run:
    """Output directory bookkeeping shared by all experiment kinds."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        for sub in ("data", "checkpoints", "logs", "traces", "metrics"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.stage = "setup"
        self.started = time.perf_counter()
        self.vocab = build_vocab(cfg.corpus)
        self.aligner = CipherAligner(self.vocab)
        self._train = self._test = None
        self.trace_paths = []
        self.fingerprints = {}  # id(model) -> fingerprint of the stage that produced it
        self.fresh = set()  # ids of models trained in this run; their traces are regenerated
        (self.root / "config.txt").write_text(dump_kv(config_to_mapping(cfg)), encoding="utf-8")

    def rel(self, path):
        return Path(path).relative_to(self.root).as_posix()

    def artifacts(self):
        return sorted(self.rel(p) for p in self.root.rglob("*") if p.is_file())

    def run_stage(self, name, fn, *args):
        self.stage = name
        log.info("[%s] start", name)
        try:
            return fn(*args)
        except HarnessError as err:
            if not err.artifacts:
                err.artifacts = self.artifacts()
            raise
        except Exception as err:
            raise HarnessError(name, f"{type(err).__name__}: {err}", self.artifacts()) from err

    # data
    def train_corpus(self):
        if self._train is None:
            self._train = self.run_stage("gen-data", self._load_or_generate, "train", self.cfg.corpus)
        return self._train

    def test_corpus(self):
        if self._test is None:
            spec = dataclasses.replace(self.cfg.corpus, n_sentences=self.cfg.test_sentences, seed=self.cfg.test_seed)
            self._test = self.run_stage("gen-data", self._load_or_generate, "test", spec)
        return self._test

    def _load_or_generate(self, name, spec):
        prefix = self.root / "data" / name
        if name == "train" and self.cfg.corpus_path:
            corpus = read_corpus(self.cfg.corpus_path)
        else:
            corpus = generate_corpus(spec)
        write_corpus(corpus, prefix)
        return corpus

    # training
    def checkpoint(self, name):
        return self.root / "checkpoints" / f"{name}.ckpt"

    def trained(self, name, plan, corpus, init=None):
        """Train (or reuse) the model for stage ``name``; ``init`` names a checkpoint to start from."""
        return self.run_stage(name, self._trained, name, plan, corpus, init)

    def _fingerprint(self, plan, corpus, init):
        """Hash of everything that determines a stage's trained weights."""
        h = hashlib.sha256()
        h.update(repr((plan, self.cfg.model)).encode())
        for p in corpus:
            h.update(repr((p.source, p.target, p.alignment)).encode())
        h.update(self.fingerprints.get(id(init), "scratch").encode())
        return h.hexdigest()

    def _trained(self, name, plan, corpus, init):
        path = self.checkpoint(name)
        fingerprint = self._fingerprint(plan, corpus, init)
        if path.exists():
            model, _, meta = load_checkpoint(path)
            if model.config != self.cfg.model:
                raise HarnessError(name, f"{self.rel(path)}: checkpoint config {model.config} does not match {self.cfg.model}")
            if meta.get("complete") is not True:
                raise HarnessError(name, f"{self.rel(path)}: checkpoint is from an interrupted run; delete it to retrain")
            if meta.get("fingerprint") != fingerprint:
                raise HarnessError(name, f"{self.rel(path)}: checkpoint was trained with different data or settings; "
                                         "use a fresh output directory or delete it")
            log.info("[%s] reusing %s", name, self.rel(path))
            self.fingerprints[id(model)] = fingerprint
            return model
        model = Transformer(self.cfg.model)
        if init is not None:
            model.params.load(init.params.snapshot())
        log_path = self.root / "logs" / f"{name}.tsv"
        if log_path.exists():
            log_path.unlink()
        result = run_training(plan, corpus, model, log_path=log_path)
        tmp = path.with_suffix(".tmp")
        save_checkpoint(tmp, result.model, result.adam, {"stage": name, "phase": plan.phase, "steps": plan.steps,
                                                         "seed": plan.seed, "fingerprint": fingerprint,
                                                         "complete": True})
        os.replace(tmp, path)
        self.fingerprints[id(result.model)] = fingerprint
        self.fresh.add(id(result.model))
        return result.model

    # inference
    def evaluate(self, name, model, corpus, cfg, system):
        return self.run_stage(f"translate:{name}", self._evaluate, name, model, corpus, cfg, system)

    def _evaluate(self, name, model, corpus, cfg, system):
        path = self.root / "traces" / f"{name}.jsonl"
        if path.exists() and id(model) not in self.fresh:
            traces = read_traces(path)
        else:
            traces = translate_corpus(model, corpus, cfg)
            write_traces(traces, path)
        self.trace_paths.append(self.rel(path))
        settings = dict(cfg.settings(), system=system)
        return evaluate_traces(traces, self.aligner, f"{system}:{cfg.label()}", settings, self.rel(path))

    def finish(self, kind, points, rows):
        self.stage = "report"
        deterministic = [
            p for p in self.artifacts() if p.split("/")[0] in ("data", "checkpoints", "traces", "metrics")
            and p != "metrics/checksums.tsv"
        ]
        checksums = {p: sha256_file(self.root / p) for p in deterministic}
        with open(self.root / "metrics" / "checksums.tsv", "w", encoding="utf-8") as fh:
            fh.write("path\tsha256\n")
            fh.writelines(f"{p}\t{checksums[p]}\n" for p in sorted(checksums))
        report = ExperimentReport(kind, points, rows, config_to_mapping(self.cfg), sorted(set(self.trace_paths)),
                                  time.perf_counter() - self.started, checksums, str(self.root))
        (self.root / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        return report


def write_rows(rows, fields, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([f"{row[f]:.6f}" if isinstance(row[f], float) else row[f] for f in fields])


def hallucination_curve(points):
    """(system, AL, R_H) rows sorted by system then AL."""
    rows = [{"system": p.settings.get("system", ""), "label": p.label, "al": p.al, "hallucination": p.hallucination}
            for p in points]
    return sorted(rows, key=lambda r: (r["system"], r["al"], r["label"]))


def matched_pairs(points_a, points_b, tolerance=0.5):
    """Pair each point of ``points_b`` with the AL-nearest point of ``points_a`` within ``tolerance``."""
    pairs = []
    for b in sorted(points_b, key=lambda p: p.al):
        if not points_a:
            break
        a = min(points_a, key=lambda p: (abs(p.al - b.al), p.label))
        if abs(a.al - b.al) <= tolerance:
            pairs.append((a, b))
    return pairs


def decrease_rates(bleu_by_bin):
    """``(BLEU_0 - BLEU_b) / BLEU_0`` for every bin."""
    base = bleu_by_bin[0]
    if base <= 0:
        raise ConfigError("bin-0 BLEU is zero; decrease rate undefined (train longer or use more data)")
    return [(base - b) / base for b in bleu_by_bin]


# --- experiments ---


def _cbsimt_model(run):
    cfg = run.cfg
    corpus = run.train_corpus()
    pre = run.trained("pretrain", cfg.plan("pretrain-offline", cfg.pretrain), corpus)
    return run.trained("finetune", cfg.plan("finetune-cbsimt", cfg.finetune, seed_offset=1), corpus, pre)


def cmd_end_to_end(cfg):
    """Generate data, pretrain, fine-tune, run the threshold sweep and write the hallucination curve."""
    run = Run(cfg)
    model = _cbsimt_model(run)
    test = run.test_corpus()
    points = [run.evaluate(f"cbsimt-{c.l_max}-{c.delta:g}", model, test, c, "cbsimt") for c in cfg.inference_grid()]
    write_points(points, run.root / "metrics" / "sweep.tsv")
    curve = hallucination_curve(points)
    write_rows(curve, ["system", "label", "al", "hallucination"], run.root / "metrics" / "hallucination.tsv")
    return run.finish("e2e", points, curve)


def cmd_latency_sweep(cfg):
    """Threshold grid on the CBSiMT model and a k grid on a wait-k model trained with ``waitk.k``."""
    run = Run(cfg)
    model = _cbsimt_model(run)
    baseline = run.trained("waitk", cfg.plan("train-waitk", cfg.waitk, seed_offset=2), run.train_corpus())
    test = run.test_corpus()
    points = [run.evaluate(f"cbsimt-{c.l_max}-{c.delta:g}", model, test, c, "cbsimt") for c in cfg.inference_grid()]
    points += [run.evaluate(f"waitk-{c.k}", baseline, test, c, "waitk") for c in cfg.waitk_configs()]
    write_points(points, run.root / "metrics" / "sweep.tsv")
    curve = hallucination_curve(points)
    write_rows(curve, ["system", "label", "al", "hallucination"], run.root / "metrics" / "hallucination.tsv")
    return run.finish("sweep", points, curve)


BIN_FIELDS = ["bin", "model", "n_train", "mean_aa", "al", "bleu", "decrease_rate", "hallucination", "trace"]


def cmd_monotonicity_study(cfg):
    """Train offline and wait-k models per AA bin; score all on one shared test set."""
    run = Run(cfg)
    corpus = run.train_corpus()
    bins = bin_by_aa(corpus, cfg.bins).bins
    small = [b for b, members in enumerate(bins) if len(members) < cfg.min_bin_size]
    if small:
        raise HarnessError("bin-study", f"bins {small} have fewer than min_bin_size={cfg.min_bin_size} sentences")
    test = run.test_corpus()
    points, rows = [], []
    systems = (
        ("offline", "pretrain-offline", cfg.pretrain, InferenceConfig("offline")),
        ("waitk", "train-waitk", dataclasses.replace(cfg.waitk, k=cfg.bin_k), InferenceConfig("waitk", k=cfg.bin_k)),
    )
    for system, phase, stage, icfg in systems:
        system_points = []
        for b, members in enumerate(bins):
            subset = [corpus[i] for i in members]
            # one seed for every bin, so bins differ only in their data
            model = run.trained(f"bin{b}-{system}", cfg.plan(phase, stage, seed_offset=10), subset)
            point = run.evaluate(f"bin{b}-{system}", model, test, icfg, system)
            point.settings["bin"] = b
            system_points.append(point)
            rows.append({"bin": b, "model": system, "n_train": len(subset),
                         "mean_aa": sum(corpus[i].aa for i in members) / len(members),
                         "al": point.al, "bleu": point.bleu, "hallucination": point.hallucination,
                         "trace": point.trace_path})
        rates = run.run_stage("bin-study", decrease_rates, [p.bleu for p in system_points])
        for row, rate in zip(rows[-len(bins):], rates):
            row["decrease_rate"] = rate
        points += system_points
    rows.sort(key=lambda r: (r["bin"], r["model"]))
    write_rows(rows, BIN_FIELDS, run.root / "metrics" / "bins.tsv")
    write_points(points, run.root / "metrics" / "bin_points.tsv")
    return run.finish("bin-study", points, rows)


ABLATION_FIELDS = ["variant", "sentence_weight", "diagonal", "mean_beta", "al", "bleu", "delta_al", "delta_bleu"]


def logged_mean_beta(path):
    with open(path, encoding="utf-8") as fh:
        values = [float(r["mean_beta"]) for r in csv.DictReader(fh, delimiter="\t")]
    return sum(values) / len(values)


def cmd_ablation(cfg):
    """Fine-tune four variants from one pretrained model; average over fixed threshold settings."""
    run = Run(cfg)
    corpus = run.train_corpus()
    pre = run.trained("pretrain", cfg.plan("pretrain-offline", cfg.pretrain), corpus)
    test = run.test_corpus()
    settings = [InferenceConfig("threshold", th_max=cfg.th_max, l_max=cfg.ablation_l_max, delta=d)
                for d in cfg.ablation_deltas]
    points, rows = [], []
    for variant, (use_beta, use_diag) in ABLATIONS.items():
        wcfg = dataclasses.replace(cfg.weights, use_sentence_weight=use_beta, use_diagonal=use_diag)
        model = run.trained(f"finetune-{variant}", cfg.plan("finetune-cbsimt", cfg.finetune, wcfg, seed_offset=1),
                            corpus, pre)
        vpoints = [run.evaluate(f"{variant}-{c.l_max}-{c.delta:g}", model, test, c, variant) for c in settings]
        points += vpoints
        rows.append({"variant": variant, "sentence_weight": format_value(use_beta), "diagonal": format_value(use_diag),
                     "mean_beta": logged_mean_beta(run.root / "logs" / f"finetune-{variant}.tsv"),
                     "al": sum(p.al for p in vpoints) / len(vpoints),
                     "bleu": sum(p.bleu for p in vpoints) / len(vpoints)})
    for row in rows:
        row["delta_al"] = row["al"] - rows[0]["al"]
        row["delta_bleu"] = row["bleu"] - rows[0]["bleu"]
    write_rows(rows, ABLATION_FIELDS, run.root / "metrics" / "ablation.tsv")
    write_points(points, run.root / "metrics" / "ablation_points.tsv")
    return run.finish("ablate", points, rows)


COMMANDS = {
    "e2e": cmd_end_to_end,
    "sweep": cmd_latency_sweep,
    "bin-study": cmd_monotonicity_study,
    "ablate": cmd_ablation,
}


def run_experiment(cfg):
    return COMMANDS[cfg.kind](cfg)
