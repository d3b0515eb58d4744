"""Synthetic cipher translation corpora with oracle alignments.

The target is a per-token offset cipher of the source in which some
non-overlapping blocks of ``block_size`` tokens appear in reversed order.
With ``reversal_cue`` on, every reversed block starts with a dedicated cue
token, so the target is a deterministic function of the full source and
the reordering is learnable; without the cue, block placement is
unobservable noise.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import BOS, EOS, N_SPECIAL, PAD
from .config import dump_kv, from_kv, read_kv, to_kv
from .metrics import average_anticipation


class CorpusSpecError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    n_sentences: int = 2000
    length_min: int = 5
    length_max: int = 10
    vocab_size: int = 20
    distortion: float = 0.0
    block_size: int = 2
    seed: int = 0
    cipher_offset: int = 5
    reversal_cue: bool = True
    # if nonempty, each sentence draws its distortion from these levels
    distortion_levels: tuple[float, ...] = ()

    def levels(self):
        return self.distortion_levels or (self.distortion,)

    def validate(self):
        if self.n_sentences < 0:
            raise CorpusSpecError("n_sentences must be >= 0")
        if not 1 <= self.length_min <= self.length_max:
            raise CorpusSpecError(f"bad length range [{self.length_min}, {self.length_max}]")
        if self.vocab_size <= N_SPECIAL + int(self.reversal_cue):
            raise CorpusSpecError(f"vocab_size {self.vocab_size} leaves no regular content tokens")
        for rho in self.levels():
            if not 0.0 <= rho <= 1.0:
                raise CorpusSpecError(f"distortion {rho} outside [0, 1]")
        if any(rho > 0 for rho in self.levels()) and not 2 <= self.block_size <= self.length_min:
            raise CorpusSpecError(
                f"block_size {self.block_size} must lie in [2, length_min={self.length_min}] when distortion > 0"
            )


def write_spec(spec, path):
    Path(path).write_text(dump_kv(to_kv(spec)), encoding="utf-8")


def read_spec(path):
    return from_kv(CorpusSpec, read_kv(path))


@dataclass(frozen=True)
class Vocab:
    """Shared layout for source and target vocabularies.

    Ids 0/1/2 are BOS/EOS/PAD; content ids are ``3..size-1``. The cipher
    shifts a content id by ``offset`` cyclically within the content range.
    """

    size: int
    offset: int = 5

    @property
    def content_ids(self):
        return range(N_SPECIAL, self.size)

    def cipher(self, token):
        n = self.size - N_SPECIAL
        return N_SPECIAL + (token - N_SPECIAL + self.offset) % n

    def decipher(self, token):
        n = self.size - N_SPECIAL
        return N_SPECIAL + (token - N_SPECIAL - self.offset) % n

    def name(self, token, side="src"):
        if token < N_SPECIAL:
            return ("<bos>", "<eos>", "<pad>")[token]
        return f"{side}{token}"

    def lookup(self, name):
        specials = {"<bos>": BOS, "<eos>": EOS, "<pad>": PAD}
        if name in specials:
            return specials[name]
        token = int(name.lstrip("srctg"))
        if token not in self.content_ids:
            raise KeyError(name)
        return token


def build_vocab(spec):
    if spec.vocab_size <= N_SPECIAL:
        raise CorpusSpecError("vocab_size must exceed the 3 special ids")
    return Vocab(spec.vocab_size, spec.cipher_offset % max(1, spec.vocab_size - N_SPECIAL))


@dataclass(frozen=True)
class SentencePair:
    source: tuple
    target: tuple
    alignment: tuple  # sorted (source index, target index) pairs, 1-based
    aa: float = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(int(t) for t in self.source))
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))
        object.__setattr__(self, "alignment", tuple(sorted((int(i), int(j)) for i, j in self.alignment)))
        if self.aa is None and self.alignment:
            object.__setattr__(self, "aa", average_anticipation(self.alignment))
        elif self.aa is None:
            object.__setattr__(self, "aa", 0.0)

    def target_origin(self):
        """Map each 1-based target position to its aligned source position."""
        return {j: i for i, j in self.alignment}


def _block_starts(rng, length, rho, block):
    if rho <= 0:
        return []
    n_blocks = min(int(math.floor(rho * length / block + 0.5)), length // block)
    if n_blocks == 0:
        return []
    slots = np.sort(rng.choice(length - n_blocks * (block - 1), size=n_blocks, replace=False))
    return [int(s) + k * (block - 1) for k, s in enumerate(slots)]


def generate_pair(spec, index, vocab=None):
    """One sentence pair from its own RNG stream ``(seed, index)``."""
    vocab = vocab or build_vocab(spec)
    rng = np.random.default_rng([spec.seed, index])
    length = int(rng.integers(spec.length_min, spec.length_max + 1))
    levels = spec.levels()
    rho = levels[int(rng.integers(len(levels)))] if len(levels) > 1 else levels[0]
    starts = _block_starts(rng, length, rho, spec.block_size)

    cue = N_SPECIAL if spec.reversal_cue else None
    regular = np.arange(N_SPECIAL + int(spec.reversal_cue), spec.vocab_size)
    source = rng.choice(regular, size=length)
    order = list(range(length))
    for s in starts:
        if cue is not None:
            source[s] = cue
        order[s : s + spec.block_size] = order[s : s + spec.block_size][::-1]
    target = [vocab.cipher(int(source[o])) for o in order]
    alignment = [(o + 1, t + 1) for t, o in enumerate(order)]
    return SentencePair(tuple(int(t) for t in source), tuple(target), tuple(alignment))


def generate_corpus(spec):
    spec.validate()
    vocab = build_vocab(spec)
    return [generate_pair(spec, i, vocab) for i in range(spec.n_sentences)]


def expected_aa(spec):
    """Closed-form mean AA of ``generate_corpus(spec)`` over lengths and levels."""
    per_block = (spec.block_size**2) // 4
    total = 0.0
    lengths = range(spec.length_min, spec.length_max + 1)
    for rho in spec.levels():
        for length in lengths:
            if rho <= 0:
                continue
            n_blocks = min(int(math.floor(rho * length / spec.block_size + 0.5)), length // spec.block_size)
            total += n_blocks * per_block / length
    return total / (len(lengths) * len(spec.levels()))


@dataclass
class CorpusBins:
    bins: list

    @property
    def count(self):
        return len(self.bins)


def bin_by_aa(corpus, n_bins=4):
    """Sort by (AA, index) and split into equal bins, remainder to the last."""
    if not corpus:
        raise ValueError("cannot bin an empty corpus")
    order = sorted(range(len(corpus)), key=lambda i: (corpus[i].aa, i))
    size = len(order) // n_bins
    bins = [order[b * size : (b + 1) * size] for b in range(n_bins - 1)]
    bins.append(order[(n_bins - 1) * size :])
    return CorpusBins(bins)


@dataclass
class Batch:
    """Padded arrays for a group of pairs.

    Source rows are ``x + [EOS]`` and target rows ``[BOS] + y`` (inputs)
    and ``y + [EOS]`` (outputs); lengths include the EOS.
    """

    pairs: list
    indices: list
    src: np.ndarray
    src_len: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_len: np.ndarray

    def __len__(self):
        return len(self.pairs)


def collate(pairs, indices=None):
    j = np.array([len(p.source) + 1 for p in pairs])
    i = np.array([len(p.target) + 1 for p in pairs])
    src = np.full((len(pairs), j.max()), PAD, dtype=np.int64)
    tgt_in = np.full((len(pairs), i.max()), PAD, dtype=np.int64)
    tgt_out = np.full((len(pairs), i.max()), PAD, dtype=np.int64)
    for b, p in enumerate(pairs):
        src[b, : j[b]] = list(p.source) + [EOS]
        tgt_in[b, : i[b]] = [BOS] + list(p.target)
        tgt_out[b, : i[b]] = list(p.target) + [EOS]
    return Batch(list(pairs), list(indices if indices is not None else range(len(pairs))), src, j, tgt_in, tgt_out, i)


def make_batches(corpus, batch_size, seed=0):
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(corpus))
    return [
        collate([corpus[int(k)] for k in order[s : s + batch_size]], [int(k) for k in order[s : s + batch_size]])
        for s in range(0, len(corpus), batch_size)
    ]


def corpus_paths(prefix):
    prefix = str(prefix)
    return Path(prefix + ".src"), Path(prefix + ".tgt"), Path(prefix + ".align")


def write_corpus(corpus, prefix):
    src_path, tgt_path, align_path = corpus_paths(prefix)
    src_path.parent.mkdir(parents=True, exist_ok=True)
    src_path.write_text("".join(" ".join(map(str, p.source)) + "\n" for p in corpus), encoding="utf-8")
    tgt_path.write_text("".join(" ".join(map(str, p.target)) + "\n" for p in corpus), encoding="utf-8")
    align_path.write_text(
        "".join(" ".join(f"{i}-{j}" for i, j in p.alignment) + "\n" for p in corpus), encoding="utf-8"
    )
    return src_path, tgt_path, align_path


def _ids(line, path, lineno):
    try:
        return tuple(int(t) for t in line.split())
    except ValueError:
        raise CorpusFormatError(f"{path}:{lineno}: expected space-separated token ids") from None


def parse_pharaoh(line, path="<alignment>", lineno=1):
    pairs = []
    for item in line.split():
        parts = item.split("-")
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise CorpusFormatError(f"{path}:{lineno}: malformed alignment link {item!r}")
        pairs.append((int(parts[0]), int(parts[1])))
    if len(set(pairs)) != len(pairs):
        raise CorpusFormatError(f"{path}:{lineno}: duplicate alignment link")
    return pairs


def read_corpus(prefix):
    paths = corpus_paths(prefix)
    columns = [p.read_text(encoding="utf-8").splitlines() for p in paths]
    if len({len(c) for c in columns}) != 1:
        raise CorpusFormatError(f"{prefix}: source/target/alignment line counts differ {[len(c) for c in columns]}")
    corpus = []
    for lineno, (s, t, a) in enumerate(zip(*columns), 1):
        source = _ids(s, paths[0], lineno)
        target = _ids(t, paths[1], lineno)
        links = parse_pharaoh(a, paths[2], lineno)
        for i, j in links:
            if not (1 <= i <= len(source) and 1 <= j <= len(target)):
                raise CorpusFormatError(f"{paths[2]}:{lineno}: link {i}-{j} out of sentence bounds")
        corpus.append(SentencePair(source, target, links))
    return corpus
