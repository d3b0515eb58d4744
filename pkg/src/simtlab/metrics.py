"""Latency, anticipation, hallucination and BLEU metrics.

All functions are pure; corpus-level aggregation sorts by sentence index
so results do not depend on evaluation order.
"""
import csv
import math
from collections import Counter
from dataclasses import dataclass, field

from . import EOS


class UndefinedMetricError(ValueError):
    pass


def average_anticipation(alignment):
    """Mean of ``max(i - j, 0)`` over (source i, target j) alignment links."""
    links = list(alignment)
    if not links:
        raise UndefinedMetricError("average anticipation of an empty alignment set")
    return sum(max(i - j, 0) for i, j in links) / len(links)


def average_lagging(delays, source_len, target_len):
    """Average Lagging over the delays up to the first one that reaches the full source.

    ``AL = 1/tau * sum_{i<=tau} (g_i - (i-1) / r)`` with ``r = I / J``.
    """
    delays = list(delays)
    if not delays:
        raise UndefinedMetricError("average lagging of an empty trace")
    if source_len <= 0 or target_len <= 0:
        raise UndefinedMetricError("average lagging needs positive lengths")
    rate = target_len / source_len
    tau = next((i + 1 for i, g in enumerate(delays) if g >= source_len), len(delays))
    return sum(g - i / rate for i, g in enumerate(delays[:tau])) / tau


def hallucinated_flags(hypothesis, delays, aligned_source):
    """Per emitted token: True if its aligned source position is beyond its delay.

    ``aligned_source`` gives the 1-based source position of each hypothesis
    token or None when the token is unaligned. EOS tokens are skipped
    (returned as None).
    """
    flags = []
    for token, delay, pos in zip(hypothesis, delays, aligned_source):
        if token == EOS:
            flags.append(None)
        else:
            flags.append(pos is None or pos > delay)
    return flags


def hallucination_ratio(traces, aligner):
    """``R_H = hallucinated tokens / emitted tokens`` over all traces.

    ``aligner(trace)`` returns the aligned source position (or None) for
    every hypothesis token. Each token is counted once, at its emission
    delay.
    """
    if aligner is None:
        raise UndefinedMetricError("hallucination ratio needs an alignment oracle")
    hallucinated = total = 0
    for trace in sorted(traces, key=lambda t: t.index):
        flags = hallucinated_flags(trace.hypothesis, trace.delays, aligner(trace))
        for f in flags:
            if f is not None:
                total += 1
                hallucinated += f
    return hallucinated / total if total else 0.0


class CipherAligner:
    """Oracle aligner for cipher corpora.

    A hypothesis token can only align to a source token it is the cipher
    of. Tokens that match the reference at the same position inherit the
    reference alignment; the rest take the earliest unused matching
    source position. Each source position is used at most once.
    """

    def __init__(self, vocab):
        self.vocab = vocab

    def __call__(self, trace):
        source = trace.source
        hyp = trace.hypothesis
        reference = list(trace.reference or ())
        origin = {j: i for i, j in (trace.alignment or ())}
        used = set()
        aligned = [None] * len(hyp)
        for t, token in enumerate(hyp):
            if token == EOS:
                continue
            ref_pos = origin.get(t + 1)
            if t < len(reference) and reference[t] == token and ref_pos is not None and ref_pos not in used:
                aligned[t] = ref_pos
                used.add(ref_pos)
        for t, token in enumerate(hyp):
            if token == EOS or aligned[t] is not None:
                continue
            want = self.vocab.decipher(token) if token >= 3 else None
            for s, x in enumerate(source, 1):
                if s not in used and x == want:
                    aligned[t] = s
                    used.add(s)
                    break
        return aligned


def _ngrams(tokens, n):
    return Counter(tuple(tokens[k : k + n]) for k in range(len(tokens) - n + 1))


@dataclass
class BleuResult:
    score: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def corpus_bleu(hypotheses, references, max_order=4, smooth=False):
    """Corpus BLEU in percent over already-tokenised sequences.

    Unsmoothed by default (any zero n-gram precision gives 0); ``smooth``
    adds one to numerator and denominator for orders above 1.
    """
    hypotheses = [list(h) for h in hypotheses]
    references = [list(r) for r in references]
    if not hypotheses:
        raise UndefinedMetricError("BLEU of an empty hypothesis set")
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_order
    possible = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            possible[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = []
    for n in range(max_order):
        if smooth and n > 0:
            precisions.append((matches[n] + 1) / (possible[n] + 1))
        else:
            precisions.append(matches[n] / possible[n] if possible[n] else 0.0)
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1 - ref_len / hyp_len)
    if min(precisions) <= 0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return BleuResult(score, precisions, bp, hyp_len, ref_len)


@dataclass
class LatencyQualityPoint:
    label: str
    al: float
    bleu: float
    hallucination: float
    settings: dict = field(default_factory=dict)
    trace_path: str = ""

    def __post_init__(self):
        if not 0.0 <= self.hallucination <= 1.0:
            raise ValueError(f"hallucination ratio {self.hallucination} outside [0, 1]")
        if not math.isfinite(self.al):
            raise ValueError("AL must be finite")


POINT_FIELDS = ["label", "settings", "al", "bleu", "hallucination", "trace"]


def _settings_str(settings):
    return ";".join(f"{k}={v}" for k, v in sorted(settings.items()))


def write_points(points, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(POINT_FIELDS)
        for p in points:
            writer.writerow([p.label, _settings_str(p.settings), f"{p.al:.6f}", f"{p.bleu:.6f}",
                             f"{p.hallucination:.6f}", p.trace_path])


def read_points(path):
    points = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            settings = dict(kv.split("=", 1) for kv in row["settings"].split(";") if kv)
            points.append(LatencyQualityPoint(row["label"], float(row["al"]), float(row["bleu"]),
                                              float(row["hallucination"]), settings, row["trace"]))
    return points


def evaluate_traces(traces, aligner, label="", settings=None, trace_path=""):
    """One LatencyQualityPoint from a list of traces (metrics over content tokens)."""
    traces = sorted(traces, key=lambda t: t.index)
    hyps = [[y for y in t.hypothesis if y != EOS] for t in traces]
    refs = [list(t.reference) for t in traces]
    bleu = corpus_bleu(hyps, refs).score
    al = sum(
        average_lagging(t.delays, len(t.source), len(t.reference) + 1) for t in traces
    ) / len(traces)
    rh = hallucination_ratio(traces, aligner)
    return LatencyQualityPoint(label, al, bleu, rh, dict(settings or {}), str(trace_path))
