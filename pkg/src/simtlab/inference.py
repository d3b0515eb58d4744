"""Streaming READ/WRITE decoding: wait-k, confidence threshold, offline.

A policy drives any object with ``encode_source(prefix)`` and
``predict(memory, target_prefix) -> (token, probability)``; the
transformer and the table-driven ``ScriptedModel`` both qualify.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import BOS, EOS

POLICIES = ("waitk", "threshold", "offline")


@dataclass(frozen=True)
class InferenceConfig:
    policy: str = "threshold"
    th_max: float = 0.9
    l_max: int = 9
    delta: float = 1.0
    k: int = 5
    max_output: int = 0  # 0 -> 2 * J + 10

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if not 0.0 <= self.th_max <= 1.0:
            raise ValueError("th_max must lie in [0, 1]")
        if self.l_max < 1 or self.delta <= 0 or self.k < 1:
            raise ValueError("need l_max >= 1, delta > 0, k >= 1")

    def label(self):
        if self.policy == "threshold":
            return f"threshold(l_max={self.l_max},delta={self.delta:g})"
        if self.policy == "waitk":
            return f"waitk(k={self.k})"
        return "offline"

    def settings(self):
        if self.policy == "threshold":
            return {"policy": "threshold", "th_max": f"{self.th_max:g}", "l_max": self.l_max, "delta": f"{self.delta:g}"}
        if self.policy == "waitk":
            return {"policy": "waitk", "k": self.k}
        return {"policy": "offline"}


@dataclass
class StepRecord:
    action: str  # "R" or "W"
    lag: int
    threshold: float
    p_pred: float


@dataclass
class ReadWriteTrace:
    source: list  # full source stream, EOS-terminated
    hypothesis: list = field(default_factory=list)  # emitted ids (EOS included when written)
    delays: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    truncated: bool = False
    index: int = 0
    reference: list = None  # target content ids (no EOS), for metrics
    alignment: list = None  # oracle (source, target) links

    @property
    def actions(self):
        return "".join(s.action for s in self.steps)

    def check(self):
        assert len(self.delays) == len(self.hypothesis)
        assert all(a <= b for a, b in zip(self.delays, self.delays[1:]))
        assert all(1 <= d <= len(self.source) for d in self.delays)

    def to_json(self):
        return json.dumps(
            {
                "index": self.index,
                "source": self.source,
                "hypothesis": self.hypothesis,
                "delays": self.delays,
                "actions": self.actions,
                "truncated": self.truncated,
                "reference": self.reference,
                "alignment": [list(a) for a in self.alignment] if self.alignment is not None else None,
                "steps": [[s.action, s.lag, round(s.threshold, 6), round(s.p_pred, 6)] for s in self.steps],
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        steps = [StepRecord(a, int(l), float(t), float(p)) for a, l, t, p in d.get("steps", [])]
        alignment = [tuple(a) for a in d["alignment"]] if d.get("alignment") is not None else None
        return cls(d["source"], d["hypothesis"], d["delays"], steps, d.get("truncated", False), d.get("index", 0),
                   d.get("reference"), alignment)


def write_traces(traces, path):
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")


def read_traces(path):
    with open(path, encoding="utf-8") as fh:
        return [ReadWriteTrace.from_json(line) for line in fh if line.strip()]


def threshold_schedule(lag, th_max=0.9, l_max=9, delta=1.0):
    """``th_max * (1 - (l / l_max) ** delta)``, equal to th_max for l <= 0 and 0 for l >= l_max."""
    if lag >= l_max:
        return 0.0
    if lag <= 0:
        return th_max
    return th_max * (1.0 - (lag / l_max) ** delta)


def greedy(dist):
    """Argmax token and its probability; ties go to the lowest id."""
    dist = np.asarray(dist, dtype=np.float64)
    y = int(np.argmax(dist))
    return y, float(dist[y])


def step_predict(model, memory, target_prefix):
    return model.predict(memory, target_prefix)


def _max_output(model, max_output, source):
    """Requested cap (default ``2 * J + 10``), never beyond the decoder's position range."""
    cap = max_output if max_output > 0 else 2 * len(source) + 10
    config = getattr(model, "config", None)
    return min(cap, config.max_len) if config is not None else cap


def _check_source(source):
    source = list(source)
    if not source or source[-1] != EOS:
        raise ValueError("source stream must be nonempty and end with EOS")
    return source


class _Reader:
    """Encodes the source prefix only when it grows."""

    def __init__(self, model, source):
        self.model, self.source = model, source
        self.read, self.memory = 0, None

    def ensure(self, n):
        if n != self.read:
            self.memory = self.model.encode_source(self.source[:n])
            self.read = n
        return self.memory


def translate_threshold(model, source, cfg=InferenceConfig()):
    """Confidence-threshold policy: WRITE when p_pred >= th_l or the source is exhausted."""
    source = _check_source(source)
    cap = _max_output(model, cfg.max_output, source)
    reader = _Reader(model, source)
    trace = ReadWriteTrace(source)
    n_read = 1  # x_1 is pre-read and counts toward latency
    trace.steps.append(StepRecord("R", 1, 0.0, 0.0))
    while not trace.hypothesis or trace.hypothesis[-1] != EOS:
        if len(trace.hypothesis) >= cap:
            trace.hypothesis[-1] = EOS
            trace.truncated = True
            break
        lag = n_read - len(trace.hypothesis)
        th = threshold_schedule(lag, cfg.th_max, cfg.l_max, cfg.delta)
        y, p = step_predict(model, reader.ensure(n_read), [BOS] + trace.hypothesis)
        if p >= th or source[n_read - 1] == EOS:
            trace.hypothesis.append(y)
            trace.delays.append(n_read)
            trace.steps.append(StepRecord("W", lag, th, p))
        else:
            n_read += 1
            trace.steps.append(StepRecord("R", lag, th, p))
    return trace


def translate_waitk(model, source, k, max_output=0):
    """Read ``k`` tokens, then alternate WRITE and READ; delays are ``min(k + i - 1, J)``."""
    source = _check_source(source)
    big_j = len(source)
    cap = _max_output(model, max_output, source)
    reader = _Reader(model, source)
    trace = ReadWriteTrace(source)
    n_read = 0
    while not trace.hypothesis or trace.hypothesis[-1] != EOS:
        if len(trace.hypothesis) >= cap:
            trace.hypothesis[-1] = EOS
            trace.truncated = True
            break
        g = min(k + len(trace.hypothesis), big_j)
        while n_read < g:
            n_read += 1
            trace.steps.append(StepRecord("R", n_read - len(trace.hypothesis), 0.0, 0.0))
        y, p = step_predict(model, reader.ensure(g), [BOS] + trace.hypothesis)
        trace.steps.append(StepRecord("W", g - len(trace.hypothesis), 0.0, p))
        trace.hypothesis.append(y)
        trace.delays.append(g)
    return trace


def translate_offline_trace(model, source, max_output=0):
    source = _check_source(source)
    return translate_waitk(model, source, len(source), max_output)


def translate_offline(model, source, max_output=0):
    """Greedy decode given the whole source; returns the emitted ids (EOS included)."""
    return translate_offline_trace(model, source, max_output).hypothesis


def run_policy(model, source, cfg):
    if cfg.policy == "threshold":
        return translate_threshold(model, source, cfg)
    if cfg.policy == "waitk":
        return translate_waitk(model, source, cfg.k, cfg.max_output)
    return translate_offline_trace(model, source, cfg.max_output)


def translate_corpus(model, corpus, cfg):
    """Run a policy over every pair; traces carry the reference and oracle alignment."""
    traces = []
    for index, pair in enumerate(corpus):
        trace = run_policy(model, list(pair.source) + [EOS], cfg)
        trace.index = index
        trace.reference = list(pair.target)
        trace.alignment = [tuple(a) for a in pair.alignment]
        traces.append(trace)
    return traces


class ScriptedModel:
    """Test double returning predictions from a table instead of a network.

    ``table[j][i]`` (or ``table(j, i)``) is the ``(token, probability)``
    predicted for 0-based target position ``i`` after reading ``j`` source
    tokens.
    """

    def __init__(self, table):
        self.table = table

    def encode_source(self, source_prefix):
        return len(source_prefix)

    def predict(self, memory, target_prefix):
        i = len(target_prefix) - 1
        token, p = self.table(memory, i) if callable(self.table) else self.table[memory][i]
        return int(token), float(p)


def config_dict(cfg):
    return asdict(cfg)
