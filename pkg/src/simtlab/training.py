"""Prefix-to-prefix objectives and the training loop.

Three objectives share one decoder pass shape:

* offline / wait-k cross-entropy, where target position ``i`` attends to
  the first ``g_i`` source tokens;
* the confidence-weighted loss, where every target token is predicted
  from each sampled source prefix and the per-cell log-probabilities are
  weighted by detached token weights and a batch-normalised sentence
  weight.
"""
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .core import AdamState, adam_step, no_grad, weighted_nll
from .core.ops import PROB_FLOOR
from .data import collate, make_batches
from .model import save_checkpoint
from .weights import (
    WeightConfig,
    batch_statistics,
    cell_grid,
    diagonal_distance,
    diagonal_regularizer,
    reorder_cost,
    sentence_weight,
    token_weight,
)

log = logging.getLogger(__name__)

PHASES = ("pretrain-offline", "finetune-cbsimt", "train-waitk")
PRETRAIN_LR = 2.5e-4
FINETUNE_LR = 5e-5


class TrainingError(RuntimeError):
    pass


def wait_k_prefix(i, k, big_j):
    return min(k + i - 1, big_j)


@dataclass(frozen=True)
class WaitKSchedule:
    k: int
    source_len: int
    target_len: int

    def g(self, i):
        return wait_k_prefix(i, self.k, self.source_len)

    def prefixes(self):
        return [self.g(i) for i in range(1, self.target_len + 1)]


def sample_prefixes(big_j, cap=10, seed=0):
    """All of ``1..J`` if ``J <= cap``, else ``J`` plus ``cap-1`` distinct draws from ``1..J-1``."""
    if cap < 1:
        raise ValueError("prefix cap must be >= 1")
    if big_j <= cap:
        return list(range(1, big_j + 1))
    rng = np.random.default_rng(seed)
    drawn = rng.choice(np.arange(1, big_j), size=cap - 1, replace=False)
    return sorted(int(j) for j in drawn) + [big_j]


def _schedule_matrix(batch, k):
    ti = batch.tgt_in.shape[1]
    i = np.arange(1, ti + 1)[None, :]
    big_j = batch.src_len[:, None]
    if k is None:
        return np.broadcast_to(big_j, (len(batch), ti))
    return np.minimum(k + i - 1, big_j)


def _valid(batch):
    return np.arange(batch.tgt_in.shape[1])[None, :] < batch.tgt_len[:, None]


def ce_batch_loss(model, batch, k=None):
    """Prefix cross-entropy averaged over the sentences of ``batch``; ``k=None`` is offline."""
    logits = model.schedule_logits(batch, _schedule_matrix(batch, k))
    weights = _valid(batch) / len(batch)
    loss, probs, clamped = weighted_nll(logits, batch.tgt_out, weights)
    correct = (logits.values.argmax(-1) == batch.tgt_out) & _valid(batch)
    return loss, {"clamped": clamped, "correct": int(correct.sum()), "tokens": int(_valid(batch).sum())}


def ce_prefix_loss(model, pair, schedule):
    """``-sum_i log P(y_i | x_{<=g_i}, y_{<i})`` for one pair."""
    batch = collate([pair])
    g = np.array([schedule.prefixes()])
    if g.shape[1] != batch.tgt_in.shape[1] or schedule.source_len != batch.src_len[0]:
        raise ValueError("schedule lengths do not match the pair")
    logits = model.schedule_logits(batch, g)
    loss, _, clamped = weighted_nll(logits, batch.tgt_out, np.ones(g.shape))
    if clamped:
        log.warning("ce_prefix_loss: %d probabilities clamped at %g", clamped, PROB_FLOOR)
    return loss


@dataclass
class WeightedLossBreakdown:
    rows: list
    distance: np.ndarray
    diagonal: np.ndarray
    alpha: np.ndarray
    cost: np.ndarray
    probs: np.ndarray
    score: float
    beta: float
    batch_mean: float
    batch_std: float
    loss: float = float("nan")


def confidence_weights(probs_by_sentence, rows_by_sentence, lengths, wcfg, extra_scores=()):
    """Token weights, reorder scores and sentence weights from detached probabilities.

    ``probs_by_sentence[b]`` is the |S_b| x I_b ground-truth probability
    matrix for the sampled prefix rows ``rows_by_sentence[b]``; ``lengths``
    holds (I_b, J_b). ``extra_scores`` are reorder scores of batch members
    not present here; they enter the batch mean and std.
    """
    parts = []
    for probs, rows, (big_i, big_j) in zip(probs_by_sentence, rows_by_sentence, lengths):
        i, j = cell_grid(rows, big_i, big_j)
        d = diagonal_distance(i, big_i, j, big_j)
        diag = diagonal_regularizer(d, wcfg.lam) if wcfg.use_diagonal else np.ones_like(d)
        alpha = token_weight(probs, diag, wcfg.gamma)
        cost = reorder_cost(i, big_i, j, big_j)
        parts.append((rows, d, diag, alpha, cost, probs, float((probs * cost).sum())))
    scores = [p[-1] for p in parts] + list(extra_scores)
    mu, sigma = batch_statistics(scores)
    out = []
    for rows, d, diag, alpha, cost, probs, score in parts:
        beta = sentence_weight(score, scores, wcfg.eps) if wcfg.use_sentence_weight else 1.0
        out.append(WeightedLossBreakdown(list(rows), d, diag, alpha, cost, probs, score, beta, mu, sigma))
    return out


def _target_probs(logits, targets):
    x = logits.values.astype(np.float64)
    m = x.max(-1, keepdims=True)
    log_z = np.log(np.exp(x - m).sum(-1)) + m[..., 0]
    return np.exp(np.take_along_axis(x, targets[..., None], -1)[..., 0] - log_z)


@dataclass
class StreamLoss:
    loss: object
    breakdowns: list
    cell_weights: np.ndarray
    prefixes: list
    clamped: int


def cbsimt_batch_loss(model, batch, wcfg, prefixes, cell_weights=None, extra_scores=()):
    """Confidence-weighted multi-prefix loss averaged over the batch.

    Per sentence: ``-beta / |S| * sum_i sum_{j in S} alpha_ji log p_ji``.
    Passing ``cell_weights`` from a previous call reuses those (frozen)
    weights, which is how finite-difference checks hold alpha/beta fixed.
    """
    logits, row_b, row_j = model.stream_logits(batch, prefixes)
    targets = batch.tgt_out[row_b]
    ti = targets.shape[1]
    breakdowns = []
    if cell_weights is None:
        probs = _target_probs(logits, targets)
        probs_by, rows_by, lengths, slices = [], [], [], []
        start = 0
        for b, js in enumerate(prefixes):
            big_i = int(batch.tgt_len[b])
            probs_by.append(probs[start : start + len(js), :big_i])
            rows_by.append(js)
            lengths.append((big_i, int(batch.src_len[b])))
            slices.append(slice(start, start + len(js)))
            start += len(js)
        breakdowns = confidence_weights(probs_by, rows_by, lengths, wcfg, extra_scores)
        cell_weights = np.zeros((len(row_b), ti))
        for b, (bd, sl) in enumerate(zip(breakdowns, slices)):
            big_i = lengths[b][0]
            cell_weights[sl, :big_i] = bd.beta * bd.alpha / len(bd.rows) / len(batch)
            with np.errstate(divide="ignore"):
                logp = np.log(np.maximum(bd.probs, PROB_FLOOR))
            bd.loss = float(-bd.beta / len(bd.rows) * (bd.alpha * logp).sum())
    loss, _, clamped = weighted_nll(logits, targets, cell_weights)
    return StreamLoss(loss, breakdowns, cell_weights, prefixes, clamped)


def cbsimt_loss(model, pair, wcfg=WeightConfig(), batch_scores=None, prefixes=None, cap=10, seed=0):
    """Single-pair weighted loss.

    ``batch_scores`` supplies the other sentences' reorder scores for the
    sentence weight; without it the batch is this pair alone and beta is 1.
    """
    batch = collate([pair])
    rows = prefixes if prefixes is not None else sample_prefixes(int(batch.src_len[0]), cap, seed)
    out = cbsimt_batch_loss(model, batch, wcfg, [rows], extra_scores=batch_scores or ())
    return out.loss, out.breakdowns[0]


@dataclass
class TrainPlan:
    phase: str = "pretrain-offline"
    lr: float = PRETRAIN_LR
    steps: int = 1000
    batch_size: int = 32
    prefix_cap: int = 10
    seed: int = 0
    k: int = 5
    log_every: int = 50
    warmup: int = 0
    weights: WeightConfig = field(default_factory=WeightConfig)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.prefix_cap < 1:
            raise ValueError("prefix_cap must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")


@dataclass
class TrainResult:
    model: object
    adam: AdamState
    curve: list  # (step, loss)
    clamped: int = 0


LOG_FIELDS = ("step", "phase", "loss", "mean_beta", "mean_alpha", "wall_time")


def _step_loss(model, plan, batch, step):
    if plan.phase == "pretrain-offline":
        loss, stats = ce_batch_loss(model, batch, None)
        return loss, stats["clamped"], 1.0, 1.0
    if plan.phase == "train-waitk":
        loss, stats = ce_batch_loss(model, batch, plan.k)
        return loss, stats["clamped"], 1.0, 1.0
    prefixes = [
        sample_prefixes(int(j), plan.prefix_cap, [plan.seed, step, idx]) for j, idx in zip(batch.src_len, batch.indices)
    ]
    out = cbsimt_batch_loss(model, batch, plan.weights, prefixes)
    mean_beta = float(np.mean([bd.beta for bd in out.breakdowns]))
    mean_alpha = float(np.mean(np.concatenate([bd.alpha.ravel() for bd in out.breakdowns])))
    return out.loss, out.clamped, mean_beta, mean_alpha


def run_training(plan, corpus, model, log_path=None, checkpoint_path=None, adam=None, progress=None):
    """Run ``plan.steps`` optimisation steps; deterministic given (plan, corpus, model)."""
    if not corpus:
        raise TrainingError("empty training corpus")
    adam = adam or AdamState(lr=plan.lr, warmup=plan.warmup)
    steps_per_epoch = math.ceil(len(corpus) / plan.batch_size)
    curve, clamped_total = [], 0
    log_fh = None
    if log_path is not None:
        new = not os.path.exists(log_path)
        log_fh = open(log_path, "a", encoding="utf-8")
        if new:
            log_fh.write("\t".join(LOG_FIELDS) + "\n")
    started = time.perf_counter()
    batches = None
    try:
        for step in range(plan.steps):
            epoch, pos = divmod(step, steps_per_epoch)
            if pos == 0:
                batches = make_batches(corpus, plan.batch_size, seed=[plan.seed, epoch])
            batch = batches[pos]
            loss, clamped, mean_beta, mean_alpha = _step_loss(model, plan, batch, step)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at step {step} ({plan.phase}); batch sentence indices {batch.indices}"
                )
            clamped_total += clamped
            loss.backward()
            adam_step(model.params, adam)
            curve.append((step + 1, value))
            if log_fh is not None and ((step + 1) % plan.log_every == 0 or step + 1 == plan.steps):
                log_fh.write(
                    f"{step + 1}\t{plan.phase}\t{value:.6f}\t{mean_beta:.6f}\t{mean_alpha:.6f}\t"
                    f"{time.perf_counter() - started:.3f}\n"
                )
                log_fh.flush()
            if progress is not None:
                progress(step + 1, value)
            if checkpoint_path is not None and pos == steps_per_epoch - 1:
                save_checkpoint(checkpoint_path, model, adam, {"phase": plan.phase, "step": step + 1, "seed": plan.seed})
    finally:
        if log_fh is not None:
            log_fh.close()
    if clamped_total:
        log.warning("%s: %d probabilities clamped at %g", plan.phase, clamped_total, PROB_FLOOR)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, adam, {"phase": plan.phase, "step": plan.steps, "seed": plan.seed})
    return TrainResult(model, adam, curve, clamped_total)


def teacher_forced_accuracy(model, corpus, batch_size=256):
    """Fraction of target tokens (EOS included) whose argmax under full-source teacher forcing is correct."""
    correct = total = 0
    with no_grad():
        for start in range(0, len(corpus), batch_size):
            batch = collate(corpus[start : start + batch_size])
            _, stats = ce_batch_loss(model, batch, None)
            correct += stats["correct"]
            total += stats["tokens"]
    return correct / total
