"""Encoder-decoder transformer with a causal (unidirectional) encoder.

Because the encoder is causal, one pass over the full source yields the
hidden sequence of every source prefix by truncation; the decoder then
conditions on any prefix by masking cross-attention keys beyond it.
"""
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import BOS, EOS
from .core import (
    ParameterSet,
    Tensor,
    add,
    embedding,
    get_dtype,
    layer_norm,
    linear_forward,
    multi_head_attention,
    mul_scalar,
    no_grad,
    relu,
    take_rows,
)
from .core.ops import probabilities
from .core.optim import AdamState

CHECKPOINT_MAGIC = b"SIMTLAB1"


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int = 20
    tgt_vocab: int = 20
    dim: int = 64
    ff_dim: int = 128
    heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    max_len: int = 64
    seed: int = 0

    def validate(self):
        for name in ("src_vocab", "tgt_vocab", "dim", "ff_dim", "heads", "encoder_layers", "decoder_layers", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")


def sinusoidal_positions(length, dim):
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _shapes(cfg):
    d, f = cfg.dim, cfg.ff_dim
    shapes = {"src_embed": (cfg.src_vocab, d), "tgt_embed": (cfg.tgt_vocab, d)}

    def attn(prefix):
        for proj in ("q", "k", "v", "o"):
            shapes[f"{prefix}.{proj}.weight"] = (d, d)
            shapes[f"{prefix}.{proj}.bias"] = (d,)

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.shift"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.in.weight"] = (d, f)
        shapes[f"{prefix}.in.bias"] = (f,)
        shapes[f"{prefix}.out.weight"] = (f, d)
        shapes[f"{prefix}.out.bias"] = (d,)

    for n in range(cfg.encoder_layers):
        p = f"encoder.layer{n}"
        attn(f"{p}.self_attn"), norm(f"{p}.norm1"), ffn(f"{p}.ffn"), norm(f"{p}.norm2")
    norm("encoder.final_norm")
    for n in range(cfg.decoder_layers):
        p = f"decoder.layer{n}"
        attn(f"{p}.self_attn"), norm(f"{p}.norm1"), attn(f"{p}.cross_attn"), norm(f"{p}.norm2")
        ffn(f"{p}.ffn"), norm(f"{p}.norm3")
    norm("decoder.final_norm")
    shapes["output.weight"] = (d, cfg.tgt_vocab)
    shapes["output.bias"] = (cfg.tgt_vocab,)
    return shapes


def init_parameters(cfg, dtype=None):
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) for matrices; zero biases, unit gains."""
    dtype = dtype or get_dtype()
    rng = np.random.default_rng(cfg.seed)
    params = ParameterSet()
    for path, shape in sorted(_shapes(cfg).items()):
        if len(shape) == 2:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-a, a, size=shape)
        elif path.endswith(".gain"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[path] = Tensor(value, dtype=dtype)
    return params


@dataclass
class ConfidenceMatrix:
    """Ground-truth token probabilities per source prefix length.

    ``values[r, i-1]`` is the probability of target token ``i`` after
    reading ``rows[r]`` source tokens.
    """

    rows: list
    values: np.ndarray
    source_len: int
    target_len: int

    def row(self, j):
        return self.values[self.rows.index(j)]

    def display_mask(self, threshold=1e-3):
        return self.values > threshold

    def render(self, threshold=1e-3):
        lines = [f"j\\i {' '.join(f'{i:>2d}' for i in range(1, self.target_len + 1))}"]
        for j, mark in zip(self.rows, self.display_mask(threshold)):
            lines.append(f"{j:>3d} " + " ".join(" #" if m else " ." for m in mark))
        return "\n".join(lines)


class Transformer:
    def __init__(self, config, params=None, dtype=None):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_parameters(config, dtype)
        self._pos = {}

    @property
    def dtype(self):
        return self.params["output.bias"].dtype

    def _positions(self, length):
        key = (length, self.dtype)
        if key not in self._pos:
            if length > self.config.max_len:
                raise ValueError(f"sequence length {length} exceeds max_len {self.config.max_len}")
            self._pos[key] = Tensor(sinusoidal_positions(length, self.config.dim), dtype=self.dtype)
        return self._pos[key]

    def _embed(self, table, ids):
        x = embedding(self.params[table], ids)
        return add(mul_scalar(x, math.sqrt(self.config.dim)), self._positions(ids.shape[1]))

    def _attention(self, prefix, x, memory, mask):
        p = self.params
        q = linear_forward(x, p[f"{prefix}.q.weight"], p[f"{prefix}.q.bias"])
        k = linear_forward(memory, p[f"{prefix}.k.weight"], p[f"{prefix}.k.bias"])
        v = linear_forward(memory, p[f"{prefix}.v.weight"], p[f"{prefix}.v.bias"])
        out = multi_head_attention(q, k, v, mask, self.config.heads)
        return linear_forward(out, p[f"{prefix}.o.weight"], p[f"{prefix}.o.bias"])

    def _norm(self, prefix, x):
        return layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.shift"])

    def _ffn(self, prefix, x):
        p = self.params
        h = relu(linear_forward(x, p[f"{prefix}.in.weight"], p[f"{prefix}.in.bias"]))
        return linear_forward(h, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])

    def encode(self, src, src_len=None):
        """Causal encoder over padded ids [B, T] -> Tensor [B, T, D]."""
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        b, t = src.shape
        if t < 1:
            raise ValueError("cannot encode an empty source")
        src_len = np.full(b, t) if src_len is None else np.asarray(src_len)
        keys_valid = np.arange(t)[None, :] < src_len[:, None]
        mask = np.tril(np.ones((t, t), dtype=bool))[None] & keys_valid[:, None, :]
        x = self._embed("src_embed", src)
        for n in range(self.config.encoder_layers):
            p = f"encoder.layer{n}"
            h = self._norm(f"{p}.norm1", x)
            x = add(x, self._attention(f"{p}.self_attn", h, h, mask))
            x = add(x, self._ffn(f"{p}.ffn", self._norm(f"{p}.norm2", x)))
        return self._norm("encoder.final_norm", x)

    def decode(self, tgt_in, memory, cross_mask, tgt_len=None):
        """Decoder logits [B, Ti, V] for inputs [B, Ti] over ``memory`` [B, Tk, D].

        ``cross_mask`` (broadcastable to [B, Ti, Tk]) selects the source
        positions each target position may attend to.
        """
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        b, t = tgt_in.shape
        tgt_len = np.full(b, t) if tgt_len is None else np.asarray(tgt_len)
        keys_valid = np.arange(t)[None, :] < tgt_len[:, None]
        self_mask = np.tril(np.ones((t, t), dtype=bool))[None] & keys_valid[:, None, :]
        x = self._embed("tgt_embed", tgt_in)
        for n in range(self.config.decoder_layers):
            p = f"decoder.layer{n}"
            h = self._norm(f"{p}.norm1", x)
            x = add(x, self._attention(f"{p}.self_attn", h, h, self_mask))
            x = add(x, self._attention(f"{p}.cross_attn", self._norm(f"{p}.norm2", x), memory, cross_mask))
            x = add(x, self._ffn(f"{p}.ffn", self._norm(f"{p}.norm3", x)))
        x = self._norm("decoder.final_norm", x)
        return linear_forward(x, self.params["output.weight"], self.params["output.bias"])

    def schedule_logits(self, batch, prefix_len):
        """Logits where target position i sees the first ``prefix_len[b, i]`` source tokens."""
        enc = self.encode(batch.src, batch.src_len)
        tk = batch.src.shape[1]
        cross = np.arange(tk)[None, None, :] < np.asarray(prefix_len)[:, :, None]
        return self.decode(batch.tgt_in, enc, cross, batch.tgt_len)

    def stream_logits(self, batch, prefixes):
        """Logits for every (sentence, sampled prefix length) row.

        Returns ``(logits [N, Ti, V], row_sentence, row_prefix)``.
        """
        enc = self.encode(batch.src, batch.src_len)
        row_b = np.concatenate([np.full(len(js), b) for b, js in enumerate(prefixes)]).astype(np.int64)
        row_j = np.concatenate([np.asarray(js) for js in prefixes]).astype(np.int64)
        memory = take_rows(enc, row_b)
        tk = batch.src.shape[1]
        cross = np.arange(tk)[None, None, :] < row_j[:, None, None]
        logits = self.decode(batch.tgt_in[row_b], memory, cross, batch.tgt_len[row_b])
        return logits, row_b, row_j

    # --- streaming / inspection API (no autograd) ---

    def encode_full(self, source_ids):
        """Hidden stream: entry j-1 holds the j x D hidden sequence of prefix x_{<=j}."""
        source_ids = list(source_ids)
        if not source_ids:
            raise ValueError("encode_full needs a nonempty source")
        with no_grad():
            h = self.encode(np.asarray([source_ids])).values[0]
        return [h[:j] for j in range(1, len(source_ids) + 1)]

    def encode_source(self, source_prefix):
        source_prefix = list(source_prefix)
        if not source_prefix:
            raise ValueError("cannot encode an empty source prefix")
        with no_grad():
            return self.encode(np.asarray([source_prefix])).values[0]

    def predict(self, memory, target_prefix):
        """Greedy next token and its probability given encoder rows ``memory`` [j, D]."""
        dist = self.decode_distribution(target_prefix, memory)
        y = int(np.argmax(dist))
        return y, float(dist[y])

    def decode_distribution(self, target_prefix, hidden):
        target_prefix = list(target_prefix)
        hidden = np.asarray(hidden)
        if hidden.ndim != 2 or hidden.shape[0] == 0:
            raise ValueError("decode_distribution needs a nonempty hidden sequence H_j")
        if not target_prefix or target_prefix[0] != BOS:
            raise ValueError("target prefix must start with BOS")
        with no_grad():
            memory = Tensor(hidden[None], dtype=self.dtype)
            logits = self.decode(np.asarray([target_prefix]), memory, np.ones((1, 1, hidden.shape[0]), dtype=bool))
        return probabilities(logits.values[0, -1].astype(np.float64))

    def zero_output_layer(self):
        self.params["output.weight"].values[...] = 0
        self.params["output.bias"].values[...] = 0


def _pair_arrays(pair):
    src = list(pair.source) + [EOS]
    tgt_in = [BOS] + list(pair.target)
    tgt_out = list(pair.target) + [EOS]
    return src, tgt_in, tgt_out


def probability_stream(model, pair, prefix_set):
    """Teacher-forced probability of each ground-truth target token per prefix length.

    The source stream is ``pair.source + [EOS]`` (length J) and the target
    ``pair.target + [EOS]`` (length I).
    """
    src, tgt_in, tgt_out = _pair_arrays(pair)
    big_j = len(src)
    rows = list(prefix_set)
    if not rows:
        raise ValueError("prefix_set must be nonempty")
    if rows != sorted(rows) or rows[0] < 1 or rows[-1] > big_j:
        raise ValueError(f"prefix_set must be sorted values in 1..{big_j}, got {rows}")
    with no_grad():
        enc = model.encode(np.asarray([src]))
        row_b = np.zeros(len(rows), dtype=np.int64)
        memory = take_rows(enc, row_b)
        cross = np.arange(big_j)[None, None, :] < np.asarray(rows)[:, None, None]
        logits = model.decode(np.tile(tgt_in, (len(rows), 1)), memory, cross)
    probs = probabilities(logits.values.astype(np.float64))
    picked = np.take_along_axis(probs, np.tile(tgt_out, (len(rows), 1))[..., None], axis=-1)[..., 0]
    return ConfidenceMatrix(rows, picked, big_j, len(tgt_out))


def forced_confidence_matrix(model, pair):
    return probability_stream(model, pair, list(range(1, len(pair.source) + 2)))


# --- checkpoints ---


def save_checkpoint(path, model, adam=None, meta=None):
    """Write ``SIMTLAB1`` + manifest length + JSON manifest + little-endian float32 data."""
    arrays = [(p, t.values) for p, t in model.params.items()]
    adam_info = None
    if adam is not None:
        adam_info = {k: getattr(adam, k) for k in ("lr", "beta1", "beta2", "eps", "step", "warmup")}
        arrays += [(f"adam.m/{p}", adam.m[p]) for p in sorted(adam.m)]
        arrays += [(f"adam.v/{p}", adam.v[p]) for p in sorted(adam.v)]
    entries, blobs, offset = [], [], 0
    for p, a in arrays:
        blob = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"path": p, "shape": list(a.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"config": asdict(model.config), "entries": entries, "adam": adam_info, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Return ``(model, adam_state_or_None, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a SIMTLAB1 checkpoint")
    (length,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16 : 16 + length].decode("utf-8"))
    base = 16 + length
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["path"]] = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(e["shape"]).astype(
            np.float32
        )
    config = ModelConfig(**manifest["config"])
    params = ParameterSet({p: Tensor(a, dtype=np.float32) for p, a in arrays.items() if not p.startswith("adam.")})
    model = Transformer(config, params)
    expected = set(_shapes(config))
    if set(params) != expected:
        raise CheckpointError(f"{path}: parameter set does not match config")
    adam = None
    if manifest["adam"] is not None:
        adam = AdamState(**manifest["adam"])
        adam.m = {p[len("adam.m/"):]: a.copy() for p, a in arrays.items() if p.startswith("adam.m/")}
        adam.v = {p[len("adam.v/"):]: a.copy() for p, a in arrays.items() if p.startswith("adam.v/")}
    return model, adam, manifest["meta"]
