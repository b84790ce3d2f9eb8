"""Transformer encoder-decoder with a single-vector bottleneck.

The encoder's token states are pooled into one sentence embedding; the
decoder's cross-attention sees only that vector (a memory of length one).
Parameters live in a flat ``dict[str, Tensor]``; every parameter of the
encoder side is prefixed ``enc.`` and of the decoder side ``dec.``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, PAD

NEG_INF = -1e9


class ModelError(ValueError):
    pass


class PoolingMode(str, Enum):
    MEAN = "mean"
    MAX = "max"
    EOS = "eos"


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    max_len: int = 16
    pooling: PoolingMode = PoolingMode.MEAN
    dropout: float = 0.0
    init_seed: int = 0

    def __post_init__(self):
        self.pooling = PoolingMode(self.pooling)
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_len < 3:
            raise ModelError("max_len must leave room for BOS, one token and EOS")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pooling"] = self.pooling.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SentenceEmbedding:
    vector: np.ndarray
    source_tag: str

    def __post_init__(self):
        if self.vector.ndim != 1 or not np.isfinite(self.vector).all():
            raise ModelError("sentence embedding must be a finite 1-d vector")


@dataclass
class EncoderOutput:
    states: Tensor  # [B, T, d]
    mask: np.ndarray  # [B, T] bool, True on real tokens


# ---------------------------------------------------------------- init


def _normal(rng, shape, std):
    return (rng.standard_normal(shape) * std).astype(np.float32)


def _linear_params(p, rng, name, fan_in, fan_out, std=None):
    std = 1.0 / math.sqrt(fan_in) if std is None else std
    p[f"{name}.w"] = _normal(rng, (fan_in, fan_out), std)
    p[f"{name}.b"] = np.zeros(fan_out, np.float32)


def _ln_params(p, name, d):
    p[f"{name}.g"] = np.ones(d, np.float32)
    p[f"{name}.b"] = np.zeros(d, np.float32)


def init_attention(p, rng, name, d, depth_scale):
    for proj in ("q", "k", "v"):
        _linear_params(p, rng, f"{name}.{proj}", d, d)
    _linear_params(p, rng, f"{name}.o", d, d, std=depth_scale / math.sqrt(d))


def init_block(p, rng, name, d, ffn, n_layers, cross: bool):
    scale = 1.0 / math.sqrt(2 * n_layers)
    _ln_params(p, f"{name}.ln1", d)
    init_attention(p, rng, f"{name}.self", d, scale)
    if cross:
        _ln_params(p, f"{name}.ln_x", d)
        init_attention(p, rng, f"{name}.cross", d, scale)
    _ln_params(p, f"{name}.ln2", d)
    _linear_params(p, rng, f"{name}.ff1", d, ffn)
    _linear_params(p, rng, f"{name}.ff2", ffn, d, std=scale / math.sqrt(ffn))


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.init_seed)
    d = cfg.d_model
    p: dict[str, np.ndarray] = {}
    p["enc.embed"] = _normal(rng, (cfg.vocab_size, d), 0.02)
    p["enc.pos"] = _normal(rng, (cfg.max_len, d), 0.02)
    for i in range(cfg.n_enc_layers):
        init_block(p, rng, f"enc.layers.{i}", d, cfg.ffn_dim, cfg.n_enc_layers, cross=False)
    p["dec.embed"] = _normal(rng, (cfg.vocab_size, d), 0.02)
    p["dec.pos"] = _normal(rng, (cfg.max_len, d), 0.02)
    for i in range(cfg.n_dec_layers):
        init_block(p, rng, f"dec.layers.{i}", d, cfg.ffn_dim, cfg.n_dec_layers, cross=True)
    _ln_params(p, "dec.ln_f", d)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


# ---------------------------------------------------------------- blocks


def linear(p, name, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def ln(p, name, x: Tensor) -> Tensor:
    return ad.layernorm(x, p[f"{name}.g"], p[f"{name}.b"])


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def attention(p, name, xq: Tensor, xkv: Tensor, n_heads: int, mask_add=None, trace=None) -> Tensor:
    """Multi-head attention of ``xq`` [B, Tq, d] over ``xkv`` [B, Tk, d].

    ``mask_add`` is an additive float mask broadcastable to [B, H, Tq, Tk].
    """
    b, tq, d = xq.shape
    dh = d // n_heads
    q = _heads(ad.scale(linear(p, f"{name}.q", xq), 1.0 / math.sqrt(dh)), n_heads)
    k = _heads(linear(p, f"{name}.k", xkv), n_heads)
    v = _heads(linear(p, f"{name}.v", xkv), n_heads)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    if mask_add is not None:
        scores = ad.add(scores, Tensor(mask_add))
    w = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace[name] = w.data
    ctx = ad.matmul(w, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    if trace is not None:
        trace[f"{name}.context"] = ctx.data
    return linear(p, f"{name}.o", ctx)


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


def encoder_block(p, name, x, n_heads, mask_add, dropout=0.0, rng=None) -> Tensor:
    h = ln(p, f"{name}.ln1", x)
    x = ad.add(x, _dropout(attention(p, f"{name}.self", h, h, n_heads, mask_add), dropout, rng))
    h = ln(p, f"{name}.ln2", x)
    f = linear(p, f"{name}.ff2", ad.gelu(linear(p, f"{name}.ff1", h)))
    return ad.add(x, _dropout(f, dropout, rng))


def decoder_block(p, name, x, memory, n_heads, self_mask, mem_mask=None, dropout=0.0, rng=None, trace=None) -> Tensor:
    h = ln(p, f"{name}.ln1", x)
    x = ad.add(x, _dropout(attention(p, f"{name}.self", h, h, n_heads, self_mask), dropout, rng))
    h = ln(p, f"{name}.ln_x", x)
    x = ad.add(
        x, _dropout(attention(p, f"{name}.cross", h, memory, n_heads, mem_mask, trace), dropout, rng)
    )
    h = ln(p, f"{name}.ln2", x)
    f = linear(p, f"{name}.ff2", ad.gelu(linear(p, f"{name}.ff1", h)))
    return ad.add(x, _dropout(f, dropout, rng))


def key_mask(mask: np.ndarray) -> np.ndarray:
    """[B, T] validity -> additive [B, 1, 1, T] mask."""
    return np.where(mask, 0.0, NEG_INF).astype(np.float32)[:, None, None, :]


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF, np.float32), k=1)[None, None]


def pool(states: Tensor, mask: np.ndarray, mode: PoolingMode) -> Tensor:
    """Reduce [B, T, d] states to [B, d] using only positions where ``mask``."""
    b, t, d = states.shape
    if mode == PoolingMode.MEAN:
        m = mask.astype(states.dtype)[:, :, None]
        inv = (1.0 / mask.sum(axis=1)).astype(states.dtype)[:, None]
        return ad.mul(ad.sum(ad.mul(states, Tensor(m)), axis=1), Tensor(inv))
    if mode == PoolingMode.MAX:
        neg = np.where(mask, 0.0, NEG_INF).astype(states.dtype)[:, :, None]
        return ad.max(ad.add(states, Tensor(neg)), axis=1)
    if mode == PoolingMode.EOS:
        last = mask.sum(axis=1) - 1
        return ad.select(states, (np.arange(b), last))
    raise ModelError(f"unknown pooling {mode}")


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def params_fingerprint(params: dict[str, Tensor], prefix: str = "") -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        if not name.startswith(prefix):
            continue
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- model


class BottleneckModel:
    """Encoder, pooling, and a decoder conditioned on one sentence vector."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        self._dropout_rng = None

    # parameter groups ------------------------------------------------
    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("enc.")}

    def decoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("dec.")}

    def freeze_encoder(self, frozen: bool = True) -> None:
        for t in self.encoder_params().values():
            t.requires_grad = not frozen

    def encoder_fingerprint(self) -> str:
        return params_fingerprint(self.params, "enc.")

    def set_dropout_rng(self, rng) -> None:
        self._dropout_rng = rng

    # encoder ---------------------------------------------------------
    def source_ids(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        for s in seqs:
            if len(s) == 0:
                raise ModelError("cannot encode an empty sentence")
            if len(s) + 2 > self.config.max_len:
                raise ModelError(f"sentence of length {len(s)} exceeds max_len {self.config.max_len}")
        return pad_batch([[BOS, *s, EOS] for s in seqs])

    def encode_states(self, ids: np.ndarray) -> EncoderOutput:
        cfg, p = self.config, self.params
        b, t = ids.shape
        if t > cfg.max_len:
            raise ModelError(f"input length {t} exceeds max_len {cfg.max_len}")
        mask = ids != PAD
        x = ad.add(ad.embedding_gather(p["enc.embed"], ids), ad.embedding_gather(p["enc.pos"], np.arange(t)))
        mask_add = key_mask(mask)
        rng = self._dropout_rng
        for i in range(cfg.n_enc_layers):
            x = encoder_block(p, f"enc.layers.{i}", x, cfg.n_heads, mask_add, cfg.dropout, rng)
        return EncoderOutput(ad.layernorm(x), mask)

    def encode_ids(self, ids: np.ndarray) -> Tensor:
        out = self.encode_states(ids)
        return pool(out.states, out.mask, self.config.pooling)

    def encode(self, seqs: Sequence[Sequence[int]]) -> Tensor:
        """Sentence embeddings [B, d] of content sequences."""
        return self.encode_ids(self.source_ids(seqs))

    def encode_text(self, tokens: Sequence[int], lang=None) -> SentenceEmbedding:
        if lang is not None and not lang.owns(tokens):
            raise ModelError(f"tokens are not a sentence of {lang.lang_id}")
        vec = self.encode([tokens]).data[0].copy()
        tag = f"text:{lang.lang_id}" if lang is not None else "text"
        return SentenceEmbedding(vec, tag)

    def embed(self, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
        """Embeddings as a float32 array, computed without recording."""
        out = [self.encode(seqs[i : i + batch_size]).data for i in range(0, len(seqs), batch_size)]
        return np.concatenate(out, axis=0)

    # decoder ---------------------------------------------------------
    def decoder_logits(self, memory: Tensor, dec_in: np.ndarray, trace=None) -> Tensor:
        """Next-token logits [B, T, V] given embeddings [B, d] and decoder inputs."""
        cfg, p = self.config, self.params
        b, t = dec_in.shape
        if t > cfg.max_len:
            raise ModelError(f"decoder prefix length {t} exceeds max_len {cfg.max_len}")
        if memory.shape != (b, cfg.d_model):
            raise ModelError(f"memory shape {memory.shape} != ({b}, {cfg.d_model})")
        x = ad.add(ad.embedding_gather(p["dec.embed"], dec_in), ad.embedding_gather(p["dec.pos"], np.arange(t)))
        mem = ad.reshape(memory, (b, 1, cfg.d_model))
        self_mask = causal_mask(t)
        rng = self._dropout_rng
        for i in range(cfg.n_dec_layers):
            x = decoder_block(
                p, f"dec.layers.{i}", x, mem, cfg.n_heads, self_mask, None, cfg.dropout, rng, trace
            )
        h = ln(p, "dec.ln_f", x)
        return ad.matmul(h, ad.transpose(p["dec.embed"], (1, 0)))

    def decode_step(self, embedding, prefix: Sequence[int], lang_token: int | None = None, trace=None) -> np.ndarray:
        """Logits over the vocabulary for the token following ``prefix``."""
        if not prefix:
            raise ModelError("prefix must start with a target-language token")
        if lang_token is not None and prefix[0] != lang_token:
            raise ModelError("prefix does not begin with the target-language token")
        vec = embedding.vector if isinstance(embedding, SentenceEmbedding) else np.asarray(embedding)
        mem = Tensor(vec.reshape(1, -1).astype(np.float32))
        logits = self.decoder_logits(mem, np.asarray([prefix], dtype=np.int64), trace)
        return logits.data[0, -1]

    def decode_greedy(self, memory, lang_tokens, max_len: int | None = None, batch_size: int = 512):
        """Greedy decoding of each embedding into its target language.

        Returns ``(sequences, truncated)`` where ``sequences`` are content
        tokens without EOS and ``truncated[i]`` flags rows that hit
        ``max_len`` without emitting EOS. Ties go to the lowest token id.
        """
        mem = np.asarray(memory, dtype=np.float32)
        if mem.ndim == 1:
            mem = mem[None]
        n = mem.shape[0]
        langs = np.broadcast_to(np.asarray(lang_tokens, dtype=np.int64), (n,))
        limit = min(max_len or self.config.max_len, self.config.max_len)
        seqs, trunc = [], []
        for s in range(0, n, batch_size):
            a, b = self._greedy_chunk(mem[s : s + batch_size], langs[s : s + batch_size], limit)
            seqs.extend(a)
            trunc.extend(b)
        return seqs, trunc

    def _greedy_chunk(self, mem, langs, limit):
        b = mem.shape[0]
        prefix = langs.reshape(b, 1).copy()
        done = np.zeros(b, dtype=bool)
        memory = Tensor(mem)
        while prefix.shape[1] < limit and not done.all():
            logits = self.decoder_logits(memory, prefix).data[:, -1]
            nxt = np.argmax(logits, axis=-1)
            nxt = np.where(done, PAD, nxt)
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            done |= nxt == EOS
        seqs, trunc = [], []
        for row in prefix[:, 1:]:
            row = row.tolist()
            if EOS in row:
                seqs.append(row[: row.index(EOS)])
                trunc.append(False)
            else:
                seqs.append([t for t in row if t != PAD])
                trunc.append(True)
        return seqs, trunc

    # losses ----------------------------------------------------------
    def teacher_forced_loss(self, memory: Tensor, tgt: Sequence[Sequence[int]], lang_tokens) -> Tensor:
        """Mean token cross-entropy of decoding ``memory`` into ``tgt``."""
        langs = np.broadcast_to(np.asarray(lang_tokens, dtype=np.int64), (len(tgt),))
        for s in tgt:
            if len(s) + 1 > self.config.max_len:
                raise ModelError(f"target of length {len(s)} exceeds max_len {self.config.max_len}")
        dec_in = pad_batch([[int(l), *s] for l, s in zip(langs, tgt)])
        labels = pad_batch([[*s, EOS] for s in tgt])
        logits = self.decoder_logits(memory, dec_in)
        b, t, v = logits.shape
        return ad.cross_entropy(ad.reshape(logits, (b * t, v)), labels.reshape(-1), ignore_id=PAD)

    def forward_teacher_forced(self, src, tgt, tgt_lang_tokens) -> Tensor:
        """Encode ``src``, decode into ``tgt``; scalar mean cross-entropy."""
        return self.teacher_forced_loss(self.encode(src), tgt, tgt_lang_tokens)
