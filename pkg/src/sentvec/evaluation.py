"""Similarity-search error rates, decoding metrics and embedding diagnostics."""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class EvalError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    matrix: np.ndarray  # [n, d]
    row_ids: np.ndarray  # [n] corpus row ids
    source_tag: str = ""
    fingerprint: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        if self.matrix.ndim != 2:
            raise EvalError("embedding matrix must be 2-d")
        if len(self.row_ids) != len(self.matrix):
            raise EvalError("row ids do not match matrix rows")
        if not np.isfinite(self.matrix).all():
            raise EvalError("embedding set contains non-finite values")

    def __len__(self) -> int:
        return len(self.matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class XsimReport:
    error_rate: float
    n: int
    nearest: np.ndarray  # per source row: index into the candidate pool
    margin_mean: float  # mean (top-1 - top-2) similarity
    margin_min: float
    errors: int = 0

    def to_dict(self) -> dict:
        return {
            "error_rate": self.error_rate,
            "errors": self.errors,
            "n": self.n,
            "margin_mean": self.margin_mean,
            "margin_min": self.margin_min,
        }


@dataclass
class DecodeReport:
    token_accuracy: float
    exact_match: float
    bleu: float
    n: int
    precisions: list[float] = field(default_factory=list)
    brevity_penalty: float = 1.0

    def to_dict(self) -> dict:
        return {
            "token_accuracy": self.token_accuracy,
            "exact_match": self.exact_match,
            "bleu": self.bleu,
            "n": self.n,
            "brevity_penalty": self.brevity_penalty,
        }


# ---------------------------------------------------------------- cosine


def _unit_rows(m: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise EvalError(f"{what}: zero-norm row {int(zero[0])}")
    return m / norms[:, None]


def cosine_matrix(a, b, block_size: int = 256) -> np.ndarray:
    """Cosine similarities [n, m], computed ``block_size`` source rows at a time."""
    am = a.matrix if isinstance(a, EmbeddingSet) else a
    bm = b.matrix if isinstance(b, EmbeddingSet) else b
    if am.shape[1] != bm.shape[1]:
        raise EvalError(f"dimension mismatch: {am.shape[1]} vs {bm.shape[1]}")
    au, bu = _unit_rows(am, "source"), _unit_rows(bm, "target")
    out = np.empty((len(au), len(bu)))
    for s in range(0, len(au), block_size):
        out[s : s + block_size] = au[s : s + block_size] @ bu.T
    return out


def _check_aligned(src: EmbeddingSet, tgt: EmbeddingSet) -> None:
    if len(src) != len(tgt):
        raise EvalError(f"xsim needs equal sizes, got {len(src)} and {len(tgt)}")
    if not np.array_equal(src.row_ids, tgt.row_ids):
        raise EvalError("source and target row ids are misaligned")


def _search(src_m, pool_m, gold: np.ndarray, block_size: int) -> XsimReport:
    """Row ``i`` is correct only if ``gold[i]`` is the unique best candidate."""
    au, pu = _unit_rows(src_m, "source"), _unit_rows(pool_m, "candidate")
    n = len(au)
    nearest = np.empty(n, dtype=np.int64)
    margins = np.empty(n)
    errors = 0
    for s in range(0, n, block_size):
        sims = au[s : s + block_size] @ pu.T
        rows = np.arange(len(sims))
        g = gold[s : s + block_size]
        best = sims.argmax(axis=1)
        gold_sim = sims[rows, g]
        rival = sims.copy()
        rival[rows, g] = -np.inf
        rival_best = rival.max(axis=1) if pu.shape[0] > 1 else np.full(len(sims), -np.inf)
        errors += int(np.count_nonzero(gold_sim <= rival_best))
        nearest[s : s + block_size] = best
        top2 = np.sort(sims, axis=1)[:, -2:] if pu.shape[0] > 1 else None
        margins[s : s + block_size] = top2[:, 1] - top2[:, 0] if top2 is not None else np.inf
    return XsimReport(errors / n, n, nearest, float(margins.mean()), float(margins.min()), errors)


def xsim_error_rate(src: EmbeddingSet, tgt: EmbeddingSet, block_size: int = 256) -> XsimReport:
    """Fraction of source rows whose aligned target is not the unique cosine
    nearest neighbour among all targets (ties count as errors)."""
    _check_aligned(src, tgt)
    if src.dim != tgt.dim:
        raise EvalError(f"dimension mismatch: {src.dim} vs {tgt.dim}")
    return _search(src.matrix, tgt.matrix, np.arange(len(src)), block_size)


def xsim_bruteforce(src: np.ndarray, tgt: np.ndarray) -> int:
    """Reference error count: one source row at a time against every target,
    dividing raw dot products by norms (no pre-normalization, no blocking)."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    tnorm = np.sqrt(np.einsum("ij,ij->i", tgt, tgt))
    errors = 0
    for i in range(len(src)):
        a = src[i]
        sims = (tgt @ a) / (tnorm * math.sqrt(float(a @ a)))
        gold = sims[i]
        sims[i] = -np.inf
        if sims.max(initial=-np.inf) >= gold:
            errors += 1
    return errors


def xsimpp_error_rate(
    src: EmbeddingSet,
    tgt: EmbeddingSet,
    negatives: Mapping[str, EmbeddingSet],
    block_size: int = 256,
) -> dict[str, XsimReport]:
    """xsim against targets augmented with hard negatives.

    Returns one report per negative kind (pool = targets + that kind) and a
    ``pooled`` report (pool = targets + every negative).
    """
    _check_aligned(src, tgt)
    for kind, neg in negatives.items():
        if neg.fingerprint != tgt.fingerprint:
            raise EvalError(f"negatives {kind!r} encoded by a different model than the targets")
        if neg.dim != tgt.dim:
            raise EvalError(f"negatives {kind!r} have dimension {neg.dim}, expected {tgt.dim}")
    gold = np.arange(len(src))
    out = {}
    for kind, neg in negatives.items():
        pool = np.concatenate([tgt.matrix, neg.matrix], axis=0)
        out[kind] = _search(src.matrix, pool, gold, block_size)
    if negatives:
        pool = np.concatenate([tgt.matrix] + [n.matrix for n in negatives.values()], axis=0)
    else:
        pool = tgt.matrix
    out["pooled"] = _search(src.matrix, pool, gold, block_size)
    return out


# ---------------------------------------------------------------- decoding


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]], max_order: int = 4):
    """Corpus BLEU in [0, 1] with the standard brevity penalty.

    Orders with zero matches are smoothed exponentially (1/2, 1/4, ... of a
    count) as long as at least one unigram matched; no unigram overlap gives 0.
    Returns ``(bleu, precisions, brevity_penalty)``.
    """
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0, [0.0] * max_order, 0.0 if hyp_len == 0 else 1.0
    precisions = []
    smooth = 1.0
    for m, t in zip(matches, totals):
        if t == 0:
            smooth *= 2.0
            precisions.append(1.0 / smooth)
        elif m == 0:
            smooth *= 2.0
            precisions.append(1.0 / (smooth * t))
        else:
            precisions.append(m / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    bleu = bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return min(bleu, 1.0), precisions, bp


def decode_metrics(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> DecodeReport:
    if len(hyps) != len(refs):
        raise EvalError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not refs or any(len(r) == 0 for r in refs):
        raise EvalError("empty reference")
    acc = exact = 0.0
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        same = sum(1 for a, b in zip(h, r) if a == b)
        acc += same / max(len(h), len(r))
        exact += float(h == r)
    n = len(refs)
    bleu, precisions, bp = corpus_bleu(hyps, refs)
    return DecodeReport(acc / n, exact / n, bleu, n, precisions, bp)


# ---------------------------------------------------------------- collapse


def collapse_diagnostic(emb) -> float:
    """Mean pairwise Euclidean distance divided by mean row norm; 0 iff all
    rows coincide."""
    m = np.asarray(emb.matrix if isinstance(emb, EmbeddingSet) else emb, dtype=np.float64)
    n = len(m)
    if n < 2:
        raise EvalError("collapse diagnostic needs at least two rows")
    total = 0.0
    for i in range(n - 1):
        total += float(np.linalg.norm(m[i + 1 :] - m[i], axis=1).sum())
    mean_dist = total / (n * (n - 1) / 2)
    mean_norm = float(np.linalg.norm(m, axis=1).mean())
    if mean_norm == 0.0:
        return 0.0
    return mean_dist / mean_norm


# ---------------------------------------------------------------- files

EMB_MAGIC = b"SVEMB\x00\x00\x01"
EMB_VERSION = 1


def write_embeddings(path, emb: EmbeddingSet) -> None:
    """Binary layout: magic, u32 version, u32 n, u32 d, 64-byte ascii
    fingerprint, u32 tag length + utf-8 tag, n int64 row ids, then n*d
    little-endian float32 values."""
    tag = emb.source_tag.encode()
    fp = emb.fingerprint.encode().ljust(64, b"\0")[:64]
    n, d = emb.matrix.shape
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<III", EMB_VERSION, n, d))
        f.write(fp)
        f.write(struct.pack("<I", len(tag)))
        f.write(tag)
        f.write(np.ascontiguousarray(emb.row_ids, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(emb.matrix, dtype="<f4").tobytes())


def read_embeddings(path) -> EmbeddingSet:
    data = Path(path).read_bytes()
    if data[:8] != EMB_MAGIC:
        raise EvalError(f"{path}: not an embedding file")
    version, n, d = struct.unpack_from("<III", data, 8)
    if version != EMB_VERSION:
        raise EvalError(f"{path}: unsupported embedding format version {version}")
    off = 20
    fp = data[off : off + 64].rstrip(b"\0").decode()
    off += 64
    (tlen,) = struct.unpack_from("<I", data, off)
    off += 4
    tag = data[off : off + tlen].decode()
    off += tlen
    if len(data) != off + 8 * n + 4 * n * d:
        raise EvalError(f"{path}: size does not match header (n={n}, d={d})")
    ids = np.frombuffer(data, dtype="<i8", count=n, offset=off).astype(np.int64)
    off += 8 * n
    mat = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32)
    return EmbeddingSet(mat, ids, tag, fp)


def write_embeddings_text(path, emb: EmbeddingSet) -> None:
    n, d = emb.matrix.shape
    lines = [f"# n={n} d={d} fingerprint={emb.fingerprint} source_tag={emb.source_tag}"]
    for rid, row in zip(emb.row_ids, emb.matrix):
        lines.append(f"{int(rid)}\t" + " ".join(f"{float(v):.9g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_embeddings_text(path) -> EmbeddingSet:
    lines = Path(path).read_text().splitlines()
    header = dict(kv.split("=", 1) for kv in lines[0][2:].split(" "))
    ids, rows = [], []
    for line in lines[1:]:
        rid, vals = line.split("\t")
        ids.append(int(rid))
        rows.append([float(v) for v in vals.split()])
    mat = np.asarray(rows, dtype=np.float32).reshape(len(rows), int(header["d"]))
    return EmbeddingSet(mat, np.asarray(ids), header.get("source_tag", ""), header.get("fingerprint", ""))
