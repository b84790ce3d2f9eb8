"""Model-level evaluation tasks over a corpus split."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .corpus import NEGATIVE_KINDS, ParallelCorpus, ToyCorpus, make_hard_negatives
from .evaluation import (
    EmbeddingSet,
    collapse_diagnostic,
    decode_metrics,
    xsim_error_rate,
    xsimpp_error_rate,
)
from .model import BottleneckModel

NEGATIVE_SEED = 7919
# perturbed copies of each target per negative kind
NEGATIVES_PER_ROW = 4

TASKS = ("xsim", "xsimpp", "translate", "autoencode", "zeroshot-modality")


def embed_split(model: BottleneckModel, split: ParallelCorpus, lang: int, rows=None) -> EmbeddingSet:
    ids = np.arange(len(split)) if rows is None else np.asarray(rows)
    seqs = [split.rows[i][lang] for i in ids]
    return EmbeddingSet(
        model.embed(seqs), ids, f"text:{split.languages[lang].lang_id}", model.encoder_fingerprint()
    )


def negative_sentences(corpus: ToyCorpus, split: ParallelCorpus, kind: str, lang: int = 0,
                       seed: int = NEGATIVE_SEED, per_row: int = NEGATIVES_PER_ROW
                       ) -> tuple[list[list[int]], np.ndarray]:
    """Up to ``per_row`` hard negatives of ``kind`` for every row that has
    such a slot, in ``lang``; row ids are non-decreasing.

    A perturbation that reproduces another row's sentence is a true target
    already in the candidate pool, not a negative, so such perturbations are
    skipped and the next ones in seeded order are used instead.
    """
    slot_type = NEGATIVE_KINDS[kind]
    seqs, ids = [], []
    target = split.languages[lang]
    sentences = set(split.column(lang))
    for i in range(len(split)):
        row = split.row(i)
        if not any(s.kind == slot_type for s in row.slots):
            continue
        kept = [n for n in make_hard_negatives(row, kind, None, seed, corpus.grammar, target)
                if tuple(n) not in sentences][:per_row]
        seqs += kept
        ids += [i] * len(kept)
    return seqs, np.asarray(ids, dtype=np.int64)


class NegativeCache:
    """Hard-negative sentences per (split, kind, lang), built once."""

    def __init__(self, corpus: ToyCorpus):
        self.corpus = corpus
        self._cache: dict = {}

    def get(self, split_name: str, kind: str, lang: int = 0):
        key = (split_name, kind, lang)
        if key not in self._cache:
            self._cache[key] = negative_sentences(self.corpus, self.corpus.splits[split_name], kind, lang)
        return self._cache[key]


def negative_sets(model: BottleneckModel, corpus: ToyCorpus, split_name: str, lang: int = 0,
                  cache: NegativeCache | None = None, n_rows: int | None = None) -> dict[str, EmbeddingSet]:
    """Encoded hard negatives per kind, restricted to the first ``n_rows`` rows."""
    cache = cache or NegativeCache(corpus)
    out = {}
    for kind in NEGATIVE_KINDS:
        seqs, ids = cache.get(split_name, kind, lang)
        if n_rows is not None:
            keep = int(np.searchsorted(ids, n_rows))
            seqs, ids = seqs[:keep], ids[:keep]
        out[kind] = EmbeddingSet(model.embed(seqs), ids, f"negatives:{kind}", model.encoder_fingerprint())
    return out


def similarity_report(
    src_sets: dict[int, EmbeddingSet],
    pivot_set: EmbeddingSet,
    negatives: dict[str, EmbeddingSet] | None,
) -> dict:
    """xsim (and xsim++ when negatives are given) of every source set
    against the pivot, plus their means."""
    out: dict = {"pairs": {}}
    xs, xpp = [], []
    for lang, s in sorted(src_sets.items()):
        rep = xsim_error_rate(s, pivot_set)
        entry = {"xsim": rep.error_rate, "xsim_margin": rep.margin_mean}
        xs.append(rep.error_rate)
        if negatives is not None:
            pp = xsimpp_error_rate(s, pivot_set, negatives)
            entry["xsimpp"] = pp["pooled"].error_rate
            for kind, r in pp.items():
                if kind != "pooled":
                    entry[f"xsimpp_{kind}"] = r.error_rate
            xpp.append(pp["pooled"].error_rate)
        out["pairs"][str(lang)] = entry
    out["xsim"] = float(np.mean(xs))
    if xpp:
        out["xsimpp"] = float(np.mean(xpp))
    return out


def decode_report(model: BottleneckModel, memory: np.ndarray, refs: Sequence[Sequence[int]],
                  lang_token: int) -> dict:
    hyps, trunc = model.decode_greedy(memory, lang_token)
    rep = decode_metrics(hyps, refs).to_dict()
    rep["truncated"] = int(np.sum(trunc))
    return rep


def parse_pairs(text: str, n_languages: int) -> list[tuple[int, int]]:
    """``"1:0,2:2"`` -> [(1, 0), (2, 2)]."""
    pairs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            a, b = (int(x) for x in item.split(":"))
        except ValueError:
            raise ValueError(f"bad language pair {item!r}; expected SRC:TGT") from None
        if not (0 <= a < n_languages and 0 <= b < n_languages):
            raise ValueError(f"language pair {item!r} out of range")
        pairs.append((a, b))
    if not pairs:
        raise ValueError("no language pairs given")
    return pairs


def pair_reports(model: BottleneckModel, corpus: ToyCorpus, split_name: str,
                 pairs: Sequence[tuple[int, int]], max_rows: int | None = None) -> dict:
    """Decode every requested (src, tgt) pair; same-language pairs are
    reported under ``autoencode``, the rest under ``translate``."""
    split = corpus.splits[split_name]
    if max_rows is not None and max_rows < len(split):
        split = split.subset(max_rows)
    out: dict = {"translate": {}, "autoencode": {}}
    for a, b in pairs:
        rep = decode_report(model, model.embed(split.column(a)), split.column(b), corpus.vocab.lang_token(b))
        out["autoencode" if a == b else "translate"][f"{a}:{b}"] = rep
    return out


def evaluate_text_model(
    model: BottleneckModel,
    corpus: ToyCorpus,
    split_name: str = "dev",
    tasks: Sequence[str] = ("xsim", "xsimpp", "translate", "autoencode"),
    max_rows: int | None = None,
    cache: NegativeCache | None = None,
) -> dict:
    """Standard text evaluation against the pivot language.

    translate: X->pivot and pivot->X for every non-pivot X.
    autoencode: X->X for every language, pivot included.
    """
    split = corpus.splits[split_name]
    if max_rows is not None and max_rows < len(split):
        split = split.subset(max_rows)
    pv = corpus.pivot
    langs = list(range(corpus.n_languages))
    others = [l for l in langs if l != pv]
    embs = {l: embed_split(model, split, l) for l in langs}
    out: dict = {"split": split_name, "n": len(split)}
    if "xsim" in tasks or "xsimpp" in tasks:
        negs = None
        if "xsimpp" in tasks:
            negs = negative_sets(model, corpus, split_name, pv, cache, len(split))
        out["similarity"] = similarity_report({l: embs[l] for l in others}, embs[pv], negs)
        out["xsim"] = out["similarity"]["xsim"]
        if negs is not None:
            out["xsimpp"] = out["similarity"]["xsimpp"]
    out["collapse"] = collapse_diagnostic(embs[pv].matrix[: min(len(split), 500)])
    if "translate" in tasks:
        to_pivot, from_pivot = {}, {}
        for l in others:
            to_pivot[str(l)] = decode_report(
                model, embs[l].matrix, split.column(pv), corpus.vocab.lang_token(pv))
            from_pivot[str(l)] = decode_report(
                model, embs[pv].matrix, split.column(l), corpus.vocab.lang_token(l))
        out["x_to_pivot"] = to_pivot
        out["pivot_to_x"] = from_pivot
        out["mt_exact_x_to_pivot"] = float(np.mean([r["exact_match"] for r in to_pivot.values()]))
        out["mt_exact_pivot_to_x"] = float(np.mean([r["exact_match"] for r in from_pivot.values()]))
        out["mt_bleu_x_to_pivot"] = float(np.mean([r["bleu"] for r in to_pivot.values()]))
    if "autoencode" in tasks:
        ae = {}
        for l in langs:
            ae[str(l)] = decode_report(model, embs[l].matrix, split.column(l), corpus.vocab.lang_token(l))
        out["autoencode"] = ae
        out["ae_exact"] = float(np.mean([r["exact_match"] for r in ae.values()]))
        out["ae_bleu"] = float(np.mean([r["bleu"] for r in ae.values()]))
    return out


def summary_table(report: dict) -> str:
    """Flat human-readable view of the scalar entries of a report."""
    rows = []

    def walk(prefix, obj):
        for k, v in obj.items():
            key = f"{prefix}.{k}" if prefix else str(k)
            if isinstance(v, dict):
                walk(key, v)
            elif isinstance(v, (int, float)) and not isinstance(v, bool):
                rows.append((key, v))

    walk("", report)
    width = max((len(k) for k, _ in rows), default=0)
    return "\n".join(f"{k.ljust(width)}  {v:.6g}" if isinstance(v, float) else f"{k.ljust(width)}  {v}"
                     for k, v in rows)


Evaluator = Callable[[BottleneckModel, int], dict]


def dev_evaluator(corpus: ToyCorpus, split_name: str = "dev", max_rows: int | None = None,
                  tasks=("xsim", "xsimpp", "translate", "autoencode")) -> Evaluator:
    cache = NegativeCache(corpus)

    def run(model: BottleneckModel, step: int) -> dict:
        return evaluate_text_model(model, corpus, split_name, tasks, max_rows, cache)

    return run
