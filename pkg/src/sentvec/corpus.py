"""Synthetic N-way parallel corpora over toy languages.

Every language is the pivot language pushed through a token bijection and a
word-order transform, so translation has an exact oracle. Pivot sentences are
instantiated from a small template grammar whose slots (numbers, entities,
causal connectives) are recorded so that hard negatives can be built by
perturbing exactly one slot.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

PAD, BOS, EOS, MASK = 0, 1, 2, 3
N_SPECIAL = 4

NUMBER, ENTITY, CONNECTIVE = "NUMBER", "ENTITY", "CONNECTIVE"
SLOT_TYPES = (NUMBER, ENTITY, CONNECTIVE)
NEGATIVE_KINDS = {"number": NUMBER, "entity": ENTITY, "causality": CONNECTIVE}
ORDER_TRANSFORMS = ("identity", "reverse", "rotate", "swap_adjacent_pairs")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Shared id space: specials, one control token per language, then one
    content block per language."""

    n_languages: int
    content_size: int

    @property
    def size(self) -> int:
        return N_SPECIAL + self.n_languages * (1 + self.content_size)

    def lang_token(self, lang: int) -> int:
        return N_SPECIAL + lang

    def content_base(self, lang: int) -> int:
        return N_SPECIAL + self.n_languages + lang * self.content_size

    def is_special(self, tok: int) -> bool:
        return tok < N_SPECIAL + self.n_languages


# ---------------------------------------------------------------- languages


def _order(seq: Sequence[int], kind: str, k: int) -> list[int]:
    seq = list(seq)
    n = len(seq)
    if kind == "identity" or n == 0:
        return seq
    if kind == "reverse":
        return seq[::-1]
    if kind == "rotate":
        s = k % n
        return seq[s:] + seq[:s]
    if kind == "swap_adjacent_pairs":
        out = seq[:]
        for i in range(0, n - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    raise CorpusError(f"unknown order transform {kind!r}")


def _unorder(seq: Sequence[int], kind: str, k: int) -> list[int]:
    if kind == "rotate":
        return _order(seq, "rotate", -k)
    return _order(seq, kind, k)


@dataclass
class ToyLanguageSpec:
    """A toy language: pivot ids -> surface ids, then a word-order transform.

    ``token_map`` maps pivot content ids to this language's content ids and
    must be injective.
    """

    lang_id: str
    token_map: dict[int, int]
    order_transform: str = "identity"
    rotate_k: int = 0
    lang_token_id: int = -1
    _inverse: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.order_transform not in ORDER_TRANSFORMS:
            raise CorpusError(f"unknown order transform {self.order_transform!r}")
        self.token_map = {int(a): int(b) for a, b in self.token_map.items()}
        self._inverse = {b: a for a, b in self.token_map.items()}
        if len(self._inverse) != len(self.token_map):
            raise CorpusError(f"{self.lang_id}: token map is not a bijection")

    def forward(self, pivot: Sequence[int]) -> list[int]:
        try:
            mapped = [self.token_map[t] for t in pivot]
        except KeyError as exc:
            raise CorpusError(f"{self.lang_id}: token {exc.args[0]} not a pivot content id") from None
        return _order(mapped, self.order_transform, self.rotate_k)

    def inverse(self, surface: Sequence[int]) -> list[int]:
        unordered = _unorder(surface, self.order_transform, self.rotate_k)
        try:
            return [self._inverse[t] for t in unordered]
        except KeyError as exc:
            raise CorpusError(f"{self.lang_id}: token {exc.args[0]} outside this language") from None

    def owns(self, tokens: Sequence[int]) -> bool:
        return all(t in self._inverse for t in tokens)

    def to_json(self) -> dict:
        keys = sorted(self.token_map)
        return {
            "lang_id": self.lang_id,
            "pivot_ids": keys,
            "surface_ids": [self.token_map[k] for k in keys],
            "order_transform": self.order_transform,
            "rotate_k": self.rotate_k,
            "lang_token_id": self.lang_token_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ToyLanguageSpec":
        return cls(
            obj["lang_id"],
            dict(zip(obj["pivot_ids"], obj["surface_ids"])),
            obj["order_transform"],
            obj["rotate_k"],
            obj["lang_token_id"],
        )


def translate_oracle(sentence: Sequence[int], src: ToyLanguageSpec, tgt: ToyLanguageSpec) -> list[int]:
    """Exact translation of content tokens from ``src`` to ``tgt``."""
    if src is tgt:
        src.inverse(sentence)  # validation only
        return list(sentence)
    return tgt.forward(src.inverse(sentence))


def make_languages(seed: int, n_languages: int, vocab: Vocabulary) -> list[ToyLanguageSpec]:
    """Pivot (index 0, identity) plus ``n_languages - 1`` random languages."""
    if n_languages < 2:
        raise CorpusError("need at least two languages (pivot + one other)")
    rng = np.random.default_rng([seed, 1])
    pivot_ids = list(range(vocab.content_base(0), vocab.content_base(0) + vocab.content_size))
    langs = [
        ToyLanguageSpec("L0", {t: t for t in pivot_ids}, "identity", 0, vocab.lang_token(0))
    ]
    orders = ["reverse", "rotate", "swap_adjacent_pairs", "identity"]
    start = int(rng.integers(len(orders)))
    for i in range(1, n_languages):
        perm = rng.permutation(vocab.content_size)
        base = vocab.content_base(i)
        kind = orders[(start + i - 1) % len(orders)]
        k = int(rng.integers(1, 4)) if kind == "rotate" else 0
        tmap = {p: base + int(perm[j]) for j, p in enumerate(pivot_ids)}
        langs.append(ToyLanguageSpec(f"L{i}", tmap, kind, k, vocab.lang_token(i)))
    return langs


# ---------------------------------------------------------------- grammar


@dataclass
class TemplateGrammar:
    """Templates are tuples whose items are pivot content ids (fixed words) or
    slot-type strings. Lexicons hold pivot content ids."""

    templates: list[tuple]
    number_lexicon: list[int]
    entity_lexicon: list[int]
    connective_pairs: list[tuple[int, int]]

    def __post_init__(self):
        self.templates = [tuple(t) for t in self.templates]
        self.connective_pairs = [tuple(p) for p in self.connective_pairs]
        for key in ("number_lexicon", "entity_lexicon", "connective_pairs"):
            if not getattr(self, key):
                raise CorpusError(f"grammar lexicon {key!r} is empty")
        if not self.templates:
            raise CorpusError("grammar has no templates")
        flat = [c for p in self.connective_pairs for c in p]
        if len(set(flat)) != len(flat) or any(a == b for a, b in self.connective_pairs):
            raise CorpusError("connective pairs must be disjoint 2-cycles")
        lex = self.number_lexicon + self.entity_lexicon + flat
        if len(set(lex)) != len(lex):
            raise CorpusError("lexicons overlap")
        for t in self.templates:
            kinds = {x for x in t if isinstance(x, str)}
            if not kinds <= set(SLOT_TYPES):
                raise CorpusError(f"unknown slot types in template {t}")
            if kinds != set(SLOT_TYPES):
                raise CorpusError(f"template {t} lacks a slot of every kind")
        self._flip = {}
        for a, b in self.connective_pairs:
            self._flip[a], self._flip[b] = b, a

    @property
    def connectives(self) -> list[int]:
        return [c for p in self.connective_pairs for c in p]

    def lexicon(self, slot_type: str) -> list[int]:
        if slot_type == NUMBER:
            return self.number_lexicon
        if slot_type == ENTITY:
            return self.entity_lexicon
        if slot_type == CONNECTIVE:
            return self.connectives
        raise CorpusError(f"unknown slot type {slot_type!r}")

    def flip(self, connective: int) -> int:
        return self._flip[connective]

    def used_ids(self) -> set[int]:
        ids = set(self.number_lexicon) | set(self.entity_lexicon) | set(self.connectives)
        for t in self.templates:
            ids |= {x for x in t if not isinstance(x, str)}
        return ids

    def to_json(self) -> dict:
        return {
            "templates": [list(t) for t in self.templates],
            "number_lexicon": self.number_lexicon,
            "entity_lexicon": self.entity_lexicon,
            "connective_pairs": [list(p) for p in self.connective_pairs],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TemplateGrammar":
        return cls(**obj)

    @classmethod
    def random(
        cls,
        seed: int,
        vocab: Vocabulary,
        n_templates: int = 24,
        number_lexicon: int = 10,
        entity_lexicon: int = 16,
        connective_pairs: int = 4,
        min_len: int = 4,
        max_len: int = 12,
        max_slots: int = 2,
    ) -> "TemplateGrammar":
        """Draw a grammar over the pivot content block.

        Each template has one connective and 1..``max_slots`` numbers and
        entities; the remaining positions are fixed function words.
        """
        for key, n in (
            ("number_lexicon", number_lexicon),
            ("entity_lexicon", entity_lexicon),
            ("connective_pairs", connective_pairs),
        ):
            if n <= 0:
                raise CorpusError(f"grammar lexicon {key!r} is empty")
        if min_len < 3 or max_len < min_len:
            raise CorpusError("sentence lengths must satisfy 3 <= min_len <= max_len")
        n_lex = number_lexicon + entity_lexicon + 2 * connective_pairs
        if n_lex + 1 > vocab.content_size:
            raise CorpusError(
                f"vocabulary overflow: {n_lex} lexicon ids + function words exceed "
                f"content vocabulary {vocab.content_size}"
            )
        rng = np.random.default_rng([seed, 2])
        base = vocab.content_base(0)
        ids = base + rng.permutation(vocab.content_size)
        numbers = [int(x) for x in ids[:number_lexicon]]
        entities = [int(x) for x in ids[number_lexicon : number_lexicon + entity_lexicon]]
        conn = [int(x) for x in ids[number_lexicon + entity_lexicon : n_lex]]
        pairs = [(conn[2 * i], conn[2 * i + 1]) for i in range(connective_pairs)]
        words = [int(x) for x in ids[n_lex:]]
        templates: list[tuple] = []
        seen = set()
        attempts = 0
        while len(templates) < n_templates:
            attempts += 1
            if attempts > 1000 * n_templates:
                raise CorpusError("could not draw enough distinct templates")
            length = int(rng.integers(min_len, max_len + 1))
            n_num = int(rng.integers(1, max_slots + 1))
            n_ent = int(rng.integers(1, max_slots + 1))
            if n_num + n_ent + 1 > length:
                n_num = n_ent = 1
            kinds = [NUMBER] * n_num + [ENTITY] * n_ent + [CONNECTIVE]
            pos = rng.choice(length, size=len(kinds), replace=False)
            t: list = [int(x) for x in rng.choice(words, size=length)]
            for p, kind in zip(pos, rng.permutation(kinds)):
                t[int(p)] = str(kind)
            key = tuple(t)
            if key in seen:
                continue
            seen.add(key)
            templates.append(key)
        return cls(templates, numbers, entities, pairs)


# ---------------------------------------------------------------- corpus


class Slot(NamedTuple):
    position: int  # index into the pivot content sequence
    kind: str  # NUMBER / ENTITY / CONNECTIVE
    lexicon_id: int  # index into the slot type's lexicon


@dataclass
class CorpusRow:
    index: int
    variants: tuple[tuple[int, ...], ...]
    slots: tuple[Slot, ...]

    @property
    def pivot(self) -> tuple[int, ...]:
        return self.variants[0]


@dataclass
class ParallelCorpus:
    rows: list[tuple[tuple[int, ...], ...]]
    slots: list[tuple[Slot, ...]]
    split: str
    languages: list[ToyLanguageSpec]

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, i: int) -> CorpusRow:
        return CorpusRow(i, self.rows[i], self.slots[i])

    def column(self, lang: int) -> list[tuple[int, ...]]:
        return [r[lang] for r in self.rows]

    def subset(self, n: int) -> "ParallelCorpus":
        return ParallelCorpus(self.rows[:n], self.slots[:n], self.split, self.languages)


def _instantiate(template: tuple, grammar: TemplateGrammar, rng) -> tuple[tuple[int, ...], tuple[Slot, ...]]:
    toks, slots = [], []
    for pos, item in enumerate(template):
        if isinstance(item, str):
            lex = grammar.lexicon(item)
            j = int(rng.integers(len(lex)))
            toks.append(lex[j])
            slots.append(Slot(pos, item, j))
        else:
            toks.append(item)
    return tuple(toks), tuple(slots)


def generate_corpus(
    seed: int,
    n_languages: int,
    n_rows: int,
    grammar: TemplateGrammar,
    languages: list[ToyLanguageSpec] | None = None,
    vocab: Vocabulary | None = None,
    split: str = "all",
) -> ParallelCorpus:
    """``n_rows`` distinct pivot instantiations and their translations.

    Rows are unique as pivot sequences, so slicing the result into splits
    yields disjoint splits.
    """
    if n_languages < 2:
        raise CorpusError("n_languages must be >= 2")
    if n_rows < 1:
        raise CorpusError("n_rows must be >= 1")
    if languages is None:
        if vocab is None:
            raise CorpusError("need either languages or a vocabulary")
        languages = make_languages(seed, n_languages, vocab)
    if len(languages) != n_languages:
        raise CorpusError("language list does not match n_languages")
    pivot_domain = set(languages[0].token_map)
    missing = grammar.used_ids() - pivot_domain
    if missing:
        raise CorpusError(f"vocabulary overflow: grammar ids {sorted(missing)[:5]} outside pivot vocabulary")
    rng = np.random.default_rng([seed, 3])
    seen: set[tuple[int, ...]] = set()
    rows, slots = [], []
    attempts = 0
    while len(rows) < n_rows:
        attempts += 1
        if attempts > 50 * n_rows + 1000:
            raise CorpusError("grammar cannot produce enough distinct sentences")
        t = grammar.templates[int(rng.integers(len(grammar.templates)))]
        pivot, sl = _instantiate(t, grammar, rng)
        if pivot in seen:
            continue
        seen.add(pivot)
        rows.append(tuple(tuple(lang.forward(pivot)) for lang in languages))
        slots.append(sl)
    return ParallelCorpus(rows, slots, split, languages)


def make_hard_negatives(
    row: CorpusRow,
    kind: str,
    k: int | None,
    seed: int,
    grammar: TemplateGrammar,
    lang: ToyLanguageSpec | None = None,
) -> list[list[int]]:
    """``k`` single-slot perturbations of ``row``'s pivot sentence.

    ``kind`` is ``number``, ``entity`` (replace one filler by another lexicon
    entry) or ``causality`` (swap a connective for its counterpart). The
    negatives are returned in ``lang`` (pivot when omitted). ``k=None``
    returns every distinct perturbation, in the same seeded order.
    """
    if kind not in NEGATIVE_KINDS:
        raise CorpusError(f"unknown negative kind {kind!r}")
    slot_type = NEGATIVE_KINDS[kind]
    targets = [s for s in row.slots if s.kind == slot_type]
    if not targets:
        raise CorpusError(f"row {row.index} has no {slot_type} slot")
    pivot = list(row.pivot)
    candidates: list[tuple[int, int]] = []
    for s in targets:
        current = pivot[s.position]
        if slot_type == CONNECTIVE:
            candidates.append((s.position, grammar.flip(current)))
        else:
            candidates.extend(
                (s.position, alt) for alt in grammar.lexicon(slot_type) if alt != current
            )
    if k is None:
        k = len(candidates)
    if k > len(candidates):
        raise CorpusError(
            f"requested {k} {kind} negatives but only {len(candidates)} distinct replacements exist"
        )
    rng = np.random.default_rng([seed, row.index, SLOT_TYPES.index(slot_type)])
    chosen = rng.permutation(len(candidates))[:k]
    out = []
    for c in chosen:
        pos, alt = candidates[int(c)]
        neg = pivot[:]
        neg[pos] = alt
        out.append(lang.forward(neg) if lang is not None else neg)
    return out


def flip_causality(pivot: Sequence[int], slots: Sequence[Slot], grammar: TemplateGrammar) -> list[int]:
    out = list(pivot)
    for s in slots:
        if s.kind == CONNECTIVE:
            out[s.position] = grammar.flip(out[s.position])
    return out


# ---------------------------------------------------------------- bundle + IO


@dataclass
class ToyCorpus:
    vocab: Vocabulary
    grammar: TemplateGrammar
    languages: list[ToyLanguageSpec]
    splits: dict[str, ParallelCorpus]
    min_len: int
    max_len: int

    @property
    def pivot(self) -> int:
        return 0

    @property
    def n_languages(self) -> int:
        return len(self.languages)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, data in sorted(_serialize(self).items()):
            h.update(name.encode())
            h.update(b"\0")
            h.update(data)
        return h.hexdigest()


def build_corpus(
    seed: int,
    n_languages: int = 5,
    content_size: int = 64,
    n_train: int = 20000,
    n_dev: int = 1000,
    n_test: int = 1000,
    min_len: int = 4,
    max_len: int = 12,
    **grammar_kwargs,
) -> ToyCorpus:
    vocab = Vocabulary(n_languages, content_size)
    grammar = TemplateGrammar.random(seed, vocab, min_len=min_len, max_len=max_len, **grammar_kwargs)
    languages = make_languages(seed, n_languages, vocab)
    total = n_train + n_dev + n_test
    full = generate_corpus(seed, n_languages, total, grammar, languages)
    splits = {}
    start = 0
    for name, n in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        splits[name] = ParallelCorpus(
            full.rows[start : start + n], full.slots[start : start + n], name, languages
        )
        start += n
    return ToyCorpus(vocab, grammar, languages, splits, min_len, max_len)


def _serialize(corpus: ToyCorpus) -> dict[str, bytes]:
    files = {}
    meta = {
        "n_languages": corpus.vocab.n_languages,
        "content_size": corpus.vocab.content_size,
        "min_len": corpus.min_len,
        "max_len": corpus.max_len,
        "splits": {k: len(v) for k, v in corpus.splits.items()},
    }
    files["meta.json"] = json.dumps(meta, sort_keys=True, indent=1).encode()
    files["grammar.json"] = json.dumps(corpus.grammar.to_json(), sort_keys=True).encode()
    files["languages.json"] = json.dumps(
        [lang.to_json() for lang in corpus.languages], sort_keys=True
    ).encode()
    for name, split in corpus.splits.items():
        lines = ["\t".join(" ".join(map(str, v)) for v in row) for row in split.rows]
        files[f"{name}.tsv"] = ("\n".join(lines) + "\n").encode()
        slot_lines = [
            f"{i}\t{s.position}\t{s.kind}\t{s.lexicon_id}"
            for i, sl in enumerate(split.slots)
            for s in sl
        ]
        files[f"{name}.slots.tsv"] = ("\n".join(slot_lines) + "\n").encode()
    return files


def write_corpus(corpus: ToyCorpus, out_dir) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, data in _serialize(corpus).items():
        (out / name).write_bytes(data)
    fp = corpus.fingerprint()
    (out / "FINGERPRINT").write_text(fp + "\n")
    return fp


def read_corpus(path) -> ToyCorpus:
    root = Path(path)
    if not (root / "meta.json").exists():
        raise CorpusError(f"{root} is not a corpus directory (meta.json missing)")
    meta = json.loads((root / "meta.json").read_text())
    vocab = Vocabulary(meta["n_languages"], meta["content_size"])
    grammar = TemplateGrammar.from_json(json.loads((root / "grammar.json").read_text()))
    languages = [ToyLanguageSpec.from_json(o) for o in json.loads((root / "languages.json").read_text())]
    splits = {}
    for name in meta["splits"]:
        rows = []
        for line in (root / f"{name}.tsv").read_text().splitlines():
            rows.append(tuple(tuple(int(t) for t in col.split()) for col in line.split("\t")))
        slots: list[list[Slot]] = [[] for _ in rows]
        for line in (root / f"{name}.slots.tsv").read_text().splitlines():
            if not line:
                continue
            i, pos, kind, lex = line.split("\t")
            slots[int(i)].append(Slot(int(pos), kind, int(lex)))
        splits[name] = ParallelCorpus(rows, [tuple(s) for s in slots], name, languages)
    corpus = ToyCorpus(vocab, grammar, languages, splits, meta["min_len"], meta["max_len"])
    stored = root / "FINGERPRINT"
    if stored.exists() and stored.read_text().strip() != corpus.fingerprint():
        raise CorpusError(f"{root}: corpus fingerprint mismatch")
    return corpus
