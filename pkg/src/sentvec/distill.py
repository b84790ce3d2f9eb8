"""Pseudo-speech rendering and teacher-student distillation of a frame
encoder into the frozen text embedding space."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .corpus import N_SPECIAL, ParallelCorpus, ToyCorpus
from .evaluation import EmbeddingSet, collapse_diagnostic, decode_metrics, xsim_error_rate
from .model import (
    BottleneckModel,
    _linear_params,
    _ln_params,
    _normal,
    causal_mask,
    decoder_block,
    encoder_block,
    init_block,
    key_mask,
    linear,
    ln,
    params_fingerprint,
    pool,
    PoolingMode,
)
from .trainer import MetricsLog, OptimizerState, TrainConfig, TrainingError, adam_update, learning_rate

FRAME_PAD = 0
STREAM_RENDER = 21
STREAM_DISTILL = 22
EVAL_RENDER_SEED = 104729


class DistillError(ValueError):
    pass


# ---------------------------------------------------------------- rendering


@dataclass(frozen=True)
class RenderConfig:
    frames_per_token: int = 3
    jitter: int = 1
    p_frame_noise: float = 0.05
    # frame id of content token t is t - first_content + 1; 0 pads
    first_content: int = N_SPECIAL
    n_frames: int = 0  # frame vocabulary size including the pad frame

    def __post_init__(self):
        if self.frames_per_token < 1 or self.frames_per_token - self.jitter < 1:
            raise DistillError("need frames_per_token >= 1 and frames_per_token - jitter >= 1")
        if self.jitter < 0 or not 0.0 <= self.p_frame_noise <= 1.0:
            raise DistillError("invalid jitter or p_frame_noise")

    @classmethod
    def for_corpus(cls, corpus: ToyCorpus, **kw) -> "RenderConfig":
        first = corpus.vocab.content_base(0)
        return cls(first_content=first, n_frames=corpus.vocab.size - first + 1, **kw)

    def frame_of(self, token: int) -> int:
        return token - self.first_content + 1


@dataclass
class FrameSequence:
    frames: list[int]
    row_id: int = -1
    lang: int = -1


def render_frames(tokens: Sequence[int], cfg: RenderConfig, rng: np.random.Generator,
                  row_id: int = -1, lang: int = -1) -> FrameSequence:
    """Expand each content token into ``r + U{-jitter..jitter}`` copies of its
    frame id; each frame is then replaced by a different random frame with
    probability ``p_frame_noise``. Special tokens produce no frames."""
    content = [t for t in tokens if t >= cfg.first_content]
    if not content:
        raise DistillError("sentence has no content tokens to render")
    r, j = cfg.frames_per_token, cfg.jitter
    counts = r + (rng.integers(-j, j + 1, size=len(content)) if j else np.zeros(len(content), int))
    frames = np.repeat([cfg.frame_of(t) for t in content], counts)
    if cfg.p_frame_noise > 0:
        if cfg.n_frames < 3:
            raise DistillError("frame vocabulary too small for substitution noise")
        hit = rng.random(len(frames)) < cfg.p_frame_noise
        # uniform over the other non-pad frames: draw from n_frames-2 ids and skip the original
        alt = rng.integers(1, cfg.n_frames - 1, size=len(frames))
        alt = alt + (alt >= frames)
        frames = np.where(hit, alt, frames)
    return FrameSequence([int(f) for f in frames], row_id, lang)


def render_split(split: ParallelCorpus, cfg: RenderConfig, seed: int, langs: Sequence[int]) -> list[FrameSequence]:
    out = []
    for lang in langs:
        for i, row in enumerate(split.rows):
            rng = np.random.default_rng([seed, STREAM_RENDER, lang, i])
            out.append(render_frames(row[lang], cfg, rng, i, lang))
    return out


def write_frames(path, seqs: Sequence[FrameSequence]) -> None:
    """Frames as space-separated ids, one sequence per line; sidecar
    ``<path>.rows`` holds ``row<TAB>lang`` per line."""
    p = Path(path)
    p.write_text("".join(" ".join(map(str, s.frames)) + "\n" for s in seqs))
    Path(str(p) + ".rows").write_text("".join(f"{s.row_id}\t{s.lang}\n" for s in seqs))


def read_frames(path) -> list[FrameSequence]:
    p = Path(path)
    frames = [[int(x) for x in l.split()] for l in p.read_text().splitlines()]
    meta = [tuple(int(x) for x in l.split("\t")) for l in Path(str(p) + ".rows").read_text().splitlines()]
    if len(meta) != len(frames):
        raise DistillError(f"{p}: sidecar row count does not match frame lines")
    return [FrameSequence(f, r, g) for f, (r, g) in zip(frames, meta)]


# ---------------------------------------------------------------- student


@dataclass
class StudentConfig:
    n_frames: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    max_frames: int = 64
    pooler: str = "attention"  # attention | mean | max
    n_pool_layers: int = 3
    init_seed: int = 1

    def __post_init__(self):
        if self.pooler not in ("attention", "mean", "max"):
            raise DistillError(f"unknown pooler {self.pooler!r}")
        if self.d_model % self.n_heads:
            raise DistillError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


def init_student(cfg: StudentConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.init_seed)
    d = cfg.d_model
    p: dict[str, np.ndarray] = {}
    p["stu.embed"] = _normal(rng, (cfg.n_frames, d), 0.02)
    p["stu.pos"] = _normal(rng, (cfg.max_frames, d), 0.02)
    for i in range(cfg.n_layers):
        init_block(p, rng, f"stu.layers.{i}", d, cfg.ffn_dim, cfg.n_layers, cross=False)
    _ln_params(p, "stu.ln_f", d)
    if cfg.pooler == "attention":
        p["stu.pool.query"] = _normal(rng, (1, d), 0.02)
        for i in range(cfg.n_pool_layers):
            init_block(p, rng, f"stu.pool.layers.{i}", d, cfg.ffn_dim, cfg.n_pool_layers, cross=True)
        _ln_params(p, "stu.pool.ln_f", d)
    _linear_params(p, rng, "stu.out", d, d)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


class StudentEncoder:
    """Transformer over frame ids followed by a pooler and a linear map into
    the teacher's embedding space."""

    def __init__(self, config: StudentConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = init_student(config) if params is None else params

    def fingerprint(self) -> str:
        return params_fingerprint(self.params)

    def frame_ids(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        for s in seqs:
            if len(s) == 0:
                raise DistillError("cannot encode an empty frame sequence")
            if len(s) > self.config.max_frames:
                raise DistillError(f"frame sequence of length {len(s)} exceeds max_frames {self.config.max_frames}")
        width = max(len(s) for s in seqs)
        out = np.full((len(seqs), width), FRAME_PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            out[i, : len(s)] = s
        return out

    def encode_ids(self, ids: np.ndarray) -> Tensor:
        cfg, p = self.config, self.params
        b, t = ids.shape
        mask = ids != FRAME_PAD
        x = ad.add(ad.embedding_gather(p["stu.embed"], ids), ad.embedding_gather(p["stu.pos"], np.arange(t)))
        madd = key_mask(mask)
        for i in range(cfg.n_layers):
            x = encoder_block(p, f"stu.layers.{i}", x, cfg.n_heads, madd)
        states = ln(p, "stu.ln_f", x)
        if cfg.pooler == "attention":
            q = ad.reshape(ad.add(Tensor(np.zeros((b, 1, cfg.d_model), states.dtype)), p["stu.pool.query"]),
                           (b, 1, cfg.d_model))
            self_mask = causal_mask(1)
            for i in range(cfg.n_pool_layers):
                q = decoder_block(p, f"stu.pool.layers.{i}", q, states, cfg.n_heads, self_mask, madd)
            pooled = ad.reshape(ln(p, "stu.pool.ln_f", q), (b, cfg.d_model))
        else:
            pooled = pool(states, mask, PoolingMode(cfg.pooler))
        return linear(p, "stu.out", pooled)

    def encode(self, seqs) -> Tensor:
        seqs = [s.frames if isinstance(s, FrameSequence) else s for s in seqs]
        return self.encode_ids(self.frame_ids(seqs))

    def embed(self, seqs, batch_size: int = 256) -> np.ndarray:
        out = [self.encode(seqs[i : i + batch_size]).data for i in range(0, len(seqs), batch_size)]
        return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- training


@dataclass
class DistillConfig:
    max_steps: int = 10000
    batch_size: int = 64
    lr: float = 3e-4
    warmup: int = 500
    seed: int = 0
    eval_every: int = 1000
    eval_rows: int = 1000
    render: dict = field(default_factory=lambda: {"frames_per_token": 3, "jitter": 1, "p_frame_noise": 0.05})

    def train_config(self) -> TrainConfig:
        return TrainConfig(max_steps=self.max_steps, batch_size=self.batch_size, lr=self.lr,
                           warmup=self.warmup, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


class TeacherTable:
    """Precomputed, read-only teacher embeddings for every (row, language)."""

    def __init__(self, teacher: BottleneckModel, split: ParallelCorpus, n_languages: int):
        self.fingerprint = teacher.encoder_fingerprint()
        n = len(split)
        self.table = np.empty((n_languages, n, teacher.config.d_model), np.float32)
        for lang in range(n_languages):
            self.table[lang] = teacher.embed(split.column(lang))
        self.table.setflags(write=False)

    def lookup(self, rows: np.ndarray, langs: np.ndarray) -> np.ndarray:
        return self.table[langs, rows]


def sample_distill_batch(corpus: ToyCorpus, render: RenderConfig, seed: int, step: int, batch_size: int):
    """Rows, languages and fresh frame renderings for one update."""
    data = corpus.splits["train"]
    rng = np.random.default_rng([seed, STREAM_DISTILL, step])
    rows = rng.integers(len(data), size=batch_size)
    langs = rng.integers(corpus.n_languages, size=batch_size)
    frames = [
        render_frames(data.rows[r][l], render, np.random.default_rng([seed, STREAM_RENDER, step, i]), int(r), int(l))
        for i, (r, l) in enumerate(zip(rows, langs))
    ]
    return rows, langs, frames


def distill_loss(student: StudentEncoder, frames: Sequence[FrameSequence], targets: np.ndarray) -> Tensor:
    """Mean squared gap between student embeddings and fixed teacher targets."""
    emb = student.encode(frames)
    d = ad.sub(emb, Tensor(targets.astype(emb.dtype)))
    return ad.mean(ad.mul(d, d))


def distill_step(student: StudentEncoder, frames, targets: np.ndarray, opt: OptimizerState, lr: float) -> float:
    with Tape() as tape:
        loss = distill_loss(student, frames, targets)
    grads = ad.backward(tape, loss, student.params)
    adam_update(student.params, grads, opt, lr)
    return float(loss.data)


@dataclass
class DistillResult:
    student: StudentEncoder
    history: list[dict]
    evals: list[dict]
    teacher_identical: bool
    seconds: float


def run_distillation(
    teacher: BottleneckModel,
    corpus: ToyCorpus,
    student_cfg: StudentConfig,
    cfg: DistillConfig,
    out_dir=None,
    evaluate: bool = True,
) -> DistillResult:
    render = RenderConfig.for_corpus(corpus, **cfg.render)
    if student_cfg.n_frames != render.n_frames:
        raise DistillError(f"student frame vocabulary {student_cfg.n_frames} != renderer {render.n_frames}")
    for p in teacher.params.values():
        p.requires_grad = False
    teacher_fp = params_fingerprint(teacher.params)
    table = TeacherTable(teacher, corpus.splits["train"], corpus.n_languages)
    student = StudentEncoder(student_cfg)
    opt = OptimizerState.create(student.params, cfg.train_config())
    tcfg = cfg.train_config()
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    mlog = MetricsLog(out / "metrics.jsonl" if out else None)
    evals = []
    t0 = time.time()
    for step in range(1, cfg.max_steps + 1):
        rows, langs, frames = sample_distill_batch(corpus, render, cfg.seed, step, cfg.batch_size)
        lr = learning_rate(tcfg, step)
        try:
            loss = distill_step(student, frames, table.lookup(rows, langs), opt, lr)
        except NonFiniteError as e:
            raise TrainingError(f"non-finite distillation loss at step {step}: rows={rows[:16].tolist()}") from e
        mlog.append({"kind": "loss", "step": step, "lr": lr, "mse": loss})
        if evaluate and cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.max_steps):
            ev = {"kind": "eval", "step": step,
                  **evaluate_student(student, teacher, corpus, "dev", cfg.eval_rows, render, decode=False)}
            mlog.append(ev)
            evals.append(ev)
    identical = params_fingerprint(teacher.params) == teacher_fp
    if not identical:
        raise TrainingError("teacher parameters changed during distillation")
    return DistillResult(student, mlog.records, evals, identical, time.time() - t0)


# ---------------------------------------------------------------- evaluation


def evaluate_student(
    student: StudentEncoder,
    teacher: BottleneckModel,
    corpus: ToyCorpus,
    split_name: str = "dev",
    max_rows: int | None = None,
    render: RenderConfig | None = None,
    decode: bool = True,
    speech_langs: Sequence[int] | None = None,
) -> dict:
    """Frame->pivot-text xsim per speech language, distillation MSE, and
    (with ``decode``) zero-shot decoding of student embeddings by the text
    decoder into every non-pivot language."""
    split = corpus.splits[split_name]
    if max_rows is not None and max_rows < len(split):
        split = split.subset(max_rows)
    render = render or RenderConfig.for_corpus(corpus)
    pv = corpus.pivot
    langs = list(range(corpus.n_languages)) if speech_langs is None else list(speech_langs)
    ids = np.arange(len(split))
    pivot_text = EmbeddingSet(teacher.embed(split.column(pv)), ids, "text:pivot", teacher.encoder_fingerprint())
    out: dict = {"split": split_name, "n": len(split), "speech": {}}
    xs, mses, exact = [], [], []
    for lang in langs:
        frames = render_split(split, render, EVAL_RENDER_SEED, [lang])
        semb = student.embed(frames)
        text = teacher.embed(split.column(lang))
        rep = xsim_error_rate(EmbeddingSet(semb, ids, f"student:{lang}"), pivot_text)
        entry = {"xsim_to_pivot": rep.error_rate, "mse": float(np.mean((semb - text) ** 2))}
        if decode:
            per = {}
            for tgt in range(corpus.n_languages):
                if tgt == pv:
                    continue
                hyps, _ = teacher.decode_greedy(semb, corpus.vocab.lang_token(tgt))
                per[str(tgt)] = decode_metrics(hyps, split.column(tgt)).to_dict()
            entry["zeroshot"] = per
            entry["zeroshot_exact"] = float(np.mean([r["exact_match"] for r in per.values()]))
            exact.append(entry["zeroshot_exact"])
        out["speech"][str(lang)] = entry
        xs.append(rep.error_rate)
        mses.append(entry["mse"])
    out["xsim"] = float(np.mean(xs))
    out["mse"] = float(np.mean(mses))
    if exact:
        out["zeroshot_exact"] = float(np.mean(exact))
    out["collapse"] = collapse_diagnostic(student.embed(render_split(split.subset(min(len(split), 300)), render,
                                                                     EVAL_RENDER_SEED, [pv])))
    return out


# ---------------------------------------------------------------- files

STUDENT_MAGIC = b"SVSTUD\r\n"


def save_student(student: StudentEncoder, path, meta: dict | None = None) -> None:
    """Same layout as text checkpoints: magic, u32 version, u64 header
    length, ``key=json`` header + tensor manifest, float32 data."""
    names = sorted(student.params)
    kv = {f"student.{k}": v for k, v in student.config.to_dict().items()}
    for k, v in (meta or {}).items():
        kv[f"meta.{k}"] = v
    lines = [f"{k}={json.dumps(kv[k], sort_keys=True)}" for k in sorted(kv)]
    manifest, off = [], 0
    for n in names:
        a = student.params[n].data
        manifest.append(f"{n}\t{','.join(map(str, a.shape))}\t{off}")
        off += a.size * 4
    header = "\n".join(lines + ["--"] + manifest).encode()
    with open(path, "wb") as f:
        f.write(STUDENT_MAGIC)
        f.write(struct.pack("<IQ", 1, len(header)))
        f.write(header)
        for n in names:
            f.write(np.ascontiguousarray(student.params[n].data, dtype="<f4").tobytes())


def load_student(path) -> tuple[StudentEncoder, dict]:
    data = Path(path).read_bytes()
    if data[:8] != STUDENT_MAGIC:
        raise DistillError(f"{path}: not a student checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != 1:
        raise DistillError(f"{path}: unsupported student format version {version}")
    header = data[20 : 20 + hlen].decode().split("\n")
    sep = header.index("--")
    kv = {}
    for line in header[:sep]:
        k, v = line.split("=", 1)
        kv[k] = json.loads(v)
    params = {}
    for line in header[sep + 1 :]:
        name, shape, off = line.split("\t")
        shp = tuple(int(s) for s in shape.split(","))
        arr = np.frombuffer(data, "<f4", int(math.prod(shp)), 20 + hlen + int(off)).reshape(shp)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    cfg = StudentConfig(**{k[8:]: v for k, v in kv.items() if k.startswith("student.")})
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    return StudentEncoder(cfg, params), meta
