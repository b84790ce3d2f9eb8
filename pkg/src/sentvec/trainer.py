"""Adam, batch sampling, checkpoints, the training loop and decoder-only
fine-tuning with a frozen encoder."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .corpus import ToyCorpus
from .model import BottleneckModel, ModelConfig, params_fingerprint
from .objectives import (
    Batch,
    LossWeights,
    NoiseConfig,
    combined_loss,
    interpolation_finetune_loss,
    interpolation_weights,
)

log = logging.getLogger(__name__)

STREAM_SAMPLER = 11
STREAM_DROPOUT = 12


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    max_steps: int = 20000
    batch_size: int = 64
    lr: float = 3e-4
    schedule: str = "inverse_sqrt"  # or "constant"
    warmup: int = 500
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    eval_every: int = 1000
    eval_rows: int | None = None
    freeze_encoder: bool = False
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    checkpoint_every: int = 0
    directions: str = "pivot"  # "pivot": X<->pivot only; "all": every ordered pair of languages

    def __post_init__(self):
        if self.schedule not in ("constant", "inverse_sqrt"):
            raise TrainingError(f"unknown lr schedule {self.schedule!r}")
        if self.directions not in ("pivot", "all"):
            raise TrainingError(f"unknown direction set {self.directions!r}")
        if self.batch_size < 1 or self.max_steps < 0:
            raise TrainingError("batch_size must be >= 1 and max_steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["noise"] = NoiseConfig(**d.get("noise", {}))
        return cls(**d)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Rate used for update number ``step`` (1-based)."""
    if cfg.schedule == "constant":
        return cfg.lr
    s = max(step, 1)
    w = max(cfg.warmup, 1)
    return cfg.lr * min(s / w, (w / s) ** 0.5)


# ---------------------------------------------------------------- Adam


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def create(cls, params: dict[str, Tensor], cfg: TrainConfig | None = None) -> "OptimizerState":
        cfg = cfg or TrainConfig()
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m, v, 0, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: OptimizerState,
                lr: float | None = None) -> None:
    """One bias-corrected Adam step.

    Parameters with ``requires_grad`` off are left alone, moments included.
    A parameter whose gradient is exactly zero keeps its value; its moments
    still decay.
    """
    opt.step += 1
    t = opt.step
    lr = opt.lr if lr is None else lr
    b1, b2 = np.float32(opt.beta1), np.float32(opt.beta2)
    c1 = np.float32(1.0 - opt.beta1**t)
    c2 = np.float32(1.0 - opt.beta2**t)
    lr32, eps32 = np.float32(lr), np.float32(opt.eps)
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            continue
        g = g.astype(p.data.dtype, copy=False)
        if g.shape != p.data.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        m = b1 * opt.m[name] + (np.float32(1.0) - b1) * g
        v = b2 * opt.v[name] + (np.float32(1.0) - b2) * (g * g)
        opt.m[name], opt.v[name] = m, v
        if not g.any():
            continue
        upd = lr32 * (m / c1) / (np.sqrt(v / c2) + eps32)
        p.data = p.data - upd


# ---------------------------------------------------------------- sampling


def sample_batch(corpus: ToyCorpus, seed: int, step: int, batch_size: int, split: str = "train",
                 directions: str = "pivot") -> Batch:
    """Pairs for update ``step``, a pure function of (seed, step).

    With ``directions="pivot"`` each pair draws a row, a non-pivot language
    X, and a direction (X->pivot or pivot->X) uniformly. With ``"all"`` the
    (source, target) pair is uniform over ordered pairs of distinct languages.
    """
    data = corpus.splits[split]
    rng = np.random.default_rng([seed, STREAM_SAMPLER, step])
    rows = rng.integers(len(data), size=batch_size)
    n = corpus.n_languages
    if directions == "all":
        src_l = rng.integers(n, size=batch_size)
        tgt_l = (src_l + 1 + rng.integers(n - 1, size=batch_size)) % n
    else:
        others = [l for l in range(n) if l != corpus.pivot]
        xs = np.asarray(others)[rng.integers(len(others), size=batch_size)]
        to_pivot = rng.random(batch_size) < 0.5
        src_l = np.where(to_pivot, xs, corpus.pivot)
        tgt_l = np.where(to_pivot, corpus.pivot, xs)
    src = [data.rows[r][s] for r, s in zip(rows, src_l)]
    tgt = [data.rows[r][t] for r, t in zip(rows, tgt_l)]
    toks = np.asarray([corpus.vocab.lang_token(int(t)) for t in tgt_l], dtype=np.int64)
    return Batch(src, tgt, src_l, tgt_l, toks, rows, step)


# ---------------------------------------------------------------- step


@dataclass
class LossRecord:
    step: int
    lr: float
    components: dict[str, float]

    def to_dict(self) -> dict:
        return {"step": self.step, "lr": self.lr, **self.components}


def _abort(step: int, batch: Batch, comps: dict, err: Exception):
    raise TrainingError(
        f"non-finite loss at step {step}: components={comps} rows={batch.row_ids.tolist()[:16]} ({err})"
    ) from err


def train_step(model: BottleneckModel, batch: Batch, cfg: TrainConfig, opt: OptimizerState) -> LossRecord:
    """Forward, backward and one Adam update for ``batch``."""
    if cfg.weights.mt_weight == 0 and cfg.weights.alpha == 0 and cfg.weights.beta == 0:
        raise TrainingError("all loss weights are zero")
    model.set_dropout_rng(np.random.default_rng([cfg.seed, STREAM_DROPOUT, batch.step])
                          if model.config.dropout > 0 else None)
    trainable = {k: p for k, p in model.params.items() if p.requires_grad}
    comps: dict = {}
    try:
        with Tape() as tape:
            out = combined_loss(model, batch, cfg.weights, cfg.noise)
            comps = out.components
        if not all(np.isfinite(v) for v in comps.values()):
            raise NonFiniteError("loss component")
        grads = ad.backward(tape, out.total, trainable)
    except NonFiniteError as e:
        _abort(batch.step, batch, comps, e)
    lr = learning_rate(cfg, opt.step + 1)
    adam_update(trainable, grads, opt, lr)
    return LossRecord(batch.step, lr, comps)


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"SVCKPT\r\n"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    corpus_fingerprint: str = ""
    opt: OptimizerState | None = None
    meta: dict = field(default_factory=dict)  # train config, lineage, ...

    @classmethod
    def from_model(cls, model: BottleneckModel, **kw) -> "Checkpoint":
        params = {k: p.data.copy() for k, p in model.params.items()}
        return cls(model.config, params, **kw)

    def to_model(self) -> BottleneckModel:
        return BottleneckModel(self.model_config, {k: Tensor(v.copy(), requires_grad=True)
                                                   for k, v in self.params.items()})

    @property
    def lineage(self) -> list:
        return self.meta.get("lineage", [])

    def fingerprint(self) -> str:
        return params_fingerprint({k: Tensor(v) for k, v in self.params.items()})

    def encoder_fingerprint(self) -> str:
        return params_fingerprint({k: Tensor(v) for k, v in self.params.items()}, "enc.")


def _header_lines(ck: Checkpoint) -> list[str]:
    kv = {
        "format_version": CKPT_VERSION,
        "step": ck.step,
        "seed": ck.seed,
        "corpus_fingerprint": ck.corpus_fingerprint,
    }
    for k, v in ck.model_config.to_dict().items():
        kv[f"model.{k}"] = v
    for k, v in ck.meta.items():
        kv[f"meta.{k}"] = v
    if ck.opt is not None:
        kv["opt.step"] = ck.opt.step
        kv["opt.lr"] = ck.opt.lr
        kv["opt.beta1"] = ck.opt.beta1
        kv["opt.beta2"] = ck.opt.beta2
        kv["opt.eps"] = ck.opt.eps
    return [f"{k}={json.dumps(kv[k], sort_keys=True)}" for k in sorted(kv)]


def _tensors(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", ck.params[k]) for k in sorted(ck.params)]
    if ck.opt is not None:
        out += [(f"adam.m/{k}", ck.opt.m[k]) for k in sorted(ck.opt.m)]
        out += [(f"adam.v/{k}", ck.opt.v[k]) for k in sorted(ck.opt.v)]
    return out


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Layout: magic, u32 version, u64 header length, utf-8 header (sorted
    ``key=json`` lines, a ``--`` line, then ``name<TAB>shape<TAB>offset``
    manifest lines), then little-endian float32 tensor data."""
    tensors = _tensors(ck)
    manifest, offset = [], 0
    for name, arr in tensors:
        shape = ",".join(str(s) for s in arr.shape)
        manifest.append(f"{name}\t{shape}\t{offset}")
        offset += arr.size * 4
    header = "\n".join(_header_lines(ck) + ["--"] + manifest).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        f.write(header)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {CKPT_VERSION}")
    start = 20
    try:
        header = data[start : start + hlen].decode().split("\n")
        sep = header.index("--")
        kv = {}
        for line in header[:sep]:
            k, v = line.split("=", 1)
            kv[k] = json.loads(v)
        manifest = [line.split("\t") for line in header[sep + 1 :]]
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    base = start + hlen
    tensors = {}
    for name, shape, off in manifest:
        shp = tuple(int(s) for s in shape.split(",")) if shape else ()
        n = int(np.prod(shp)) if shp else 1
        end = base + int(off) + 4 * n
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=base + int(off))
        tensors[name] = arr.reshape(shp).astype(np.float32)
    if manifest and end != len(data):
        raise CheckpointError(f"{path}: {len(data) - end} trailing bytes")
    mcfg = ModelConfig.from_dict({k[6:]: v for k, v in kv.items() if k.startswith("model.")})
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    opt = None
    if "opt.step" in kv:
        m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")}
        vv = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")}
        opt = OptimizerState(m, vv, kv["opt.step"], kv["opt.lr"], kv["opt.beta1"], kv["opt.beta2"], kv["opt.eps"])
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    return Checkpoint(mcfg, params, kv["step"], kv["seed"], kv["corpus_fingerprint"], opt, meta)


# ---------------------------------------------------------------- loop


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


class MetricsLog:
    """Append-only JSON-lines file (or in-memory list when path is None)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def truncate_after(self, step: int) -> None:
        """Drop records beyond ``step`` (used when resuming)."""
        if self.path is None or not self.path.exists():
            return
        kept = [l for l in self.path.read_text().splitlines() if l and json.loads(l)["step"] <= step]
        self.path.write_text("".join(l + "\n" for l in kept))

    def append(self, rec: dict) -> None:
        rec = _jsonable(rec)
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    evals: list[dict]
    seconds: float


def run_training(
    corpus: ToyCorpus,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    evaluator: Callable | None = None,
    stop_after: int | None = None,
    stage: str = "train",
    log_every: int = 1,
) -> TrainResult:
    """Train from scratch (or from ``resume``) up to ``cfg.max_steps`` updates.

    Every step appends a loss record; every ``eval_every`` steps (and at the
    end) ``evaluator(model, step)`` results are appended as an eval record.
    ``stop_after`` ends the run early (for interruption tests) while still
    writing a resumable checkpoint.
    """
    fp = corpus.fingerprint()
    if resume is not None:
        if resume.corpus_fingerprint != fp:
            raise TrainingError("checkpoint was trained on a different corpus")
        if resume.model_config != model_cfg:
            raise TrainingError("checkpoint model config does not match the requested config")
        model = resume.to_model()
        opt = resume.opt or OptimizerState.create(model.params, cfg)
        start = resume.step
        meta = dict(resume.meta)
    else:
        if cfg.freeze_encoder:
            raise TrainingError("freeze_encoder needs a loaded checkpoint")
        model = BottleneckModel(model_cfg)
        opt = OptimizerState.create(model.params, cfg)
        start = 0
        meta = {"lineage": [_lineage_entry(stage, cfg, fp, "encoder+decoder")]}
    meta["train_config"] = cfg.to_dict()
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    mlog = MetricsLog(out / "metrics.jsonl" if out else None)
    mlog.truncate_after(start)
    evals = []
    t0 = time.time()
    end = cfg.max_steps if stop_after is None else min(cfg.max_steps, stop_after)
    step = start
    for step in range(start + 1, end + 1):
        batch = sample_batch(corpus, cfg.seed, step, cfg.batch_size, directions=cfg.directions)
        rec = train_step(model, batch, cfg, opt)
        if step % log_every == 0:
            mlog.append({"kind": "loss", **rec.to_dict()})
        if evaluator is not None and cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.max_steps):
            ev = {"kind": "eval", "step": step, **evaluator(model, step)}
            mlog.append(ev)
            evals.append(ev)
            log.info("step %d eval %s", step, {k: v for k, v in ev.items() if isinstance(v, float)})
        if cfg.checkpoint_every and out is not None and step % cfg.checkpoint_every == 0:
            save_checkpoint(_snapshot(model, opt, step, cfg, fp, meta), out / f"step{step}.ckpt")
    ck = _snapshot(model, opt, max(step, start), cfg, fp, meta)
    if out is not None:
        save_checkpoint(ck, out / "checkpoint.ckpt")
    return TrainResult(ck, mlog.records, evals, time.time() - t0)


def _snapshot(model, opt, step, cfg, fp, meta) -> Checkpoint:
    o = OptimizerState({k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()},
                       opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps)
    return Checkpoint.from_model(model, step=step, seed=cfg.seed, corpus_fingerprint=fp, opt=o,
                                 meta=json.loads(json.dumps(meta)))


def _lineage_entry(stage: str, cfg: TrainConfig, corpus_fp: str, updates: str,
                   embedding_source: str = "text") -> dict:
    return {
        "stage": stage,
        "updates": updates,
        "embedding_source": embedding_source,
        "steps": cfg.max_steps,
        "seed": cfg.seed,
        "corpus": corpus_fp,
    }


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    history: list[dict]
    before: dict
    after: dict
    encoder_identical: bool


def finetune_step(model: BottleneckModel, batch: Batch, cfg: TrainConfig, opt: OptimizerState) -> LossRecord:
    """Decoder update on random interpolations of source/target embeddings."""
    u = interpolation_weights(cfg.seed, batch.step, len(batch))
    dec = model.decoder_params()
    try:
        with Tape() as tape:
            loss = interpolation_finetune_loss(model, batch.src, batch.tgt, batch.tgt_lang_tokens, u)
        grads = ad.backward(tape, loss, model.params)
    except NonFiniteError as e:
        _abort(batch.step, batch, {}, e)
    for name, p in model.encoder_params().items():
        if grads[name].any():
            raise TrainingError(f"gradient reached frozen encoder parameter {name}")
    lr = learning_rate(cfg, opt.step + 1)
    adam_update(dec, {k: grads[k] for k in dec}, opt, lr)
    return LossRecord(batch.step, lr, {"interp": float(loss.data), "total": float(loss.data)})


def finetune_decoder(
    base: Checkpoint,
    corpus: ToyCorpus,
    cfg: TrainConfig,
    out_dir=None,
    evaluator: Callable | None = None,
) -> FinetuneResult:
    """Fine-tune only the decoder of ``base``; the encoder stays bit-identical.

    The optimizer restarts from fresh moments. ``evaluator`` runs before and
    after; its similarity metrics must not change.
    """
    if not cfg.freeze_encoder:
        raise TrainingError("finetune_decoder requires freeze_encoder=true")
    fp = corpus.fingerprint()
    if base.corpus_fingerprint != fp:
        raise TrainingError("base checkpoint was trained on a different corpus")
    model = base.to_model()
    model.freeze_encoder(True)
    enc_before = model.encoder_fingerprint()
    opt = OptimizerState.create(model.decoder_params(), cfg)
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    mlog = MetricsLog(out / "metrics.jsonl" if out else None)
    before = evaluator(model, base.step) if evaluator else {}
    for i in range(1, cfg.max_steps + 1):
        batch = sample_batch(corpus, cfg.seed, i, cfg.batch_size, directions=cfg.directions)
        rec = finetune_step(model, batch, cfg, opt)
        mlog.append({"kind": "loss", **rec.to_dict()})
    enc_after = model.encoder_fingerprint()
    identical = enc_after == enc_before and all(
        np.array_equal(model.params[k].data, base.params[k]) for k in model.encoder_params()
    )
    if not identical:
        raise TrainingError("encoder parameters drifted during decoder fine-tuning")
    after = evaluator(model, base.step + cfg.max_steps) if evaluator else {}
    for key in ("xsim", "xsimpp"):
        if key in before and before[key] != after.get(key):
            raise TrainingError(f"{key} changed during decoder fine-tuning: {before[key]} -> {after.get(key)}")
    if evaluator:
        mlog.append({"kind": "eval", "step": 0, "phase": "before", **before})
        mlog.append({"kind": "eval", "step": cfg.max_steps, "phase": "after", **after})
    meta = dict(base.meta)
    meta["lineage"] = list(base.lineage) + [_lineage_entry("finetune-decoder", cfg, fp, "decoder")]
    meta["finetune_config"] = cfg.to_dict()
    meta["base_fingerprint"] = base.fingerprint()
    model.freeze_encoder(False)
    ck = Checkpoint.from_model(model, step=base.step, seed=base.seed, corpus_fingerprint=fp, opt=None,
                               meta=json.loads(json.dumps(meta)))
    if out is not None:
        save_checkpoint(ck, out / "checkpoint.ckpt")
    return FinetuneResult(ck, mlog.records, before, after, identical)


def replace_weights(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, weights=replace(cfg.weights, **kw))
