"""Command-line entry point: corpus generation, training stages, distillation,
evaluation and embedding export. Every command writes a ``manifest.json``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    _value,
    build_corpus_from_config,
    distill_configs,
    finetune_config,
    load_config,
    model_config,
    preset_names,
    to_text,
    train_config,
)
from .corpus import CorpusError, read_corpus, write_corpus
from .distill import (
    DistillError,
    RenderConfig,
    evaluate_student,
    load_student,
    render_split,
    run_distillation,
    save_student,
)
from .evaluation import EmbeddingSet, EvalError, write_embeddings, write_embeddings_text
from .model import ModelError
from .suite import NegativeCache, dev_evaluator, evaluate_text_model, pair_reports, parse_pairs, summary_table
from .trainer import (
    CheckpointError,
    TrainingError,
    finetune_decoder,
    load_checkpoint,
    run_training,
)
from .autodiff import NonFiniteError

LOG_ENV = "SENTVEC_LOG"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("sentvec")


class UsageError(Exception):
    pass


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _scalars(d: dict) -> dict:
    return {k: v for k, v in d.items() if isinstance(v, (int, float)) and not isinstance(v, bool)}


def write_manifest(out: Path, command: str, args: dict, cfg: dict, seed: int, started: float, **extra) -> dict:
    man = {
        "command": command,
        "args": args,
        "config": cfg,
        "seed": seed,
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_clock_seconds": round(time.time() - started, 3),
        **extra,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n")
    return man


def _resolve(args) -> tuple[dict, int]:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = _value(v)
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    return cfg, int(cfg["seed"])


def _corpus(path, expect_fp: str | None = None):
    if path is None:
        raise UsageError("--corpus is required")
    c = read_corpus(path)
    if expect_fp and c.fingerprint() != expect_fp:
        raise UsageError("corpus fingerprint does not match the checkpoint")
    return c


def _load_ckpt(path):
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


# ---------------------------------------------------------------- commands


def cmd_generate_corpus(args, cfg, seed, out: Path) -> dict:
    corpus = build_corpus_from_config(cfg)
    fp = write_corpus(corpus, out)
    counts = {k: len(v) for k, v in corpus.splits.items()}
    print(f"corpus written to {out}  fingerprint {fp[:16]}  rows {counts}")
    return {"corpus_fingerprint": fp, "metrics": {"rows": counts}}


def cmd_train(args, cfg, seed, out: Path) -> dict:
    corpus = _corpus(args.corpus)
    mcfg = model_config(cfg, corpus.vocab.size)
    tcfg = train_config(cfg)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
    ev = dev_evaluator(corpus, "dev", tcfg.eval_rows)
    res = run_training(corpus, mcfg, tcfg, out, resume=resume, evaluator=ev)
    last = res.evals[-1] if res.evals else {}
    print(summary_table(_scalars(last)))
    return {
        "corpus_fingerprint": corpus.fingerprint(),
        "checkpoint_fingerprints": {"checkpoint.ckpt": file_sha256(out / "checkpoint.ckpt")},
        "metrics": _scalars(last),
    }


def cmd_finetune_decoder(args, cfg, seed, out: Path) -> dict:
    base = _load_ckpt(args.checkpoint)
    corpus = _corpus(args.corpus, base.corpus_fingerprint)
    mcfg = model_config(cfg, corpus.vocab.size)
    if mcfg != base.model_config:
        raise UsageError("model settings in the config do not match the base checkpoint")
    tcfg = finetune_config(cfg)
    cache = NegativeCache(corpus)

    def ev(model, step):
        return evaluate_text_model(model, corpus, "dev", ("xsim", "xsimpp", "autoencode", "translate"),
                                   tcfg.eval_rows, cache)

    res = finetune_decoder(base, corpus, tcfg, out, ev)
    print(f"encoder bit-identical: {res.encoder_identical}")
    print(f"xsim   {res.before['xsim']:.6f} -> {res.after['xsim']:.6f}")
    print(f"xsim++ {res.before['xsimpp']:.6f} -> {res.after['xsimpp']:.6f}")
    print(f"AE exact {res.before['ae_exact']:.4f} -> {res.after['ae_exact']:.4f}")
    return {
        "corpus_fingerprint": corpus.fingerprint(),
        "checkpoint_fingerprints": {
            "base": file_sha256(args.checkpoint),
            "checkpoint.ckpt": file_sha256(out / "checkpoint.ckpt"),
        },
        "encoder_identical": res.encoder_identical,
        "metrics": {"before": _scalars(res.before), "after": _scalars(res.after)},
    }


def cmd_distill(args, cfg, seed, out: Path) -> dict:
    base = _load_ckpt(args.checkpoint)
    corpus = _corpus(args.corpus, base.corpus_fingerprint)
    render = RenderConfig.for_corpus(corpus)
    scfg, dcfg = distill_configs(cfg, render.n_frames)
    teacher = base.to_model()
    res = run_distillation(teacher, corpus, scfg, dcfg, out)
    save_student(res.student, out / "student.ckpt", {
        "teacher_fingerprint": base.fingerprint(),
        "corpus_fingerprint": corpus.fingerprint(),
        "distill_config": dcfg.to_dict(),
    })
    last = res.evals[-1] if res.evals else {}
    print(summary_table(_scalars(last)))
    return {
        "corpus_fingerprint": corpus.fingerprint(),
        "checkpoint_fingerprints": {
            "teacher": file_sha256(args.checkpoint),
            "student.ckpt": file_sha256(out / "student.ckpt"),
        },
        "teacher_identical": res.teacher_identical,
        "metrics": _scalars(last),
    }


def cmd_evaluate(args, cfg, seed, out: Path) -> dict:
    base = _load_ckpt(args.checkpoint)
    corpus = _corpus(args.corpus, base.corpus_fingerprint)
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    unknown = set(tasks) - {"xsim", "xsimpp", "translate", "autoencode", "zeroshot-modality"}
    if unknown:
        raise UsageError(f"unknown tasks: {sorted(unknown)}")
    model = base.to_model()
    report: dict = {"checkpoint": str(args.checkpoint), "split": args.split}
    text_tasks = [t for t in tasks if t != "zeroshot-modality"]
    if args.pairs:
        try:
            pairs = parse_pairs(args.pairs, corpus.n_languages)
        except ValueError as e:
            raise UsageError(str(e)) from None
        if "translate" not in text_tasks and "autoencode" not in text_tasks:
            raise UsageError("--pairs needs the translate or autoencode task")
        report["pairs"] = pair_reports(model, corpus, args.split, pairs, args.max_rows)
        text_tasks = [t for t in text_tasks if t not in ("translate", "autoencode")]
    if text_tasks:
        report.update(evaluate_text_model(model, corpus, args.split, text_tasks, args.max_rows))
    if "zeroshot-modality" in tasks:
        if not args.student:
            raise UsageError("zeroshot-modality needs --student")
        student, smeta = load_student(args.student)
        if smeta.get("teacher_fingerprint") not in (None, base.fingerprint()):
            # the decoder may come from a fine-tuned descendant of the teacher
            lineage_fps = {base.meta.get("base_fingerprint")}
            if smeta.get("teacher_fingerprint") not in lineage_fps:
                raise UsageError("student was distilled from an unrelated teacher")
        never_saw = all(e.get("embedding_source", "text") == "text" for e in base.lineage)
        zs = evaluate_student(student, model, corpus, args.split, args.max_rows)
        zs["decoder_never_saw_student_embeddings"] = never_saw
        report["zeroshot_modality"] = zs
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True, default=float) + "\n")
    with open(out / "report.jsonl", "w") as f:
        sections = [(k, report.get(k, {})) for k in ("x_to_pivot", "pivot_to_x", "autoencode")]
        sections.append(("similarity", report.get("similarity", {}).get("pairs", {})))
        sections += [(k, v) for k, v in report.get("pairs", {}).items()]
        for key, recs in sections:
            for pair, rec in recs.items():
                if isinstance(rec, dict):
                    f.write(json.dumps({"task": key, "pair": pair, **rec}, sort_keys=True) + "\n")
    print(summary_table(report))
    return {"corpus_fingerprint": corpus.fingerprint(),
            "checkpoint_fingerprints": {"checkpoint": file_sha256(args.checkpoint)},
            "metrics": _scalars(report)}


def cmd_export_embeddings(args, cfg, seed, out: Path) -> dict:
    base = _load_ckpt(args.checkpoint)
    corpus = _corpus(args.corpus, base.corpus_fingerprint)
    split = corpus.splits[args.split]
    ids = np.arange(len(split))
    if args.modality == "text":
        lang = args.lang
        if not 0 <= lang < corpus.n_languages:
            raise UsageError(f"language index {lang} out of range")
        model = base.to_model()
        seqs = split.column(lang)
        for i, s in enumerate(seqs):
            if len(s) + 2 > model.config.max_len:
                raise UsageError(f"row {i}: sentence of length {len(s)} exceeds max_len")
        emb = EmbeddingSet(model.embed(seqs), ids, f"text:{corpus.languages[lang].lang_id}",
                           model.encoder_fingerprint())
    else:
        if not args.student:
            raise UsageError("--modality frames needs --student")
        student, _ = load_student(args.student)
        frames = render_split(split, RenderConfig.for_corpus(corpus), 104729, [args.lang])
        emb = EmbeddingSet(student.embed(frames), ids, f"student:frames:{args.lang}", student.fingerprint()[:64])
    path = out / f"{args.split}.{args.modality}.{args.lang}.emb"
    write_embeddings(path, emb)
    if args.text:
        write_embeddings_text(str(path) + ".txt", emb)
    print(f"wrote {len(emb)} x {emb.dim} embeddings to {path}")
    return {"corpus_fingerprint": corpus.fingerprint(),
            "checkpoint_fingerprints": {"checkpoint": file_sha256(args.checkpoint)},
            "embedding_file_sha256": file_sha256(path),
            "metrics": {"n": len(emb), "d": emb.dim}}


COMMANDS = {
    "generate-corpus": cmd_generate_corpus,
    "train": cmd_train,
    "finetune-decoder": cmd_finetune_decoder,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sentvec", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, corpus=True, ckpt=False):
        p.add_argument("--config", help="config file or preset name (" + ", ".join(preset_names()) + ")")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if corpus:
            p.add_argument("--corpus", help="corpus directory")
        if ckpt:
            p.add_argument("--checkpoint", help="text model checkpoint")

    common(sub.add_parser("generate-corpus", help="write a synthetic parallel corpus"), corpus=False)
    p = sub.add_parser("train", help="train a text encoder-decoder")
    common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    common(sub.add_parser("finetune-decoder", help="decoder-only fine-tuning, encoder frozen"), ckpt=True)
    common(sub.add_parser("distill", help="distill a frame encoder from a text teacher"), ckpt=True)
    p = sub.add_parser("evaluate", help="run evaluation tasks")
    common(p, ckpt=True)
    p.add_argument("--tasks", default="xsim,xsimpp,translate,autoencode")
    p.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    p.add_argument("--student", help="student checkpoint for zeroshot-modality")
    p.add_argument("--pairs", help="explicit SRC:TGT language pairs, e.g. 1:0,2:2 (same-language pairs "
                   "are reported as autoencode)")
    p.add_argument("--max-rows", type=int)
    p = sub.add_parser("export-embeddings", help="write embeddings of a corpus split")
    common(p, ckpt=True)
    p.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    p.add_argument("--modality", default="text", choices=("text", "frames"))
    p.add_argument("--lang", type=int, default=0)
    p.add_argument("--student")
    p.add_argument("--text", action="store_true", help="also write the human-readable form")
    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return ap


def _replay(manifest_path: str, out: str) -> int:
    man = json.loads(Path(manifest_path).read_text())
    argv = [man["command"]]
    for k, v in sorted(man["args"].items()):
        if k in ("command", "out", "config", "seed", "set") or v is None or v is False:
            continue
        argv += [f"--{k.replace('_', '-')}"] if v is True else [f"--{k.replace('_', '-')}", str(v)]
    cfg_path = Path(out) / "replayed.conf"
    Path(out).mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(to_text(man["config"]))
    argv += ["--config", str(cfg_path), "--seed", str(man["seed"]), "--out", out]
    return main(argv)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if args.command == "replay":
        return _replay(args.manifest, args.out)
    started = time.time()
    try:
        cfg, seed = _resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg, seed, out)
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e, ConfigError) and e.key:
            print(json.dumps({"error": "config", "key": e.key, "message": str(e)}), file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, ModelError, EvalError, DistillError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NonFiniteError, FloatingPointError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    write_manifest(out, args.command, {k: v for k, v in vars(args).items() if k != "command"}, cfg, seed,
                   started, **result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
