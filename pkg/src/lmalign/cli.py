"""Command-line entry point: ``lmalign {gen-data,train,eval,gptscore-eval,coverage}``.

Relative run and output directories are resolved under ``$LMALIGN_RUN_ROOT``
when it is set, otherwise under the working directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import coverage as cov
from .datakit import gen_synthetic, load_dataset, read_label_list
from .encoder import AdapterSet, TextEncoder
from .gptscore import ToyConditionalLM, class_caption_tokens, gptscore_evaluate
from .tokenizer import Tokenizer
from .trainer import TrainingDiverged, evaluate, train
from .vision import TeacherProvider

log = logging.getLogger("lmalign")

RUN_ROOT_ENV = "LMALIGN_RUN_ROOT"
TEACHER_KINDS = ("structured", "random", "none")


class CliError(RuntimeError):
    pass


def resolve_dir(path: str) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    root = os.environ.get(RUN_ROOT_ENV)
    return Path(root) / p if root else p


def write_report(path: Path, rows: dict) -> None:
    """Two-column ``key<TAB>value`` report; floats use ``repr`` so they read back exactly."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}\t{v!r}\n" if isinstance(v, float) else f"{k}\t{v}\n" for k, v in rows.items()]
    path.write_text("".join(lines), encoding="utf-8", newline="\n")


def read_report(path: str | Path) -> dict[str, str]:
    out = {}
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        k, _, v = ln.partition("\t")
        out[k] = v
    return out


# ---------------------------------------------------------------- pipeline pieces


def build_encoder(rc: cfgmod.RunConfig, d_joint: int) -> TextEncoder:
    tok = Tokenizer.default()
    return TextEncoder(rc.encoder_config(tok.vocab_size, d_joint), tok)


def build_teacher(rc: cfgmod.RunConfig, ds):
    kind = rc.data.teacher
    if kind not in TEACHER_KINDS:
        raise CliError(f"data.teacher must be one of {TEACHER_KINDS}, got {kind!r}")
    if kind == "none":
        return None
    names = ds.class_names if kind == "structured" else None
    return TeacherProvider(ds.vision, rc.data.teacher_dim, rc.data.teacher_seed, names)


def run_eval(rc: cfgmod.RunConfig, adapters: AdapterSet, use_lora: bool = True):
    """Held-out accuracy of ``adapters`` under ``rc``; returns (report rows, class embeddings, names)."""
    ds = load_dataset(rc.data.dataset_dir)
    _, held = ds.split(rc.data.holdout)
    if not held:
        raise CliError("held-out split is empty; set data.holdout > 0")
    enc = build_encoder(rc, ds.vision.d_joint)
    t0 = time.perf_counter()
    acc, _, class_emb = evaluate(enc, adapters, ds.vision, held, ds.class_names, rc.data.caption_mode, use_lora)
    rows = {
        "accuracy": acc,
        "n_images": len(held),
        "n_classes": len(ds.class_names),
        "text_encodings": enc.text_encodings,
        "dot_products": len(held) * len(ds.class_names),
        "seconds": time.perf_counter() - t0,
    }
    return rows, class_emb, ds.class_names


def write_class_embeddings(path: Path, names, emb: np.ndarray) -> None:
    lines = [name + "\t" + "\t".join(repr(float(x)) for x in row) + "\n" for name, row in zip(names, emb)]
    path.write_text("".join(lines), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    out = resolve_dir(args.out)
    ds = gen_synthetic(args.classes, args.per_class, args.dim, args.noise_std, args.seed, out, orthogonal=not args.random_prototypes)
    print(f"wrote {len(ds.records)} records ({len(ds.class_names)} classes) to {out}")
    return 0


def _run_config(args) -> cfgmod.RunConfig:
    rc = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    if args.dataset:
        rc.data.dataset_dir = str(resolve_dir(args.dataset).resolve())
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise cfgmod.ConfigError(f"--set expects section.key=value, got {item!r}")
        rc.set(key.strip(), value)
    if args.steps is not None:
        rc.train.total_steps = args.steps
        rc.train.warmup_steps = min(rc.train.warmup_steps, args.steps)
    if args.seed is not None:
        rc.train.seed = args.seed
    if args.teacher is not None:
        rc.data.teacher = args.teacher
    rc.apply_ablations(args.no_rpo, args.mean_pool, args.no_lora, args.no_distill, args.ln_prefix)
    if not rc.data.dataset_dir:
        raise CliError("no dataset: pass --dataset or set data.dataset_dir in the config")
    return rc


def cmd_train(args) -> int:
    rc = _run_config(args)
    run_dir = resolve_dir(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.save(rc, run_dir / "config.cfg")
    ds = load_dataset(rc.data.dataset_dir)
    train_set, _ = ds.split(rc.data.holdout)
    enc = build_encoder(rc, ds.vision.d_joint)
    teacher = build_teacher(rc, ds)
    tc = rc.train_config()

    init = enc.init_adapters(tc.seed)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    init.save(run_dir / "checkpoints" / "init.clmp")
    t0 = time.perf_counter()
    result = train(tc, train_set, enc, ds.vision, teacher, init, run_dir, rc.data.caption_mode)
    elapsed = time.perf_counter() - t0

    rows, class_emb, names = run_eval(rc, result.adapters)
    rows["train_seconds"] = elapsed
    rows["checkpoint"] = "checkpoints/final.clmp"
    write_report(run_dir / "report.tsv", rows)
    write_class_embeddings(run_dir / "class_embeddings.tsv", names, class_emb)
    last = result.metrics[-1] if result.metrics else None
    loss = f", final loss {last['total']:.4f}" if last else ""
    print(f"trained {tc.total_steps} steps in {elapsed:.1f}s{loss}; held-out accuracy {rows['accuracy']:.4f}")
    return 0


def cmd_eval(args) -> int:
    run_dir = resolve_dir(args.run_dir)
    cfg_path = run_dir / "config.cfg"
    if not cfg_path.is_file():
        raise CliError(f"{run_dir}: no config.cfg; is this a run directory?")
    rc = cfgmod.load(cfg_path)
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "checkpoints" / "final.clmp"
    if not ckpt.is_absolute() and args.checkpoint:
        ckpt = run_dir / ckpt if (run_dir / ckpt).exists() else ckpt
    adapters = AdapterSet.load(ckpt)
    rows, class_emb, names = run_eval(rc, adapters, use_lora=not args.no_lora)
    rows["checkpoint"] = str(ckpt)
    rows["lora"] = "off" if args.no_lora else "on"
    out = run_dir / (args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.tsv", rows)
    write_class_embeddings(out / "class_embeddings.tsv", names, class_emb)
    print(
        f"accuracy {rows['accuracy']!r} on {rows['n_images']} images; "
        f"{rows['text_encodings']} text encodings, {rows['dot_products']} dot products"
    )
    return 0


def cmd_gptscore_eval(args) -> int:
    ds = load_dataset(resolve_dir(args.dataset))
    if args.split == "heldout":
        _, images = ds.split(args.holdout)
    else:
        images = list(ds.records)
    if args.max_images is not None:
        images = images[: args.max_images]
    if not images:
        raise CliError("no images selected")
    tok = Tokenizer.default()
    lm = ToyConditionalLM(tok.vocab_size, ds.vision.d_joint, args.d_model, args.layers, args.heads, seed=args.lm_seed)
    captions = class_caption_tokens(tok, ds.class_names, args.template)
    t0 = time.perf_counter()
    res = gptscore_evaluate(lm, ds.vision.embed_images(images), captions)
    elapsed = time.perf_counter() - t0
    labels = np.array([r.class_id for r in images])
    rows = {
        "accuracy": float(np.mean(res.predictions == labels)),
        "n_images": len(images),
        "n_classes": len(ds.class_names),
        "forward_passes": res.forward_passes,
        "seconds": elapsed,
    }
    write_report(resolve_dir(args.out) / "report.tsv", rows)
    print(f"accuracy {rows['accuracy']!r}; {res.forward_passes} LM forward passes in {elapsed:.2f}s")
    return 0


def cmd_coverage(args) -> int:
    stop = cov.load_stoplist(args.stoplist) if args.stoplist else cov.DEFAULT_STOPLIST
    captions = list(cov.iter_corpus_tsv(args.corpus, args.caption_column))
    concepts = cov.build_concept_dict_sharded(captions, args.shards, args.min_count, stop)
    labels = read_label_list(args.labels)
    report = cov.coverage_and_count(labels, concepts, stoplist=stop)
    out = resolve_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    concepts.save(out / "concepts.tsv")
    (out / "coverage.tsv").write_text(report.to_tsv(), encoding="utf-8", newline="\n")
    (out / "summary.txt").write_text(report.summary(), encoding="utf-8", newline="\n")
    sys.stdout.write(report.summary())
    return 0


# ---------------------------------------------------------------- parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (sectioned key = value)")
    p.add_argument("--dataset", help="dataset directory from gen-data (overrides data.dataset_dir)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--steps", type=int, help="total training steps")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--teacher", choices=TEACHER_KINDS, help="distillation teacher kind")
    g = p.add_argument_group("ablations")
    g.add_argument("--no-rpo", action="store_true", help="remove the read-only prompts; pool over text outputs")
    g.add_argument("--mean-pool", action="store_true", help="mean pooling instead of attention pooling")
    g.add_argument("--no-lora", action="store_true", help="train without LoRA adapters")
    g.add_argument("--no-distill", action="store_true", help="set the distillation weight to 0")
    g.add_argument("--ln-prefix", action="store_true", help="prefix tuning plus LayerNorm tuning instead of LoRA")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmalign",
        description="Align a frozen toy language model to image embeddings with adapters.",
        epilog=f"Relative directories are resolved under ${RUN_ROOT_ENV} when set.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a synthetic image/caption dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--dim", type=int, default=32, help="joint embedding width")
    p.add_argument("--noise-std", type=float, default=0.1, help="expected norm of per-record noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random-prototypes", action="store_true", help="unit Gaussian prototypes instead of orthonormal")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train adapters; writes config, metrics, checkpoints and a report")
    p.add_argument("--run-dir", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot accuracy from a run directory (class embeddings computed once)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--checkpoint", help="adapter checkpoint (default: checkpoints/final.clmp)")
    p.add_argument("--no-lora", action="store_true", help="ignore LoRA tensors in the checkpoint")
    p.add_argument("--out", help="output subdirectory of the run directory (default: eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "gptscore-eval",
        help="likelihood-scoring baseline: one LM pass per (image, class)",
        description=(
            "Score every class caption for every image with an image-conditioned toy LM. "
            "The score is the mean log-probability over all caption tokens that follow "
            "the image prefix token, template words included."
        ),
    )
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("heldout", "all"), default="all")
    p.add_argument("--holdout", type=int, default=500)
    p.add_argument("--max-images", type=int)
    p.add_argument("--template", default="A photo of {}")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--lm-seed", type=int, default=0)
    p.set_defaults(func=cmd_gptscore_eval)

    p = sub.add_parser("coverage", help="concept dictionary and label coverage over a caption TSV")
    p.add_argument("--corpus", required=True, help="caption TSV with a header row")
    p.add_argument("--labels", required=True, help="one label per line")
    p.add_argument("--out", required=True)
    p.add_argument("--caption-column", default="caption")
    p.add_argument("--min-count", type=int, default=cov.DEFAULT_MIN_COUNT)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--stoplist", help="replacement stoplist file")
    p.set_defaults(func=cmd_coverage)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CliError, cfgmod.ConfigError, ValueError, KeyError, OSError, cov.CorpusReadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
