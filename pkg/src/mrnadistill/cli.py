"""Command-line interface: one executable for the whole pipeline.

Subcommands: ingest, tokenize, teacher, train, eval, pca, entropy,
report.  Every artifact-producing run writes a manifest (resolved
config, seed, versions, kernel backend) beside its outputs, so any run
is reproducible from the manifest alone.

Exit codes: 0 success, 1 domain error (single machine-parsable line on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backend import BACKEND
from .errors import ConfigError, FormatError, MrnaDistillError
from .genbank import (Category, CategoryTargets, IngestStats, parse_gbff,
                      read_shard, split_by_accession, subsample,
                      synthetic_records, write_shard)
from .losses import entropy_profile, pca_components
from .report import write_report
from .student import StudentConfig, StudentModel
from .teacher import (FileTeacher, SyntheticTeacher, TeacherSpec, load_dump,
                      preset_spec, write_dump)
from .tokenizer import (TokenizedDataset, read_tokens, uses_rna_alphabet,
                        write_tokens)
from .trainer import TrainConfig, train, validation_pass

# fully self-contained desk-scale run: synthetic corpus, synthetic teacher
DESK_CONFIG: dict = {
    "batch_size": 16,
    "context_length": 128,
    "lr_max": 2e-4,
    "warmup_steps": 200,
    "weight_decay": 1e-2,
    "grad_clip_max": 1.0,
    "dropout": 0.10,
    "lambda_cos": 1.0,
    "lambda_mse": 0.1,
    "temperature": 1.0,
    "max_steps": 2000,
    "eval_every": 200,
    "seed": 0,
    "mode": "embedding",
    "val_fraction": 0.02,
    "student": {"hidden_dim": 32, "n_blocks": 6, "tap_layers": [3, 6],
                "proj_dims": [64, 64], "activation": "gelu"},
    "teacher": {"preset": "desk"},
    "data": {"synthetic": {"n": 2000, "length_range": [64, 192],
                           "composition_spread": 0.5}},
}

# published-scale hyperparameters; run length and data must be supplied
PUBLISHED_CONFIG: dict = {
    "batch_size": 32,
    "context_length": 2048,
    "lr_max": 2e-4,
    "warmup_steps": 2000,
    "weight_decay": 1e-2,
    "grad_clip_max": 1.0,
    "dropout": 0.10,
    "lambda_cos": 1.0,
    "lambda_mse": 0.1,
    "temperature": 1.0,
    "max_steps": None,
    "eval_every": 1000,
    "seed": 0,
    "mode": "embedding",
    "val_fraction": 0.02,
    "student": {"hidden_dim": 256, "n_blocks": 8, "tap_layers": [5, 8],
                "proj_dims": [1942, 1942], "activation": "gelu"},
    "teacher": {"preset": "published-dims"},
    "data": {},
}

PRESET_CONFIGS = {"desk": DESK_CONFIG, "published": PUBLISHED_CONFIG}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_config(preset: str | None, config_path: str | None,
                   seed: int | None) -> dict:
    if preset is None and config_path is None:
        raise ConfigError("provide --preset and/or --config")
    cfg: dict = {}
    if preset is not None:
        if preset not in PRESET_CONFIGS:
            raise ConfigError(f"unknown preset {preset!r} (have {sorted(PRESET_CONFIGS)})")
        cfg = json.loads(json.dumps(PRESET_CONFIGS[preset]))  # deep copy
    if config_path is not None:
        with open(config_path) as fh:
            cfg = _merge(cfg, json.load(fh))
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def build_train_config(cfg: dict) -> TrainConfig:
    fields = {k: v for k, v in cfg.items() if k in TrainConfig.__dataclass_fields__}
    return TrainConfig(**fields)


def build_student(cfg: dict, train_cfg: TrainConfig) -> StudentModel:
    student_cfg = dict(cfg.get("student", {}))
    student_cfg["dropout"] = train_cfg.dropout  # single source at run time
    if train_cfg.mode == "logit":
        student_cfg["logit_head"] = True
    return StudentModel(StudentConfig(**student_cfg), seed=train_cfg.seed)


def build_teacher(cfg: dict, train_cfg: TrainConfig, student: StudentModel):
    """Returns (teacher, val_teacher); file-backed teachers need one dump
    per split since targets are looked up by row index."""
    tcfg = dict(cfg.get("teacher", {}))
    kind = tcfg.get("kind", "synthetic")
    if "preset" in tcfg:
        name = tcfg.pop("preset")
        seed = tcfg.pop("seed", train_cfg.seed)
        if train_cfg.mode == "logit":
            tcfg.setdefault("emit_logits", True)
        spec = preset_spec(name, seed=seed, **_tupled(tcfg))
        teacher = SyntheticTeacher(spec)
        return teacher, teacher
    if kind == "file":
        dump = tcfg.get("dump_path")
        val_dump = tcfg.get("val_dump_path", dump)
        if dump is None:
            raise ConfigError("file teacher requires dump_path")
        expected = tuple(student.config.proj_dims)
        return (FileTeacher(dump, expected_layer_dims=expected),
                FileTeacher(val_dump, expected_layer_dims=expected))
    tcfg.setdefault("seed", train_cfg.seed)
    spec = TeacherSpec(**_tupled(tcfg))
    teacher = SyntheticTeacher(spec)
    return teacher, teacher


def _tupled(cfg: dict) -> dict:
    out = dict(cfg)
    for key in ("layer_dims", "effective_rank"):
        if key in out and isinstance(out[key], list):
            out[key] = tuple(out[key])
    return out


def build_data(cfg: dict, train_cfg: TrainConfig) -> tuple[TokenizedDataset, TokenizedDataset]:
    dcfg = cfg.get("data", {})
    L = train_cfg.context_length
    if "train_tokens" in dcfg:
        train_ds = read_tokens(dcfg["train_tokens"])
        val_ds = read_tokens(dcfg["val_tokens"]) if "val_tokens" in dcfg \
            else TokenizedDataset.from_sequences([], L)
        return train_ds, val_ds
    if "shard" in dcfg:
        records = read_shard(dcfg["shard"])
    elif "synthetic" in dcfg:
        scfg = dcfg["synthetic"]
        records = synthetic_records(
            scfg["n"], train_cfg.seed,
            length_range=tuple(scfg.get("length_range", [64, 192])),
            composition_spread=scfg.get("composition_spread", 0.0))
    else:
        raise ConfigError("config data section needs train_tokens, shard, or synthetic")
    train_recs, val_recs = split_by_accession(records, train_cfg.val_fraction, train_cfg.seed)
    return (TokenizedDataset.from_sequences([r.sequence for r in train_recs], L),
            TokenizedDataset.from_sequences([r.sequence for r in val_recs], L))


def write_manifest(target, subcommand: str, config: dict, seed) -> None:
    """Write the reproducibility manifest beside an output file or into
    an output directory."""
    target = Path(target)
    path = target / "manifest.json" if target.is_dir() else target.with_name(target.name + ".manifest.json")
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "versions": {
            "mrnadistill": __version__,
            "numpy": np.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
        "kernel_backend": BACKEND,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

_DIR_CATEGORY = {
    "vertebrate_mammalian": Category.MAMMAL,
    "vertebrate_other": Category.OTHER_VERTEBRATE,
    "invertebrate": Category.INVERTEBRATE,
    "viral": Category.VIRAL,
}


def cmd_ingest(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    parse_stats = IngestStats()

    def records():
        if args.synthetic:
            yield from synthetic_records(args.synthetic, args.seed,
                                         composition_spread=args.composition_spread)
            return
        for path in args.inputs:
            path = Path(path)
            override = _DIR_CATEGORY.get(path.parent.name) if args.category_by_dir else None
            for rec in parse_gbff(path, gzip=path.suffix == ".gz", stats=parse_stats):
                if override is not None:
                    rec.category = override
                yield rec

    if not args.synthetic and not args.inputs:
        raise ConfigError("ingest needs --in files or --synthetic N")
    pct = [float(x) for x in args.targets.split(",")]
    if len(pct) != 4:
        raise ConfigError("--targets wants four percentages: other-vertebrate,mammal,invertebrate,viral")
    targets = CategoryTargets.from_percentages(*pct)
    selected, sub_stats = subsample(records(), targets, args.total, args.seed)
    shard_path = out_dir / "data.mrnashrd"
    if selected:
        write_shard(selected, shard_path)
    stats = {
        "records_seen": parse_stats.records_seen if not args.synthetic else sub_stats.records_seen,
        "parse_errors": parse_stats.parse_errors,
        "records_kept": sub_stats.records_kept,
        "per_category": sub_stats.per_category,
        "shard": str(shard_path) if selected else None,
    }
    print(json.dumps(stats))
    write_manifest(out_dir, "ingest",
                   {"targets": pct, "total": args.total, "inputs": [str(p) for p in args.inputs],
                    "synthetic": args.synthetic, "category_by_dir": args.category_by_dir},
                   args.seed)
    return 0


def cmd_tokenize(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_shard(args.shard)
    train_recs, val_recs = split_by_accession(records, args.val_fraction, args.seed)
    train_ds = TokenizedDataset.from_sequences([r.sequence for r in train_recs], args.context)
    val_ds = TokenizedDataset.from_sequences([r.sequence for r in val_recs], args.context)
    write_tokens(train_ds, out_dir / "train.mrnatoks")
    write_tokens(val_ds, out_dir / "val.mrnatoks")
    print(json.dumps({"train_sequences": len(train_ds), "val_sequences": len(val_ds),
                      "context_length": args.context,
                      "u_to_t_sequences": sum(uses_rna_alphabet(r.sequence) for r in records)}))
    write_manifest(out_dir, "tokenize",
                   {"shard": str(args.shard), "context": args.context,
                    "val_fraction": args.val_fraction}, args.seed)
    return 0


def cmd_teacher(args) -> int:
    spec = preset_spec(args.preset, seed=args.seed,
                       **({"emit_logits": True} if args.logits else {}))
    teacher = SyntheticTeacher(spec)
    ds = read_tokens(args.tokens)
    masks = ds.masks
    layer_chunks = [[] for _ in spec.layer_dims]
    logit_chunks = []
    for start in range(0, len(ds), 256):
        tok = ds.tokens[start:start + 256]
        mask = masks[start:start + 256]
        for i, e in enumerate(teacher.targets(tok, mask)):
            layer_chunks[i].append(e)
        if args.logits:
            logit_chunks.append(teacher.logits(tok, mask))
    embeddings = [np.vstack(c) if c else np.zeros((0, d), np.float32)
                  for c, d in zip(layer_chunks, spec.layer_dims)]
    logits = np.concatenate(logit_chunks) if logit_chunks else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dump(out, embeddings, logits)
    print(json.dumps({"sequences": len(ds), "layer_dims": list(spec.layer_dims),
                      "logits": bool(args.logits), "dump": str(out)}))
    write_manifest(out, "teacher", {"preset": args.preset, "tokens": str(args.tokens),
                                    "logits": bool(args.logits)}, args.seed)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args.preset, args.config, args.seed)
    train_cfg = build_train_config(cfg)
    student = build_student(cfg, train_cfg)
    teacher, val_teacher = build_teacher(cfg, train_cfg, student)
    train_ds, val_ds = build_data(cfg, train_cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, "train", cfg, train_cfg.seed)
    result = train(train_cfg, train_ds, val_ds, teacher, student, out_dir,
                   val_teacher=val_teacher)
    summary = {"metrics": str(result.metrics_path),
               "checkpoints": [str(p) for p in result.checkpoint_paths],
               "final": {k: v for k, v in result.final_metrics.items()
                         if k != "entropy_profile"}}
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args.preset, args.config, args.seed)
    train_cfg = build_train_config(cfg)
    student = StudentModel.load(args.checkpoint)
    teacher, val_teacher = build_teacher(cfg, train_cfg, student)
    _, val_ds = build_data(cfg, train_cfg)
    if len(val_ds) == 0:
        raise ConfigError("eval needs a non-empty validation split")
    record = validation_pass(student, val_teacher, val_ds, train_cfg)
    record.pop("entropy_profile", None)
    print(json.dumps(record))
    if args.out_dir is not None:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "eval.json", "w") as fh:
            json.dump(record, fh, indent=2)
        write_manifest(out_dir, "eval", cfg, train_cfg.seed)
    return 0


def cmd_pca(args) -> int:
    dump = load_dump(args.dump)
    if not 0 <= args.layer < len(dump.embeddings):
        raise ConfigError(f"--layer {args.layer} out of range (dump has {len(dump.embeddings)} layers)")
    thresholds = tuple(float(x) / 100.0 for x in args.thresholds.split(","))
    result = pca_components(dump.embeddings[args.layer], thresholds)
    lines = ["threshold,components"]
    lines += [f"{t:.2f},{result.components_at[t]}" for t in thresholds]
    text = "\n".join(lines)
    print(text)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
        write_manifest(Path(args.out), "pca",
                       {"dump": str(args.dump), "layer": args.layer,
                        "thresholds": args.thresholds}, args.seed)
    return 0


def cmd_entropy(args) -> int:
    dump = load_dump(args.dump)
    if dump.logit_table is None:
        raise FormatError("dump carries no logits section")
    logits = dump.logit_table
    if args.index is not None:
        if not 0 <= args.index < logits.shape[0]:
            raise ConfigError(f"--index {args.index} out of range")
        profile = entropy_profile(logits[args.index])
        rows = profile.entropy
        baseline = profile.uniform_entropy
    else:
        per_seq = [entropy_profile(logits[i]).entropy for i in range(logits.shape[0])]
        rows = np.mean(np.vstack(per_seq), axis=0)
        baseline = float(np.log(logits.shape[2]))
    lines = ["position,entropy,uniform_baseline"]
    lines += [f"{i},{h!r},{baseline!r}" for i, h in enumerate(float(h) for h in rows)]
    text = "\n".join(lines)
    print(text)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
        write_manifest(Path(args.out), "entropy",
                       {"dump": str(args.dump), "index": args.index}, args.seed)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "metrics.jsonl").exists():
        print(f"error: usage: no metrics.jsonl under {run_dir}", file=sys.stderr)
        return 2
    written = write_report(run_dir, args.out_dir)
    print(json.dumps({"csv_files": [str(p) for p in written]}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrnadistill", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mrnadistill {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common],
                       help="parse GenBank flat files, subsample, write a shard")
    p.add_argument("--in", dest="inputs", nargs="*", default=[], help="gbff files (.gz detected)")
    p.add_argument("--synthetic", type=int, default=0, help="generate N synthetic records instead")
    p.add_argument("--composition-spread", type=float, default=0.0)
    p.add_argument("--targets", default="43.6,28.3,26.4,1.6",
                   help="percent targets: other-vertebrate,mammal,invertebrate,viral")
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--category-by-dir", action="store_true",
                   help="label categories from the source directory name")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("tokenize", parents=[common], help="shard -> fixed-length token files")
    p.add_argument("--shard", required=True)
    p.add_argument("--context", type=int, required=True)
    p.add_argument("--val-fraction", type=float, default=0.02)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("teacher", parents=[common], help="write teacher targets for a token file")
    p.add_argument("--preset", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--logits", action="store_true")
    p.add_argument("--out", required=True, help="output dump path")
    p.set_defaults(func=cmd_teacher)

    p = sub.add_parser("train", parents=[common], help="run the distillation loop")
    p.add_argument("--preset", choices=sorted(PRESET_CONFIGS), default=None)
    p.add_argument("--config", default=None, help="JSON config (merged over --preset)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="validation metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preset", choices=sorted(PRESET_CONFIGS), default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pca", parents=[common], help="explained-variance component counts of a dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--thresholds", default="50,75,90,95,99")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("entropy", parents=[common], help="per-position entropy profile from a dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--index", type=int, default=None, help="sequence index (default: mean)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("report", parents=[common], help="plot-ready CSVs from metrics.jsonl")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None:
        args.seed = 0
    try:
        return args.func(args)
    except MrnaDistillError as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: OSError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
