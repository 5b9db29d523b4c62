"""Command-line entry point: ``qtrdistill <subcommand> [flags]``.

Every subcommand prints its resolved configuration as one JSON line before
doing any work.  Failures print a one-line cause to stderr and exit 1;
argparse usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import __version__
from .bench import bench_latency, format_latency_table, latency_table
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    AugConfig, ConfigError, GenConfig, build_augmented_pool, generate_synthetic_corpus, label_with_teacher,
    load_corpus, load_corpus_meta, read_examples, save_corpus, write_examples, write_soft_unlabeled,
)
from .experiments import (
    TEACHER_NAME, Experiment, GridConfig, desk_profile, run_augmentation_sweep, run_table_grid,
    train_grid_teacher,
)
from .metrics import UndefinedMetricError
from .model import SpecError, count_params, spec_from_name, ModelSpec, TABLE_SPECS
from .tokenizer import Vocab, VocabMismatchError
from .training import (
    DivergenceError, EncodedSet, TrainConfig, evaluate, student_from_teacher, teacher_spec, train_student,
    train_teacher,
)

log = logging.getLogger("qtrdistill")

EXPECTED_ERRORS = (ConfigError, SpecError, VocabMismatchError, CheckpointError, FileNotFoundError,
                   DivergenceError, UndefinedMetricError, ValueError, KeyError)


def read_flat_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _flat(args) -> dict[str, str]:
    return read_flat_config(args.config) if args.config else {}


def _use_desk(kv: dict) -> bool:
    prof = kv.get("profile", "default")
    if prof not in ("default", "desk"):
        raise ConfigError(f"unknown profile {prof!r}; expected default or desk")
    return prof == "desk"


def gen_config(kv: dict) -> GenConfig:
    base = desk_profile()[0] if _use_desk(kv) else GenConfig()
    updates = {}
    for f in fields(GenConfig):
        if f.name in kv:
            cur = getattr(base, f.name)
            updates[f.name] = type(cur)(kv[f.name])
    return replace(base, **updates)


def train_config(args, kv: dict, base: TrainConfig | None = None) -> TrainConfig:
    if base is None:
        base = desk_profile()[1].train if _use_desk(kv) else TrainConfig()
    cfg = TrainConfig.from_flat(kv, base)
    if getattr(args, "loss", None):
        cfg = replace(cfg, loss=args.loss)
    if getattr(args, "lr_set", None):
        cfg = replace(cfg, lr_set=tuple(float(x) for x in args.lr_set.split(",")))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def grid_config(args, kv: dict) -> GridConfig:
    base = desk_profile()[1] if _use_desk(kv) else GridConfig()
    cfg = GridConfig.from_flat(kv, base)
    if args.loss:
        cfg = replace(cfg, kd_loss=args.loss)
    if args.lr_set:
        cfg = replace(cfg, train=replace(cfg.train, lr_set=tuple(float(x) for x in args.lr_set.split(","))))
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.mult is not None:
        cfg = replace(cfg, aug_multiplier=args.mult)
    if args.spec:
        cfg = replace(cfg, specs=tuple(args.spec.split(",")), sweep_specs=tuple(args.spec.split(",")))
    cfg.validate()
    return cfg


def resolve_spec(arg: str, embed_dim: int = 768, vocab_size: int = 50_000) -> ModelSpec:
    """A model name or a JSON file holding ``ModelSpec.to_dict()``."""
    p = Path(arg)
    if p.suffix == ".json" and p.exists():
        return ModelSpec.from_dict(json.loads(p.read_text(encoding="utf-8")))
    return spec_from_name(arg, embed_dim=embed_dim, vocab_size=vocab_size)


def show_config(command: str, cfg: dict):
    print(json.dumps({"command": command, "config": cfg}, sort_keys=True, default=str), flush=True)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"{args.command} needs {', '.join(missing)}")


def _data_dir(path) -> Path:
    p = Path(path)
    if not (p / "train.tsv").exists():
        raise FileNotFoundError(f"{p} is not a corpus directory (no train.tsv)")
    return p


def _vocab_for(args, data_path: Path) -> Vocab:
    if args.vocab:
        return Vocab.load(args.vocab)
    d = data_path if data_path.is_dir() else data_path.parent
    if not (d / "vocab.txt").exists():
        raise FileNotFoundError(f"no vocab.txt next to {data_path}; pass --vocab")
    return Vocab.load(d / "vocab.txt")


def _write_run(out: Path, model, cfg: dict, reports) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    ckpt = save_checkpoint(model, out / "model.ckpt")
    (out / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=1, default=str) + "\n")
    (out / "report.jsonl").write_text("".join(r.to_jsonl() for r in reports if r is not None))
    return ckpt


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    _require(args, "out")
    cfg = gen_config(_flat(args))
    seed = 7 if args.seed is None else args.seed
    show_config("gen-data", {"gen": asdict(cfg), "seed": seed, "out": args.out})
    corpus, vocab = generate_synthetic_corpus(cfg, seed)
    save_corpus(args.out, corpus, vocab, cfg, seed)
    rates = corpus.positive_rates()
    print(f"wrote {args.out}: train={len(corpus.train)} dev={len(corpus.dev)} test={len(corpus.test)} "
          f"positive_rate={rates['train']:.4f} vocab={len(vocab)}")
    return 0


def cmd_train_teacher(args) -> int:
    _require(args, "data", "out")
    kv = _flat(args)
    data = _data_dir(args.data)
    corpus, vocab = load_corpus(data)
    tcfg = train_config(args, kv, desk_profile()[1].teacher_train if _use_desk(kv) else None)
    tcfg = replace(tcfg, loss="hard_ce")
    embed_dim = int(kv.get("embed_dim", 64 if _use_desk(kv) else 768))
    name = args.spec or (desk_profile()[1].run_name(TEACHER_NAME) if _use_desk(kv) else TEACHER_NAME)
    spec = teacher_spec(replace(resolve_spec(name, embed_dim), vocab_size=len(vocab)))
    resolved = {"spec": spec.to_dict(), "train": asdict(tcfg), "data": str(data)}
    show_config("train-teacher", resolved)
    model, res = train_teacher(spec, corpus.train, corpus.dev, vocab, tcfg)
    ckpt = _write_run(Path(args.out), model, resolved, res.reports.values())
    print(f"teacher dev roc_auc={100 * res.report.best_dev_roc_auc:.4f} lr={res.report.lr} -> {ckpt}")
    return 0


def cmd_augment(args) -> int:
    _require(args, "data", "out")
    data = _data_dir(args.data)
    meta = load_corpus_meta(data)
    if meta is None:
        raise ConfigError(f"{data} has no corpus.json; regenerate it with gen-data")
    gen, corpus_seed = meta
    corpus, _ = load_corpus(data)
    mult = 1 if args.mult is None else args.mult
    seed = 1 if args.seed is None else args.seed
    n = mult * len(corpus.train)
    show_config("augment", {"gen": asdict(gen), "corpus_seed": corpus_seed, "mult": mult, "n": n, "seed": seed})
    pool = build_augmented_pool(corpus, AugConfig(gen=gen, corpus_seed=corpus_seed), n, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_examples(out, pool, labeled=False)
    print(f"wrote {len(pool)} augmented pairs to {out}")
    return 0


def cmd_label(args) -> int:
    _require(args, "ckpt", "data", "out")
    data = Path(args.data)
    vocab = _vocab_for(args, data)
    teacher = load_checkpoint(args.ckpt, vocab.fingerprint())
    show_config("label", {"ckpt": args.ckpt, "data": str(data), "out": args.out})
    examples = read_examples(data)
    labeled, summary = label_with_teacher(examples, teacher, vocab)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if all(e.label is not None for e in labeled):
        write_examples(out, labeled)
    else:
        write_soft_unlabeled(out, labeled)
    print(f"labeled {summary.labeled}, skipped {summary.skipped} -> {out}")
    return 0


def _student_run(args, loss_default: str) -> int:
    _require(args, "ckpt", "data", "spec", "out")
    kv = _flat(args)
    data = _data_dir(args.data)
    corpus, vocab = load_corpus(data)
    teacher = load_checkpoint(args.ckpt, vocab.fingerprint())
    cfg = train_config(args, kv)
    if not args.loss:
        cfg = replace(cfg, loss=loss_default)
    if args.command == "distill" and cfg.loss == "hard_ce":
        raise ConfigError("distill needs a soft-target loss (kd_mse or kd_soft_ce)")
    aug = read_examples(args.aug) if args.aug else []
    if aug and cfg.loss == "hard_ce":
        raise ConfigError("augmented pairs carry no hard labels; use distill")
    spec = resolve_spec(args.spec)
    run_spec = student_from_teacher(teacher, spec, cfg.seed).spec
    resolved = {"spec": run_spec.to_dict(), "train": asdict(cfg), "data": str(data), "teacher": args.ckpt,
                "augmented": args.aug, "n_augmented": len(aug)}
    show_config(args.command, resolved)
    res = train_student(teacher, spec, corpus.train, corpus.dev, vocab, cfg, augmented=aug)
    res.model.metadata["spec_name"] = args.spec
    ckpt = _write_run(Path(args.out), res.model, resolved, res.reports.values())
    print(f"{args.command} dev roc_auc={100 * res.report.best_dev_roc_auc:.4f} lr={res.report.lr} "
          f"frozen_unchanged={res.report.frozen_hash_before == res.report.frozen_hash_after} -> {ckpt}")
    return 0


def cmd_distill(args) -> int:
    return _student_run(args, "kd_mse")


def cmd_train(args) -> int:
    return _student_run(args, "hard_ce")


def cmd_eval(args) -> int:
    _require(args, "ckpt", "data")
    data = Path(args.data)
    if data.is_dir():
        data = data / "test.tsv"
    vocab = _vocab_for(args, data)
    model = load_checkpoint(args.ckpt, vocab.fingerprint())
    show_config("eval", {"ckpt": args.ckpt, "data": str(data)})
    examples = read_examples(data)
    if any(e.label is None for e in examples):
        raise ConfigError(f"{data} has unlabeled rows; eval needs hard labels")
    rec = evaluate(model, EncodedSet(examples, vocab))
    print(rec.format(Path(args.ckpt).name))
    return 0


def cmd_bench(args) -> int:
    iters = 1000 if args.iters is None else args.iters
    if args.ckpt:
        show_config("bench", {"ckpt": args.ckpt, "iters": iters, "warmup": 100, "seq_len": 22, "batch": 1})
        model = load_checkpoint(args.ckpt)
        r = bench_latency(model, iters=iters, model_id=Path(args.ckpt).name)
        rows = [{"model": r.model_id, "family": model.spec.family, "L": len(model.spec.layers),
                 "d_h": model.spec.d_h, "d_ff": model.spec.layers[0].d_ff or "",
                 "h": model.spec.layers[0].heads if model.spec.layers[0].kind == "bert" else "",
                 "params": count_params(model.spec)["trainable"], **r.to_dict()}]
    else:
        names = tuple(args.spec.split(",")) if args.spec else TABLE_SPECS
        show_config("bench", {"specs": names, "iters": iters, "warmup": 100, "seq_len": 22, "batch": 1,
                              "embed_dim": 768})
        rows = latency_table(names, iters=iters)
    text = format_latency_table(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_params(args) -> int:
    _require(args, "spec")
    kv = _flat(args)
    embed_dim = int(kv.get("embed_dim", 768))
    out = []
    for name in args.spec.split(","):
        spec = resolve_spec(name, embed_dim, int(kv.get("vocab_size", 50_000)))
        out.append((name, count_params(spec)))
    show_config("params", {"specs": [n for n, _ in out], "embed_dim": embed_dim})
    for name, c in out:
        print(f"{name}\ttrainable={c['trainable']}\t({c['trainable'] / 1e6:.1f}M)\tfrozen={c['frozen']}")
    return 0


def _experiment(args, cfg: GridConfig) -> Experiment:
    _require(args, "data", "out")
    data = _data_dir(args.data)
    meta = load_corpus_meta(data)
    if meta is None:
        raise ConfigError(f"{data} has no corpus.json; regenerate it with gen-data")
    gen, corpus_seed = meta
    corpus, vocab = load_corpus(data)
    if args.ckpt:
        teacher = load_checkpoint(args.ckpt, vocab.fingerprint())
    else:
        log.info("no --ckpt given; training the grid teacher")
        teacher = train_grid_teacher(corpus, vocab, cfg)
    return Experiment(corpus, vocab, teacher, cfg, gen, corpus_seed, out_dir=args.out)


def cmd_grid(args) -> int:
    cfg = grid_config(args, _flat(args))
    show_config("grid", {"grid": cfg.to_dict(), "data": args.data, "teacher": args.ckpt})
    exp = _experiment(args, cfg)
    res = run_table_grid(exp)
    sys.stdout.write(res.table())
    failed = [c for c in res.cells if c.status != "ok"]
    if failed:
        print(f"{len(failed)} grid cell(s) failed; see the status column", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    cfg = grid_config(args, _flat(args))
    show_config("sweep", {"grid": cfg.to_dict(), "data": args.data, "teacher": args.ckpt})
    exp = _experiment(args, cfg)
    res = run_augmentation_sweep(exp)
    sys.stdout.write(res.table())
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic query-title corpus"),
    "train-teacher": (cmd_train_teacher, "train the teacher on hard labels"),
    "augment": (cmd_augment, "write unlabeled augmented pairs (--mult x train size)"),
    "label": (cmd_label, "attach teacher logits to a TSV"),
    "distill": (cmd_distill, "train a student on teacher logits"),
    "train": (cmd_train, "train a student on hard labels"),
    "eval": (cmd_eval, "ROC AUC / AvgPrec / CE of a checkpoint on a labeled TSV"),
    "bench": (cmd_bench, "single-thread inference latency"),
    "params": (cmd_params, "trainable and frozen parameter counts"),
    "grid": (cmd_grid, "architecture x regime grid"),
    "sweep": (cmd_sweep, "augmentation-multiplier sweep for the three-layer students"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qtrdistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--spec", help="model name (e.g. bertbilstm-3x128), comma list, or spec JSON file")
        p.add_argument("--data", help="corpus directory or TSV file")
        p.add_argument("--ckpt", help="checkpoint path")
        p.add_argument("--out", help="output directory or file")
        p.add_argument("--mult", type=int, help="augmentation multiplier")
        p.add_argument("--loss", choices=("hard_ce", "kd_mse", "kd_soft_ce"))
        p.add_argument("--lr-set", help="comma-separated learning rates")
        p.add_argument("--vocab", help="vocab.txt (default: next to --data)")
        p.add_argument("--aug", help="augmented TSV for distill")
        p.add_argument("--iters", type=int, help="timed iterations for bench")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command][0](args)
    except EXPECTED_ERRORS as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
