"""Architecture grid (hard targets vs KD vs KD with augmentation) and the
augmentation-multiplier sweep.

Every cell trains a fresh student from the same seed, so regimes differ only
in their targets and data.  Cell results are cached by a key over everything
that determines them; the sweep's multiplier-0 and full-augmentation points
reuse the matching grid cells.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import AugConfig, ConfigError, CorpusSplit, Example, GenConfig, build_augmented_pool, label_with_teacher
from .metrics import EvalRecord
from .model import TABLE_SPECS, THREE_LAYER_SPECS, Model, count_params, spec_from_name
from .tokenizer import Vocab
from .training import EncodedSet, TrainConfig, evaluate, student_from_teacher, lr_sweep, train_teacher

log = logging.getLogger(__name__)

REGIMES = ("kd_aug", "kd", "hard")
TEACHER_NAME = "bert-4x256-ff1024-h4"


def scaled_name(name: str, scale: float) -> str:
    """Shrink every width in a model name by ``scale``, keeping widths divisible by 4 (the head count)."""
    if scale == 1.0:
        return name

    def shrink(m):
        return str(max(4, int(round(int(m.group(0)) * scale / 4.0)) * 4))

    head, _, tail = name.partition("-")
    tail = re.sub(r"(?<=x)\d+|(?<=ff)\d+", shrink, tail)
    return f"{head}-{tail}"


@dataclass
class GridConfig:
    specs: tuple[str, ...] = TABLE_SPECS
    regimes: tuple[str, ...] = REGIMES
    width_scale: float = 1.0
    teacher: str = TEACHER_NAME
    teacher_embed_dim: int = 768
    kd_loss: str = "kd_mse"
    aug_multiplier: int = 8
    multipliers: tuple[int, ...] = (0, 1, 2, 4, 8)
    sweep_specs: tuple[str, ...] = THREE_LAYER_SPECS
    aug_seed: int = 1
    aug_strategies: dict = field(default_factory=lambda: {"generate": 0.5, "mask": 0.25, "ngram": 0.25})
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher_train: TrainConfig = field(default_factory=lambda: TrainConfig(loss="hard_ce"))

    def validate(self):
        bad = [r for r in self.regimes if r not in REGIMES]
        if bad:
            raise ConfigError(f"unknown regimes {bad}; expected a subset of {REGIMES}")
        if self.kd_loss == "hard_ce":
            raise ConfigError("kd_loss must be a soft-target loss")
        if self.width_scale <= 0:
            raise ConfigError("width_scale must be positive")
        if any(m < 0 for m in self.multipliers) or self.aug_multiplier < 0:
            raise ConfigError("augmentation multipliers must be non-negative")
        for name in self.specs + self.sweep_specs + (self.teacher,):
            spec_from_name(name)
        replace(self.train, loss=self.kd_loss).validate()
        self.teacher_train.validate()

    def run_name(self, name: str) -> str:
        return scaled_name(name, self.width_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_flat(cls, kv: Mapping[str, str], base: "GridConfig | None" = None) -> "GridConfig":
        """Flat keys: grid fields by name, ``train.<field>`` and ``teacher.<field>`` for the two TrainConfigs."""
        cfg = replace(base) if base is not None else cls()
        types = {f.name: f for f in fields(cls)}
        tr = {k[6:]: v for k, v in kv.items() if k.startswith("train.")}
        te = {k[8:]: v for k, v in kv.items() if k.startswith("teacher.")}
        if tr:
            cfg.train = TrainConfig.from_flat(tr, cfg.train)
        if te:
            cfg.teacher_train = TrainConfig.from_flat(te, cfg.teacher_train)
        for k, v in kv.items():
            if k not in types or k in ("train", "teacher_train"):
                continue
            cur = getattr(cfg, k)
            if k == "aug_strategies":
                v = {p.split(":")[0]: float(p.split(":")[1]) for p in str(v).split(",")}
            elif isinstance(cur, tuple):
                items = [x.strip() for x in str(v).split(",") if x.strip()]
                v = tuple(int(x) for x in items) if k == "multipliers" else tuple(items)
            elif isinstance(cur, float):
                v = float(v)
            elif isinstance(cur, int):
                v = int(v)
            setattr(cfg, k, v)
        return cfg


def desk_profile() -> tuple[GenConfig, GridConfig]:
    """Reduced corpus and quarter-width grid sized for a single CPU core.

    The compact lexicon (8 brands, categories and attributes; 60 products)
    keeps the relevance rule learnable from a few thousand pairs.
    """
    gen = GenConfig(n_train=4000, n_dev=1000, n_test=2000, vocab_size=200, n_products=60,
                    n_brands=8, n_categories=8, n_attributes=8)
    train = TrainConfig(lr=3e-3, lr_set=(3e-3,), max_epochs=25, patience=6)
    teacher = TrainConfig(loss="hard_ce", lr=1e-3, lr_set=(1e-3,), max_epochs=30, patience=8)
    grid = GridConfig(width_scale=0.25, teacher_embed_dim=64, train=train, teacher_train=teacher)
    return gen, grid


# ---------------------------------------------------------------------------
# cells


@dataclass
class CellResult:
    model: str
    run_spec: str
    regime: str
    multiplier: int
    n_train: int
    n_aug: int
    params: int
    status: str = "ok"
    lr: float = float("nan")
    best_epoch: int = 0
    stop_reason: str = ""
    dev_roc_auc: float = float("nan")
    test: EvalRecord | None = None
    frozen_hash_before: str = ""
    frozen_hash_after: str = ""
    ckpt: str = ""
    config: dict = field(default_factory=dict)

    @property
    def frozen_ok(self) -> bool:
        return bool(self.frozen_hash_before) and self.frozen_hash_before == self.frozen_hash_after

    @property
    def roc_auc(self) -> float:
        return self.test.roc_auc if self.test is not None else float("nan")


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _cell_dir(model: str, regime: str, mult: int) -> str:
    return f"cells/{model}__{regime}__x{mult}"


class Experiment:
    """Shared state for grid and sweep runs: corpus, teacher, labeled augmentation pool, cell cache."""

    def __init__(self, corpus: CorpusSplit, vocab: Vocab, teacher: Model, cfg: GridConfig,
                 gen: GenConfig, corpus_seed: int, out_dir=None):
        cfg.validate()
        self.corpus, self.vocab, self.teacher, self.cfg = corpus, vocab, teacher, cfg
        self.gen, self.corpus_seed = gen, corpus_seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.cache: dict[str, CellResult] = {}
        self._pool: list[Example] = []
        self._labeled_train = None
        self._dev = EncodedSet(corpus.dev, vocab)
        self._test = EncodedSet(corpus.test, vocab)
        self.teacher_dev = evaluate(teacher, self._dev)
        self.teacher_test = evaluate(teacher, self._test)

    @property
    def n_base(self) -> int:
        return len(self.corpus.train)

    @property
    def pool_multiplier(self) -> int:
        return max(self.cfg.multipliers + (self.cfg.aug_multiplier,))

    def augmented(self, mult: int) -> list[Example]:
        """Teacher-labeled augmentation; every multiplier takes a prefix of one shared pool."""
        if mult > self.pool_multiplier:
            raise ConfigError(f"multiplier {mult} exceeds the configured maximum {self.pool_multiplier}")
        if not self._pool and mult:
            aug_cfg = AugConfig(strategies=dict(self.cfg.aug_strategies), gen=self.gen,
                                corpus_seed=self.corpus_seed)
            pool = build_augmented_pool(self.corpus, aug_cfg, self.pool_multiplier * self.n_base,
                                        seed=self.cfg.aug_seed)
            self._pool, summary = label_with_teacher(pool, self.teacher, self.vocab)
            if summary.skipped:
                raise ConfigError(f"{summary.skipped} augmented pairs failed to assemble")
        return self._pool[:mult * self.n_base]

    def labeled_train(self) -> list[Example]:
        if self._labeled_train is None:
            self._labeled_train, _ = label_with_teacher(self.corpus.train, self.teacher, self.vocab)
        return self._labeled_train

    def run_cell(self, model_name: str, regime: str, mult: int | None = None) -> CellResult:
        cfg = self.cfg
        if regime == "kd_aug":
            mult = cfg.aug_multiplier if mult is None else mult
        else:
            mult = 0
        run_name = cfg.run_name(model_name)
        loss = "hard_ce" if regime == "hard" else cfg.kd_loss
        tcfg = replace(cfg.train, loss=loss)
        spec = student_from_teacher(self.teacher, spec_from_name(run_name), tcfg.seed).spec
        resolved = {
            "model": model_name, "run_spec": run_name, "spec": spec.to_dict(), "regime": regime,
            "multiplier": mult, "train": asdict(tcfg), "aug_seed": cfg.aug_seed,
            "aug_strategies": cfg.aug_strategies, "teacher_frozen_hash": self._teacher_table_hash(),
            "n_train": self.n_base,
        }
        # kd and kd_aug at multiplier 0 are the same run and share one cache entry
        share_key = _key({k: v for k, v in resolved.items() if k != "regime"})
        if share_key in self.cache:
            return replace(self.cache[share_key], regime=regime)
        aug = self.augmented(mult) if mult else []
        res = CellResult(model=model_name, run_spec=run_name, regime=regime, multiplier=mult,
                         n_train=self.n_base, n_aug=len(aug), params=count_params(spec)["trainable"],
                         config=resolved)
        try:
            data = list(self.corpus.train) if regime == "hard" else self.labeled_train() + aug
            tr = EncodedSet(data, self.vocab)
            sweep = lr_sweep(lambda: student_from_teacher(self.teacher, spec_from_name(run_name), tcfg.seed),
                             tr, self._dev, tcfg)
            rep = sweep.report
            res.lr, res.best_epoch, res.stop_reason = rep.lr, rep.best_epoch, rep.stop_reason
            res.dev_roc_auc = rep.best_dev_roc_auc
            res.frozen_hash_before, res.frozen_hash_after = rep.frozen_hash_before, rep.frozen_hash_after
            res.test = evaluate(sweep.model, self._test)
            if not res.frozen_ok:
                res.status = "failed: frozen embedding table changed during training"
            if self.out_dir is not None:
                rel = _cell_dir(model_name, regime, mult)
                d = self.out_dir / rel
                d.mkdir(parents=True, exist_ok=True)
                save_checkpoint(sweep.model, d / "model.ckpt")
                (d / "config.json").write_text(json.dumps(resolved, sort_keys=True, indent=1) + "\n")
                (d / "report.jsonl").write_text("".join(r.to_jsonl() for r in sweep.reports.values() if r))
                res.ckpt = f"{rel}/model.ckpt"
        except Exception as e:  # a failed cell is recorded; the grid moves on
            log.exception("cell %s/%s failed", model_name, regime)
            res.status = f"failed: {type(e).__name__}: {e}"
        log.info("cell %s %s x%d: test auc %.4f (%s)", model_name, regime, mult, res.roc_auc, res.status)
        self.cache[share_key] = res
        return res

    def _teacher_table_hash(self) -> str:
        if not hasattr(self, "_tth"):
            self._tth = hashlib.sha256(np.ascontiguousarray(self.teacher.params["embed.table"].data)
                                       .tobytes()).hexdigest()
        return self._tth


# ---------------------------------------------------------------------------
# grid


GRID_COLUMNS = ("model", "run_spec", "regime", "multiplier", "n_train", "n_aug", "params", "roc_auc",
                "avg_prec", "ce", "dev_roc_auc", "lr", "best_epoch", "stop_reason", "frozen_ok", "status",
                "ckpt", "raw_roc_auc", "raw_avg_prec", "raw_ce")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def _row(c: CellResult) -> dict:
    t = c.test
    nan = float("nan")
    return {
        "model": c.model, "run_spec": c.run_spec, "regime": c.regime, "multiplier": c.multiplier,
        "n_train": c.n_train, "n_aug": c.n_aug, "params": c.params,
        "roc_auc": 100 * t.roc_auc if t else nan, "avg_prec": 100 * t.avg_prec if t else nan,
        "ce": t.ce if t else nan, "dev_roc_auc": 100 * c.dev_roc_auc, "lr": repr(c.lr),
        "best_epoch": c.best_epoch, "stop_reason": c.stop_reason, "frozen_ok": c.frozen_ok,
        "status": c.status, "ckpt": c.ckpt, "raw_roc_auc": repr(t.roc_auc) if t else "nan",
        "raw_avg_prec": repr(t.avg_prec) if t else "nan", "raw_ce": repr(t.ce) if t else "nan",
    }


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    lines = ["\t".join(columns)]
    lines += ["\t".join(_fmt(r[c]) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


@dataclass
class GridResult:
    cells: list[CellResult]
    teacher_row: dict

    def cell(self, model: str, regime: str) -> CellResult:
        for c in self.cells:
            if c.model == model and c.regime == regime:
                return c
        raise KeyError((model, regime))

    def rows(self) -> list[dict]:
        return [self.teacher_row] + [_row(c) for c in self.cells]

    def table(self) -> str:
        return format_table(self.rows(), GRID_COLUMNS)

    def kd_vs_hard(self) -> list[dict]:
        out = []
        models = list(dict.fromkeys(c.model for c in self.cells))
        for m in models:
            try:
                kd, hard = self.cell(m, "kd"), self.cell(m, "hard")
            except KeyError:
                continue
            out.append({
                "model": m, "hard_roc_auc": 100 * hard.roc_auc, "kd_roc_auc": 100 * kd.roc_auc,
                "delta_test": 100 * (kd.roc_auc - hard.roc_auc),
                "hard_dev_roc_auc": 100 * hard.dev_roc_auc, "kd_dev_roc_auc": 100 * kd.dev_roc_auc,
                "delta_dev": 100 * (kd.dev_roc_auc - hard.dev_roc_auc),
            })
        return out

    def kd_table(self) -> str:
        cols = ("model", "hard_roc_auc", "kd_roc_auc", "delta_test", "hard_dev_roc_auc", "kd_dev_roc_auc",
                "delta_dev")
        return format_table(self.kd_vs_hard(), cols)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"grid": out / "grid.tsv", "kd_vs_hard": out / "kd_vs_hard.tsv"}
        paths["grid"].write_text(self.table())
        paths["kd_vs_hard"].write_text(self.kd_table())
        return paths


def run_table_grid(exp: Experiment) -> GridResult:
    cells = []
    for model in exp.cfg.specs:
        for regime in exp.cfg.regimes:
            cells.append(exp.run_cell(model, regime))
    t, td = exp.teacher_test, exp.teacher_dev
    teacher_spec = exp.teacher.spec
    teacher_row = {
        "model": "teacher", "run_spec": exp.cfg.run_name(exp.cfg.teacher), "regime": "hard",
        "multiplier": 0, "n_train": exp.n_base, "n_aug": 0, "params": count_params(teacher_spec)["trainable"],
        "roc_auc": 100 * t.roc_auc, "avg_prec": 100 * t.avg_prec, "ce": t.ce, "dev_roc_auc": 100 * td.roc_auc,
        "lr": repr(exp.teacher.metadata.get("lr", float("nan"))),
        "best_epoch": exp.teacher.metadata.get("best_epoch", 0), "stop_reason": "", "frozen_ok": True,
        "status": "ok", "ckpt": "", "raw_roc_auc": repr(t.roc_auc), "raw_avg_prec": repr(t.avg_prec),
        "raw_ce": repr(t.ce),
    }
    if exp.out_dir is not None:
        save_checkpoint(exp.teacher, exp.out_dir / "teacher.ckpt")
        teacher_row["ckpt"] = "teacher.ckpt"
    res = GridResult(cells, teacher_row)
    if exp.out_dir is not None:
        res.write(exp.out_dir)
    return res


# ---------------------------------------------------------------------------
# augmentation sweep


SWEEP_COLUMNS = ("model", "run_spec", "multiplier", "n_aug", "dev_roc_auc", "roc_auc", "teacher_roc_auc",
                 "rel_error", "status")


def relative_error(teacher_auc: float, student_auc: float) -> float:
    return (teacher_auc - student_auc) / teacher_auc


@dataclass
class SweepResult:
    rows: list[dict]

    def table(self) -> str:
        return format_table(self.rows, SWEEP_COLUMNS)

    def point(self, model: str, mult: int) -> dict:
        for r in self.rows:
            if r["model"] == model and r["multiplier"] == mult:
                return r
        raise KeyError((model, mult))

    def write(self, out_dir) -> Path:
        p = Path(out_dir) / "augmentation_sweep.tsv"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.table())
        return p


def run_augmentation_sweep(exp: Experiment, multipliers: Sequence[int] | None = None,
                           specs: Sequence[str] | None = None) -> SweepResult:
    multipliers = tuple(exp.cfg.multipliers if multipliers is None else multipliers)
    specs = tuple(exp.cfg.sweep_specs if specs is None else specs)
    t_auc = exp.teacher_test.roc_auc
    rows = []
    for model in specs:
        for mult in multipliers:
            c = exp.run_cell(model, "kd_aug" if mult else "kd", mult)
            if c.status != "ok":
                raise RuntimeError(f"sweep cell {model} x{mult} failed: {c.status}")
            rows.append({
                "model": model, "run_spec": c.run_spec, "multiplier": mult, "n_aug": c.n_aug,
                "dev_roc_auc": 100 * c.dev_roc_auc, "roc_auc": 100 * c.roc_auc, "teacher_roc_auc": 100 * t_auc,
                "rel_error": relative_error(t_auc, c.roc_auc), "status": c.status,
            })
    res = SweepResult(rows)
    if exp.out_dir is not None:
        res.write(exp.out_dir)
    return res


# ---------------------------------------------------------------------------
# teacher


def train_grid_teacher(corpus: CorpusSplit, vocab: Vocab, cfg: GridConfig) -> Model:
    spec = spec_from_name(cfg.run_name(cfg.teacher), embed_dim=cfg.teacher_embed_dim)
    teacher, _ = train_teacher(spec, corpus.train, corpus.dev, vocab, cfg.teacher_train)
    return teacher
