"""Losses, AdamW and the student/teacher training protocol."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import GradTape, Tensor
from .data import ConfigError, Example, label_with_teacher
from .metrics import EvalRecord, evaluate_logits
from .model import Model, ModelSpec
from .tokenizer import Batch, Vocab, VocabMismatchError, encode_pair

log = logging.getLogger(__name__)

LOSSES = ("hard_ce", "kd_mse", "kd_soft_ce")


class DivergenceError(FloatingPointError):
    pass


class NonFiniteGradientError(DivergenceError):
    pass


@dataclass
class TrainConfig:
    loss: str = "kd_mse"
    lr: float = 1e-3
    lr_set: tuple[float, ...] = (1e-3, 0.5e-4, 1e-4)
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 30
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 1.0
    hard_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.lr_set = tuple(float(x) for x in self.lr_set)

    def validate(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss mode {self.loss!r}; expected one of {LOSSES}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.max_epochs < 1 or not 1 <= self.patience <= self.max_epochs:
            raise ConfigError("need 1 <= patience <= max_epochs")
        if self.lr <= 0 or any(r <= 0 for r in self.lr_set) or not self.lr_set:
            raise ConfigError("learning rates must be positive and the candidate set non-empty")
        if self.temperature <= 0 or self.adam_eps <= 0:
            raise ConfigError("temperature and adam epsilon must be positive")
        if not 0.0 <= self.hard_weight <= 1.0:
            raise ConfigError("hard_weight must lie in [0, 1]")

    @classmethod
    def from_flat(cls, kv: Mapping[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from a flat key/value mapping (string values), ignoring unknown keys."""
        cfg = replace(base) if base is not None else cls()
        types = {f.name: f.type for f in fields(cls)}
        for k, v in kv.items():
            if k not in types:
                continue
            cur = getattr(cfg, k)
            if k == "lr_set":
                v = tuple(float(x) for x in str(v).split(",")) if isinstance(v, str) else tuple(v)
            elif isinstance(cur, bool):
                v = str(v).lower() in ("1", "true", "yes")
            elif isinstance(cur, int):
                v = int(v)
            elif isinstance(cur, float):
                v = float(v)
            setattr(cfg, k, v)
        return cfg


# ---------------------------------------------------------------------------
# losses (index 1 = relevant)


def _as_rows(logits: Tensor) -> Tensor:
    return ag.reshape(logits, (1, 2)) if logits.data.ndim == 1 else logits


def hard_ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    logits = _as_rows(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    onehot = np.eye(2, dtype=logits.dtype)[labels]
    return ag.mul(ag.sum(ag.mul(ag.log_softmax(logits, axis=-1), onehot)), -1.0 / len(labels))


def kd_loss(student_logits: Tensor, teacher_logits, mode: str = "kd_mse", temperature: float = 1.0) -> Tensor:
    student_logits = _as_rows(student_logits)
    t = np.asarray(teacher_logits, dtype=student_logits.dtype).reshape(-1, 2)
    n = t.shape[0]
    if mode == "kd_mse":
        return ag.mul(ag.sum(ag.square(ag.sub(student_logits, t))), 1.0 / (2 * n))
    if mode == "kd_soft_ce":
        z = t / temperature
        z = z - z.max(axis=1, keepdims=True)
        target = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        logp = ag.log_softmax(ag.mul(student_logits, 1.0 / temperature), axis=-1)
        return ag.mul(ag.sum(ag.mul(logp, target)), -1.0 / n)
    raise ConfigError(f"unknown KD loss mode {mode!r}")


def batch_loss(logits: Tensor, batch: Batch, cfg: TrainConfig) -> Tensor:
    if cfg.loss == "hard_ce":
        return hard_ce_loss(logits, batch.extra["labels"])
    soft = kd_loss(logits, batch.extra["teacher"], cfg.loss, cfg.temperature)
    if cfg.hard_weight > 0:
        labels = batch.extra["labels"]
        if np.any(labels < 0):
            raise ConfigError("hard_weight > 0 needs hard labels on every training example")
        return ag.add(ag.mul(soft, 1.0 - cfg.hard_weight), ag.mul(hard_ce_loss(logits, labels), cfg.hard_weight))
    return soft


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only (not biases, norms or embedding tables)."""
    return name.endswith((".w", ".w_ih", ".w_hh"))


def adamw_step(params, grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
               decay: Callable[[str], bool] = decays):
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Frozen parameters in ``params.frozen`` are never touched.
    """
    frozen = getattr(params, "frozen", set())
    names = [n for n in grads if n not in frozen and grads[n] is not None]
    for n in names:
        if not np.all(np.isfinite(grads[n])):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {n}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for n in names:
        p = params[n].data
        g = grads[n]
        if n not in state.m:
            state.m[n] = np.zeros_like(p)
            state.v[n] = np.zeros_like(p)
        m, v = state.m[n], state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay and decay(n):
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# datasets


class EncodedSet:
    """Examples pre-tokenized into fixed (N, 23) arrays."""

    def __init__(self, examples: Sequence[Example], vocab: Vocab, max_len: int = 23):
        n = len(examples)
        self.ids = np.full((n, max_len), vocab.pad_id, dtype=np.int64)
        self.segments = np.zeros((n, max_len), dtype=np.int64)
        self.lengths = np.zeros(n, dtype=np.int64)
        self.labels = np.full(n, -1, dtype=np.int64)
        self.teacher = np.full((n, 2), np.nan)
        for i, ex in enumerate(examples):
            seq = encode_pair(ex.query, ex.title, vocab)
            self.ids[i, : seq.length] = seq.ids
            self.segments[i, : seq.length] = seq.segments
            self.lengths[i] = seq.length
            if ex.label is not None:
                self.labels[i] = ex.label
            if ex.teacher_logits is not None:
                self.teacher[i] = ex.teacher_logits

    def __len__(self):
        return len(self.lengths)

    def batch(self, idx=None) -> Batch:
        if idx is None:
            idx = np.arange(len(self))
        lengths = self.lengths[idx]
        T = int(lengths.max())
        return Batch(self.ids[idx, :T], self.segments[idx, :T], lengths,
                     {"labels": self.labels[idx], "teacher": self.teacher[idx]})


def evaluate(model: Model, data: EncodedSet) -> EvalRecord:
    if np.any(data.labels < 0):
        raise ConfigError("evaluation data needs hard labels")
    return evaluate_logits(model.logits(data.batch()), data.labels)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    lr: float
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_roc_auc: float = float("-inf")
    stop_reason: str = ""
    frozen_hash_before: str = ""
    frozen_hash_after: str = ""

    def to_jsonl(self) -> str:
        head = {k: v for k, v in asdict(self).items() if k != "epochs"}
        lines = [json.dumps({"record": "summary", **head}, sort_keys=True)]
        lines += [json.dumps({"record": "epoch", **e}, sort_keys=True) for e in self.epochs]
        return "\n".join(lines) + "\n"


class EarlyStopping:
    """Track the best dev score; signal a stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("-inf")
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, score: float) -> bool:
        """Returns True when ``score`` is a new best."""
        if score > self.best:
            self.best, self.best_epoch, self.stale = score, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def train(model: Model, train_data: EncodedSet, dev_data: EncodedSet, cfg: TrainConfig,
          evaluator: Callable[[Model, EncodedSet], EvalRecord] = evaluate) -> tuple[Model, TrainReport]:
    """Train ``model`` in place; return a copy holding the best-dev-AUC parameters and the report.

    Raises :class:`DivergenceError` on a non-finite loss or gradient.
    """
    cfg.validate()
    if len(train_data) == 0 or len(dev_data) == 0:
        raise ConfigError("train and dev sets must be non-empty")
    if cfg.loss != "hard_ce" and np.isnan(train_data.teacher).any():
        raise ConfigError(f"loss {cfg.loss} needs teacher logits on every training example")
    if cfg.loss == "hard_ce" and np.any(train_data.labels < 0):
        raise ConfigError("hard_ce needs hard labels on every training example")

    params = model.params
    trainable = params.trainable_names()
    report = TrainReport(lr=cfg.lr, frozen_hash_before=params.frozen_hash())
    stopper = EarlyStopping(cfg.patience)
    state = OptimizerState()
    rng = np.random.default_rng([cfg.seed, 17])
    best_state = {n: params[n].data.copy() for n in trainable}
    n = len(train_data)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            batch = train_data.batch(perm[s:s + cfg.batch_size])
            params.zero_grad()
            with GradTape() as tape:
                loss = batch_loss(model.forward(batch), batch, cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch} (lr={cfg.lr})")
            tape.backward(loss)
            adamw_step(params, {k: params[k].grad for k in trainable}, state, cfg.lr,
                       (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
            total += value * len(batch)
        rec = evaluator(model, dev_data)
        if not math.isfinite(rec.roc_auc):
            raise DivergenceError(f"non-finite dev ROC AUC at epoch {epoch} (lr={cfg.lr})")
        report.epochs.append({
            "epoch": epoch, "train_loss": total / n, "dev_roc_auc": rec.roc_auc,
            "dev_avg_prec": rec.avg_prec, "dev_ce": rec.ce,
        })
        if stopper.update(epoch, rec.roc_auc):
            best_state = {k: params[k].data.copy() for k in trainable}
        log.debug("epoch %d loss %.5f dev auc %.5f", epoch, total / n, rec.roc_auc)
        if stopper.should_stop:
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_epochs"
    report.best_epoch = stopper.best_epoch
    report.best_dev_roc_auc = stopper.best
    report.frozen_hash_after = params.frozen_hash()
    best = model.copy()
    best.params.load_state(best_state)
    best.metadata.update({"lr": cfg.lr, "best_epoch": stopper.best_epoch, "dev_roc_auc": stopper.best,
                          "loss": cfg.loss})
    return best, report


@dataclass
class SweepResult:
    model: Model
    report: TrainReport
    reports: dict[float, TrainReport | None]
    errors: dict[float, str]

    @property
    def dev_scores(self) -> dict[float, float | None]:
        return {lr: (r.best_dev_roc_auc if r is not None else None) for lr, r in self.reports.items()}


def lr_sweep(make_model: Callable[[], Model], train_data: EncodedSet, dev_data: EncodedSet,
             cfg: TrainConfig, evaluator=evaluate) -> SweepResult:
    """Train one fresh model per candidate rate; keep the best dev ROC AUC (ties: lower rate)."""
    cfg.validate()
    best = None
    reports: dict[float, TrainReport | None] = {}
    errors: dict[float, str] = {}
    for lr in sorted(cfg.lr_set):
        try:
            m, rep = train(make_model(), train_data, dev_data, replace(cfg, lr=lr), evaluator)
        except DivergenceError as e:
            log.warning("learning rate %g diverged: %s", lr, e)
            reports[lr], errors[lr] = None, str(e)
            continue
        reports[lr] = rep
        if best is None or rep.best_dev_roc_auc > best[1].best_dev_roc_auc:
            best = (m, rep)
    if best is None:
        raise DivergenceError("every learning-rate candidate diverged")
    return SweepResult(best[0], best[1], reports, errors)


# ---------------------------------------------------------------------------
# teacher / student drivers


def teacher_spec(spec: ModelSpec) -> ModelSpec:
    return replace(spec, freeze_embeddings=False)


def train_teacher(spec: ModelSpec, train_ex: Sequence[Example], dev_ex: Sequence[Example], vocab: Vocab,
                  cfg: TrainConfig) -> tuple[Model, SweepResult]:
    """Hard-label training of a teacher whose embedding table is trainable."""
    spec = replace(teacher_spec(spec), vocab_size=len(vocab))
    cfg = replace(cfg, loss="hard_ce")
    tr, dv = EncodedSet(train_ex, vocab), EncodedSet(dev_ex, vocab)
    res = lr_sweep(lambda: Model.create(spec, cfg.seed, vocab_fingerprint=vocab.fingerprint()), tr, dv, cfg)
    return res.model, res


def student_from_teacher(teacher: Model, spec: ModelSpec, seed: int) -> Model:
    """Student whose frozen embedding table is the teacher's learned table."""
    table = teacher.params["embed.table"].data
    spec = replace(spec, vocab_size=table.shape[0], embed_dim=table.shape[1], freeze_embeddings=True)
    return Model.create(spec, seed, embedding_table=table, vocab_fingerprint=teacher.vocab_fingerprint)


def soft_label(examples: Sequence[Example], teacher: Model, vocab: Vocab) -> list[Example]:
    todo = [e for e in examples if e.teacher_logits is None]
    if not todo:
        return list(examples)
    labeled, _ = label_with_teacher(todo, teacher, vocab)
    by_pair = {e.pair: e for e in labeled}
    out = []
    for e in examples:
        if e.teacher_logits is None:
            e = by_pair.get(e.pair)
        if e is not None:
            out.append(e)
    return out


def train_student(teacher: Model, spec: ModelSpec, train_ex: Sequence[Example], dev_ex: Sequence[Example],
                  vocab: Vocab, cfg: TrainConfig, augmented: Sequence[Example] = ()) -> SweepResult:
    """LR-swept student training against hard labels or teacher logits, per ``cfg.loss``."""
    if teacher.vocab_fingerprint and teacher.vocab_fingerprint != vocab.fingerprint():
        raise VocabMismatchError("teacher checkpoint was trained with a different vocabulary")
    if cfg.loss == "hard_ce":
        if augmented:
            raise ConfigError("augmented pairs carry no hard labels; use a KD loss")
        data = list(train_ex)
    else:
        data = soft_label(train_ex, teacher, vocab) + soft_label(augmented, teacher, vocab)
    tr, dv = EncodedSet(data, vocab), EncodedSet(dev_ex, vocab)
    return lr_sweep(lambda: student_from_teacher(teacher, spec, cfg.seed), tr, dv, cfg)


def distill(teacher: Model, spec: ModelSpec, train_ex: Sequence[Example], dev_ex: Sequence[Example],
            vocab: Vocab, cfg: TrainConfig, augmented: Sequence[Example] = ()) -> SweepResult:
    if cfg.loss == "hard_ce":
        cfg = replace(cfg, loss="kd_mse")
    return train_student(teacher, spec, train_ex, dev_ex, vocab, cfg, augmented)
