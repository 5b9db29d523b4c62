"""Single-thread CPU inference latency.

Only the forward call (embedding lookup through logits) is timed; inputs are
pre-built.  The protocol is ``warmup`` untimed calls followed by ``iters``
timed calls measured with ``time.perf_counter_ns``.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .model import TABLE_SPECS, Model, count_params, spec_from_name
from .tokenizer import CLS, RESERVED, SEP, Batch

MIN_ITERS = 100


@dataclass
class BenchResult:
    model_id: str
    seq_len: int
    batch: int
    iters: int
    warmup: int
    mean_ms: float
    median_ms: float
    p99_ms: float
    precision: str = "benchmark"

    def __post_init__(self):
        if self.iters < MIN_ITERS:
            raise ValueError(f"need at least {MIN_ITERS} timed iterations, got {self.iters}")

    def to_dict(self) -> dict:
        return asdict(self)


def bench_input(vocab_size: int, seq_len: int = 22, batch: int = 1, seed: int = 0) -> Batch:
    """A fixed random ``[CLS] q [SEP] t [SEP]`` batch with a roughly one-third query share."""
    if seq_len < 5:
        raise ValueError("seq_len must leave room for three specials and one token per side")
    rng = np.random.default_rng(seed)
    nq = max(1, (seq_len - 3) // 3)
    n_res = len(RESERVED)
    cls_id, sep_id = RESERVED.index(CLS), RESERVED.index(SEP)
    ids = rng.integers(n_res, vocab_size, size=(batch, seq_len))
    ids[:, 0] = cls_id
    ids[:, 1 + nq] = sep_id
    ids[:, -1] = sep_id
    segs = np.zeros((batch, seq_len), dtype=np.int64)
    segs[:, 2 + nq:] = 1
    return Batch(ids.astype(np.int64), segs, np.full(batch, seq_len, dtype=np.int64))


def bench_latency(model: Model, seq_len: int = 22, batch: int = 1, iters: int = 1000,
                  warmup: int = 100, model_id: str | None = None, seed: int = 0) -> BenchResult:
    if iters < MIN_ITERS:
        raise ValueError(f"need at least {MIN_ITERS} timed iterations, got {iters}")
    m = model.astype(np.float32)
    inp = bench_input(m.spec.vocab_size, seq_len, batch, seed)
    times = np.empty(iters, dtype=np.int64)
    with threadpool_limits(limits=1), ag.precision("benchmark"):
        for _ in range(warmup):
            m.forward(inp)
        for i in range(iters):
            t0 = time.perf_counter_ns()
            m.forward(inp)
            times[i] = time.perf_counter_ns() - t0
    ms = times / 1e6
    return BenchResult(
        model_id=model_id or m.spec.name or "model", seq_len=seq_len, batch=batch, iters=iters,
        warmup=warmup, mean_ms=float(ms.mean()), median_ms=float(np.median(ms)),
        p99_ms=float(np.percentile(ms, 99)),
    )


def latency_table(names=TABLE_SPECS, embed_dim: int = 768, vocab_size: int = 1000, iters: int = 1000,
                  warmup: int = 100, seq_len: int = 22, seed: int = 0) -> list[dict]:
    """Randomly initialised models (latency does not depend on weight values) benchmarked in turn."""
    rows = []
    for name in names:
        spec = spec_from_name(name, embed_dim=embed_dim, vocab_size=vocab_size)
        model = Model.create(spec, seed)
        res = bench_latency(model, seq_len=seq_len, iters=iters, warmup=warmup, model_id=name, seed=seed)
        first = spec.layers[0]
        rows.append({
            "model": name, "family": spec.family, "L": len(spec.layers), "d_h": spec.d_h,
            "d_ff": first.d_ff if first.d_ff is not None else "", "h": first.heads if first.kind == "bert" else "",
            "params": count_params(spec)["trainable"], **res.to_dict(),
        })
    return rows


LATENCY_COLUMNS = ("model", "family", "L", "d_h", "d_ff", "h", "params", "seq_len", "batch",
                   "iters", "warmup", "mean_ms", "median_ms", "p99_ms", "precision")


def format_latency_table(rows: list[dict]) -> str:
    lines = ["\t".join(LATENCY_COLUMNS)]
    for r in rows:
        cells = []
        for c in LATENCY_COLUMNS:
            v = r[c]
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"

