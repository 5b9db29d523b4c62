"""Student and teacher encoders: frozen-table embeddings, BERT-student layers,
BiLSTM layers, the BertBiLSTM hybrid, pooling and the classifier head.

All forward code is batched over a leading axis; a single sequence is a
batch of one.  Index 1 of the output logits is the "relevant" class.
"""

from __future__ import annotations

import hashlib
import math
import re
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .tokenizer import MAX_LEN, Batch, VocabMismatchError

BERT, BILSTM = "bert", "bilstm"


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    d_h: int
    d_ff: int | None = None
    heads: int = 4

    def __post_init__(self):
        if self.kind not in (BERT, BILSTM):
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind == BERT:
            if self.d_ff is None:
                object.__setattr__(self, "d_ff", self.d_h)
            if self.d_h % self.heads:
                raise SpecError(f"hidden size {self.d_h} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    embed_dim: int = 768
    vocab_size: int = 50_000
    max_len: int = MAX_LEN
    max_positions: int = 512
    n_segments: int = 2
    freeze_embeddings: bool = True
    pooling: str | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise SpecError("at least one encoder layer is required")
        if len({l.d_h for l in self.layers}) != 1:
            raise SpecError("all layers must share the same hidden size")
        if self.max_positions < self.max_len:
            raise SpecError("positional table shorter than the maximum input length")
        if self.pooling is None:
            object.__setattr__(self, "pooling", "mean" if self.layers[-1].kind == BERT else "final")
        if self.pooling not in ("mean", "cls", "final"):
            raise SpecError(f"unknown pooling {self.pooling!r}")
        if self.pooling == "final" and self.layers[-1].kind != BILSTM:
            raise SpecError("final-state pooling needs a BiLSTM top layer")

    @property
    def d_h(self) -> int:
        return self.layers[0].d_h

    @property
    def family(self) -> str:
        kinds = [l.kind for l in self.layers]
        if all(k == BERT for k in kinds):
            return "bert"
        if all(k == BILSTM for k in kinds):
            return "bilstm"
        if kinds[0] == BERT and all(k == BILSTM for k in kinds[1:]) and len(kinds) in (2, 3):
            return "bertbilstm"
        return "custom"

    @property
    def pooled_dim(self) -> int:
        return 2 * self.d_h if self.layers[-1].kind == BILSTM else self.d_h

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        return cls(**d)


_NAME_RE = re.compile(r"^(bert|bilstm|bertbilstm)-(\d+)x(\d+)(?:-ff(\d+))?(?:-h(\d+))?$")


def spec_from_name(name: str, embed_dim: int = 768, vocab_size: int = 50_000, **kw) -> ModelSpec:
    """Parse names like ``bert-1x128``, ``bilstm-3x128``, ``bertbilstm-2x128`` or ``bert-4x256-ff1024-h4``."""
    m = _NAME_RE.match(name)
    if not m:
        raise SpecError(f"cannot parse model name {name!r}")
    family, n, d = m.group(1), int(m.group(2)), int(m.group(3))
    ff = int(m.group(4)) if m.group(4) else None
    heads = int(m.group(5)) if m.group(5) else 4
    if family == "bert":
        layers = [LayerSpec(BERT, d, ff, heads)] * n
    elif family == "bilstm":
        layers = [LayerSpec(BILSTM, d)] * n
    else:
        if n not in (2, 3):
            raise SpecError("BertBiLSTM has one BERT-student layer and one or two BiLSTM layers (L=2 or 3)")
        layers = [LayerSpec(BERT, d, ff, heads)] + [LayerSpec(BILSTM, d)] * (n - 1)
    return ModelSpec(tuple(layers), embed_dim=embed_dim, vocab_size=vocab_size, name=name, **kw)


# student grid: every architecture compared in the experiments
TABLE_SPECS = (
    "bert-1x128", "bilstm-1x128", "bert-1x300", "bilstm-1x300",
    "bert-2x128", "bilstm-2x128", "bertbilstm-2x128",
    "bert-3x128", "bilstm-3x128", "bertbilstm-3x128",
)
THREE_LAYER_SPECS = ("bilstm-3x128", "bert-3x128", "bertbilstm-3x128")


# ---------------------------------------------------------------------------
# parameters


class ParamStore(Mapping):
    """Named parameter tensors; frozen entries never receive gradients."""

    def __init__(self):
        self._t: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray, frozen: bool = False):
        if name in self._t:
            raise KeyError(f"duplicate parameter {name}")
        self._t[name] = Tensor(np.ascontiguousarray(value), requires_grad=not frozen)
        if frozen:
            self.frozen.add(name)

    def __getitem__(self, name) -> Tensor:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def trainable_names(self) -> list[str]:
        return [n for n in self._t if n not in self.frozen]

    def count(self) -> dict[str, int]:
        train = sum(self._t[n].data.size for n in self.trainable_names())
        frozen = sum(self._t[n].data.size for n in self.frozen)
        return {"trainable": int(train), "frozen": int(frozen)}

    def frozen_hash(self) -> str:
        h = hashlib.sha256()
        for n in sorted(self.frozen):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._t[n].data).tobytes())
        return h.hexdigest()

    def zero_grad(self):
        for t in self._t.values():
            t.grad = None

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore()
        for n, t in self._t.items():
            data = t.data.astype(dtype) if dtype is not None else t.data.copy()
            out.add(n, data, frozen=n in self.frozen)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._t.items()}

    def load_state(self, state: Mapping[str, np.ndarray]):
        for n, arr in state.items():
            self._t[n].data = arr.copy()


def _trunc_normal(rng, shape, std=0.02):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def _fan_in(rng, n_in, n_out):
    return _trunc_normal(rng, (n_in, n_out), 1.0 / math.sqrt(n_in))


def init_params(spec: ModelSpec, seed: int, embedding_table: np.ndarray | None = None) -> ParamStore:
    """Fan-in scaled truncated-normal matrices, unit-variance token table, small position/segment
    tables, fan-in uniform LSTM matrices, zero biases, forget bias 1.

    Token rows have unit scale so that, after projection, token identity dominates the additive
    position and segment terms.
    """
    rng = np.random.default_rng(seed)
    p = ParamStore()
    d, E = spec.d_h, spec.embed_dim
    if embedding_table is not None:
        if embedding_table.shape != (spec.vocab_size, E):
            raise VocabMismatchError(
                f"embedding table shape {embedding_table.shape} != ({spec.vocab_size}, {E})"
            )
        table = np.array(embedding_table, dtype=np.float64)
    else:
        table = _trunc_normal(rng, (spec.vocab_size, E), 1.0)
    p.add("embed.table", table, frozen=spec.freeze_embeddings)
    p.add("embed.proj.w", _fan_in(rng, E, d))
    p.add("embed.proj.b", np.zeros(d))
    p.add("embed.pos", _trunc_normal(rng, (spec.max_positions, d)))
    p.add("embed.seg", _trunc_normal(rng, (spec.n_segments, d)))
    d_in = d
    for i, layer in enumerate(spec.layers):
        pre = f"layers.{i}"
        if layer.kind == BERT:
            for m in ("q", "k", "v", "o"):
                p.add(f"{pre}.attn.{m}.w", _fan_in(rng, d, d))
                p.add(f"{pre}.attn.{m}.b", np.zeros(d))
            p.add(f"{pre}.ln1.g", np.ones(d))
            p.add(f"{pre}.ln1.b", np.zeros(d))
            p.add(f"{pre}.ffn.in.w", _fan_in(rng, d, layer.d_ff))
            p.add(f"{pre}.ffn.in.b", np.zeros(layer.d_ff))
            p.add(f"{pre}.ffn.out.w", _fan_in(rng, layer.d_ff, d))
            p.add(f"{pre}.ffn.out.b", np.zeros(d))
            p.add(f"{pre}.ln2.g", np.ones(d))
            p.add(f"{pre}.ln2.b", np.zeros(d))
            d_in = d
        else:
            bound = 1.0 / math.sqrt(d)
            for direction in ("fwd", "bwd"):
                p.add(f"{pre}.{direction}.w_ih", rng.uniform(-bound, bound, (d_in, 4 * d)))
                p.add(f"{pre}.{direction}.w_hh", rng.uniform(-bound, bound, (d, 4 * d)))
                b = np.zeros(4 * d)
                b[d:2 * d] = 1.0  # forget gate; order is [i, f, o, g]
                p.add(f"{pre}.{direction}.b", b)
            d_in = 2 * d
    p.add("head.hidden.w", _fan_in(rng, spec.pooled_dim, d))
    p.add("head.hidden.b", np.zeros(d))
    p.add("head.out.w", _fan_in(rng, d, 2))
    p.add("head.out.b", np.zeros(2))
    return p


def count_params(spec: ModelSpec) -> dict[str, int]:
    """Closed-form parameter count; the embedding table counts as frozen for students."""
    d, E = spec.d_h, spec.embed_dim
    n = E * d + d + spec.max_positions * d + spec.n_segments * d
    d_in = d
    for layer in spec.layers:
        if layer.kind == BERT:
            ff = layer.d_ff
            n += 4 * (d * d + d) + 4 * d + (d * ff + ff) + (ff * d + d)
            d_in = d
        else:
            n += 2 * (4 * d * d_in + 4 * d * d + 4 * d)
            d_in = 2 * d
    n += spec.pooled_dim * d + d + 2 * d + 2
    table = spec.vocab_size * E
    if spec.freeze_embeddings:
        return {"trainable": n, "frozen": table}
    return {"trainable": n + table, "frozen": 0}


# ---------------------------------------------------------------------------
# forward pieces


def embed(params: Mapping[str, Tensor], ids: np.ndarray, segments: np.ndarray) -> Tensor:
    """Frozen-table lookup, linear projection to d_h, plus positional and segment embeddings."""
    table = params["embed.table"]
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabMismatchError(f"token id out of range for vocabulary of size {table.shape[0]}")
    T = ids.shape[-1]
    if T > params["embed.pos"].shape[0]:
        raise ag.DimensionError(f"sequence length {T} exceeds positional table")
    w, b = params["embed.proj.w"], params["embed.proj.b"]
    if table.shape[0] < ids.size:
        x = ag.embedding(ag.matmul(table, w) + b, ids)
    else:
        x = ag.matmul(ag.embedding(table, ids), w) + b
    x = x + ag.index(params["embed.pos"], slice(0, T))
    return x + ag.embedding(params["embed.seg"], segments)


def _linear(x: Tensor, params, name: str) -> Tensor:
    return ag.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def key_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def bert_student_layer(x: Tensor, params, prefix: str, heads: int, lengths: np.ndarray,
                       attention_out: list | None = None) -> Tensor:
    """Post-norm encoder layer: MHSA + residual + LN, then GELU FFN + residual + LN."""
    B, T, d = x.shape
    dh = d // heads

    def split(t):
        return ag.transpose(ag.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(x, params, f"{prefix}.attn.q"))
    k = split(_linear(x, params, f"{prefix}.attn.k"))
    v = split(_linear(x, params, f"{prefix}.attn.v"))
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = ag.softmax(scores, axis=-1, mask=key_mask(lengths, T)[:, None, None, :])
    if attention_out is not None:
        attention_out.append(attn.data)
    ctx = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
    h = ag.layer_norm(x + _linear(ctx, params, f"{prefix}.attn.o"),
                      params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    ff = _linear(ag.gelu(_linear(h, params, f"{prefix}.ffn.in")), params, f"{prefix}.ffn.out")
    return ag.layer_norm(h + ff, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


def reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-row permutation reversing the first ``lengths[b]`` positions; padding stays put."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def lstm_direction(x: Tensor, params, prefix: str, lengths: np.ndarray) -> Tensor:
    """Hidden states (B, T, d) of one LSTM direction; padded steps carry state."""
    xw = ag.matmul(x, params[f"{prefix}.w_ih"]) + params[f"{prefix}.b"]
    return ag.lstm_scan(xw, params[f"{prefix}.w_hh"], key_mask(lengths, x.shape[1]))


def bilstm_layer(x: Tensor, params, prefix: str, lengths: np.ndarray) -> tuple[Tensor, Tensor]:
    """Bidirectional LSTM over the true length of each row.

    Returns per-position outputs (B, T, 2*d_h) and the pooled final states
    ``[h_fwd(last), h_bwd(first)]`` of shape (B, 2*d_h).
    """
    T = x.shape[1]
    fwd = lstm_direction(x, params, f"{prefix}.fwd", lengths)
    rev = reverse_index(lengths, T)
    bwd_rev = lstm_direction(ag.gather_time(x, rev), params, f"{prefix}.bwd", lengths)
    final = ag.concat([ag.index(fwd, (slice(None), T - 1)), ag.index(bwd_rev, (slice(None), T - 1))], axis=-1)
    return ag.concat([fwd, ag.gather_time(bwd_rev, rev)], axis=-1), final


def encode(spec: ModelSpec, params, batch: Batch, attention_out: list | None = None) -> Tensor:
    x = embed(params, batch.ids, batch.segments)
    final = None
    for i, layer in enumerate(spec.layers):
        if layer.kind == BERT:
            x = bert_student_layer(x, params, f"layers.{i}", layer.heads, batch.lengths, attention_out)
        else:
            x, final = bilstm_layer(x, params, f"layers.{i}", batch.lengths)
    if spec.pooling == "final":
        return final
    if spec.pooling == "cls":
        return ag.index(x, (slice(None), 0))
    return ag.mean_pool(x, batch.lengths)


def classify(pooled: Tensor, params) -> Tensor:
    return _linear(ag.relu(_linear(pooled, params, "head.hidden")), params, "head.out")


# ---------------------------------------------------------------------------


@dataclass
class Model:
    spec: ModelSpec
    params: ParamStore
    vocab_fingerprint: str = ""
    metadata: dict = field(default_factory=dict)

    @classmethod
    def create(cls, spec: ModelSpec, seed: int = 0, embedding_table: np.ndarray | None = None,
               vocab_fingerprint: str = "") -> "Model":
        return cls(spec, init_params(spec, seed, embedding_table), vocab_fingerprint)

    def forward(self, batch: Batch) -> Tensor:
        return classify(encode(self.spec, self.params, batch), self.params)

    def logits(self, batch: Batch, chunk: int = 1024) -> np.ndarray:
        """Inference-only logits, computed without recording a tape."""
        outs = []
        for s in range(0, len(batch), chunk):
            sub = Batch(batch.ids[s:s + chunk], batch.segments[s:s + chunk], batch.lengths[s:s + chunk])
            T = int(sub.lengths.max())
            sub = Batch(sub.ids[:, :T], sub.segments[:, :T], sub.lengths)
            outs.append(self.forward(sub).data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, 2))

    def astype(self, dtype) -> "Model":
        return replace(self, params=self.params.copy(dtype=dtype), metadata=dict(self.metadata))

    def copy(self) -> "Model":
        return replace(self, params=self.params.copy(), metadata=dict(self.metadata))

    def check_vocab(self, fingerprint: str):
        if self.vocab_fingerprint and fingerprint and fingerprint != self.vocab_fingerprint:
            raise VocabMismatchError("model was built against a different vocabulary")
