"""Synthetic query-title corpus, augmentation, overlap filtering and teacher labeling.

The generator samples a fixed universe of products (brand, category, model
code, attribute, descriptors) and emits query-title pairs.  The clean label
is :func:`relevance_rule`: a query is relevant when enough of its words occur
in the title *and* no brand/attribute word in the query contradicts the
title's brand/attribute.  Labels are then flipped at the configured noise
rate using exact per-class counts so that the realized positive rate hits
the target.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import MASK, DegenerateInputError, EmptyInputError, Vocab, encode_pair, pad_batch

log = logging.getLogger(__name__)

BRANDS = (
    "sony", "linksys", "canon", "nikon", "samsung", "apple", "dell", "lenovo", "asus", "acer",
    "philips", "bose", "jbl", "lego", "hasbro", "nike", "adidas", "puma", "logitech", "razer",
    "netgear", "garmin", "fitbit", "dyson",
)
CATEGORIES = (
    "camera", "modem", "router", "laptop", "monitor", "headphones", "speaker", "keyboard", "mouse",
    "watch", "tablet", "phone", "printer", "charger", "cable", "lens", "tripod", "drone", "sneakers",
    "jacket", "backpack", "blender", "vacuum", "toy",
)
ATTRIBUTES = (
    "black", "white", "red", "blue", "silver", "gold", "green", "pink",
    "dvd", "bluray", "refurbished", "used", "mini", "pro", "max", "lite",
)
CODE_PREFIXES = (
    "a", "b", "c", "d", "e", "g", "k", "m", "n", "p", "r", "s", "t", "x", "z",
    "cm", "dx", "gt", "hd", "kx", "mx", "rt", "sl", "tx", "vx", "wr", "xps", "zr",
)
_SYLLABLES = (
    "ka", "lo", "mi", "ra", "su", "te", "vo", "ni", "pe", "da", "ro", "li", "ma", "zu", "fe", "go",
    "ba", "ti", "no", "sa", "ve", "ku", "ri", "do",
)
FILLER = ("new", "with", "for", "and", "edition", "pack", "set", "kit", "digital", "wireless")


class ConfigError(ValueError):
    pass


@dataclass
class Example:
    query: str
    title: str
    label: int | None = None
    teacher_logits: tuple[float, float] | None = None

    @property
    def pair(self) -> tuple[str, str]:
        return self.query, self.title


@dataclass
class CorpusSplit:
    train: list[Example]
    dev: list[Example]
    test: list[Example]

    def positive_rates(self) -> dict[str, float]:
        return {name: positive_rate(getattr(self, name)) for name in ("train", "dev", "test")}


def positive_rate(examples: Sequence[Example]) -> float:
    labels = [e.label for e in examples if e.label is not None]
    return float(np.mean(labels)) if labels else float("nan")


@dataclass
class GenConfig:
    n_train: int = 50_000
    n_dev: int = 5_000
    n_test: int = 10_000
    vocab_size: int = 600
    positive_rate: float = 0.785
    noise_rate: float = 0.08
    n_products: int = 600
    coverage_threshold: float = 0.75
    n_brands: int = len(BRANDS)
    n_categories: int = len(CATEGORIES)
    n_attributes: int = len(ATTRIBUTES)

    def validate(self):
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ConfigError("split sizes must be positive")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ConfigError(f"noise rate {self.noise_rate} must lie in [0, 0.5)")
        if not 0.0 < self.positive_rate < 1.0:
            raise ConfigError(f"positive rate {self.positive_rate} is infeasible: the overlap rule yields both classes")
        clean = clean_positive_rate(self.positive_rate, self.noise_rate)
        if not 0.0 < clean < 1.0:
            raise ConfigError(
                f"positive rate {self.positive_rate} unreachable with noise rate {self.noise_rate}"
            )
        if self.n_products < 8:
            raise ConfigError("need at least 8 products")
        for name, pool in (("brands", BRANDS), ("categories", CATEGORIES), ("attributes", ATTRIBUTES)):
            k = getattr(self, f"n_{name}")
            if not 2 <= k <= len(pool):
                raise ConfigError(f"n_{name} must lie in [2, {len(pool)}], got {k}")


def clean_positive_rate(target: float, noise: float) -> float:
    """Pre-noise positive rate p with p(1-r) + (1-p)r == target."""
    return (target - noise) / (1.0 - 2.0 * noise)


@dataclass(frozen=True)
class Product:
    brand: str
    category: str
    model: str
    attribute: str
    descriptors: tuple[str, ...]


class Lexicon:
    """Word inventory and product universe, fully determined by (config, seed)."""

    def __init__(self, cfg: GenConfig, seed: int):
        rng = np.random.default_rng([seed, 1])
        self.brand_list = BRANDS[:cfg.n_brands]
        self.category_list = CATEGORIES[:cfg.n_categories]
        self.attribute_list = ATTRIBUTES[:cfg.n_attributes]
        n_fixed = len(self.brand_list) + len(self.category_list) + len(self.attribute_list) + len(FILLER)
        n_desc = max(16, cfg.vocab_size - n_fixed - len(CODE_PREFIXES) - 110 - 5)
        reserved = set(BRANDS) | set(CATEGORIES) | set(ATTRIBUTES) | set(FILLER) | set(CODE_PREFIXES)
        descs: list[str] = []
        seen = set(reserved)
        while len(descs) < n_desc:
            k = int(rng.integers(2, 4))
            w = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), size=k))
            if w not in seen:
                seen.add(w)
                descs.append(w)
        self.descriptors = tuple(descs)
        self.brands = set(self.brand_list)
        self.attributes = set(self.attribute_list)

        products = []
        codes = set()
        while len(products) < cfg.n_products:
            prefix = CODE_PREFIXES[int(rng.integers(len(CODE_PREFIXES)))]
            digits = "".join(str(int(d)) for d in rng.integers(0, 10, size=int(rng.integers(2, 5))))
            code = prefix + digits
            if code in codes:
                continue
            codes.add(code)
            products.append(Product(
                brand=self.brand_list[int(rng.integers(len(self.brand_list)))],
                category=self.category_list[int(rng.integers(len(self.category_list)))],
                model=code,
                attribute=self.attribute_list[int(rng.integers(len(self.attribute_list)))],
                descriptors=tuple(descs[int(i)] for i in rng.choice(len(descs), size=4, replace=False)),
            ))
        self.products = products

    def vocab(self) -> Vocab:
        words = list(self.brand_list) + list(self.category_list) + list(self.attribute_list)
        words += list(FILLER) + list(self.descriptors)
        words += list(CODE_PREFIXES) + [str(d) for d in range(10)]
        words += [f"##{d}" for d in range(10)] + [f"##{d:02d}" for d in range(100)]
        return Vocab(words)


def relevance_rule(query: str, title: str, lexicon: Lexicon, threshold: float = 0.75) -> int:
    """Deterministic clean label for a pair."""
    qw = query.split()
    tw = set(title.split())
    coverage = sum(w in tw for w in qw) / len(qw)
    if coverage < threshold:
        return 0
    for slot in (lexicon.brands, lexicon.attributes):
        q_vals = {w for w in qw if w in slot}
        t_vals = {w for w in tw if w in slot}
        if q_vals and t_vals and not (q_vals & t_vals):
            return 0
    return 1


class PairGenerator:
    def __init__(self, cfg: GenConfig, seed: int, lexicon: Lexicon | None = None):
        self.cfg = cfg
        self.lexicon = lexicon or Lexicon(cfg, seed)

    def title(self, p: Product, rng) -> str:
        n_desc = int(rng.integers(1, 4))
        descs = [p.descriptors[int(i)] for i in rng.choice(4, size=n_desc, replace=False)]
        middle = descs + [p.category]
        if rng.random() < 0.4:
            middle.append(FILLER[int(rng.integers(len(FILLER)))])
        middle = [middle[int(i)] for i in rng.permutation(len(middle))]
        tail = [p.model, p.attribute] if rng.random() < 0.5 else [p.attribute, p.model]
        return " ".join([p.brand] + middle + tail)

    def _query_words(self, p: Product, title_words: Sequence[str], rng) -> list[str]:
        slots = {"brand": p.brand, "model": p.model, "category": p.category, "attribute": p.attribute}
        desc_in_title = [w for w in title_words if w in p.descriptors]
        if desc_in_title:
            slots["desc"] = desc_in_title[int(rng.integers(len(desc_in_title)))]
        names = list(slots)
        k = int(rng.integers(1, min(4, len(names)) + 1))
        chosen = set(rng.choice(names, size=k, replace=False).tolist())
        if not chosen & {"brand", "model", "category"}:
            chosen.add("category")
        order = ("brand", "desc", "model", "category", "attribute")
        return [slots[s] for s in order if s in chosen]

    def _positive(self, rng) -> tuple[str, str]:
        p = self.lexicon.products[int(rng.integers(len(self.lexicon.products)))]
        title = self.title(p, rng)
        tw = title.split()
        q = self._query_words(p, tw, rng)
        if len(q) == 3 and rng.random() < 0.35:
            absent = [d for d in p.descriptors if d not in tw]
            q.insert(1, absent[int(rng.integers(len(absent)))])
        return " ".join(q), title

    def _negative(self, rng) -> tuple[str, str]:
        products = self.lexicon.products
        p = products[int(rng.integers(len(products)))]
        title = self.title(p, rng)
        tw = title.split()
        u = rng.random()
        if u < 0.35:
            # near-miss: everything matches except the attribute
            base = [p.brand] + [w for w in tw if w in p.descriptors][:1] + [p.model, p.category]
            keep = np.sort(rng.choice(len(base), size=3, replace=False))
            q = [base[int(i)] for i in keep]
            others = [a for a in self.lexicon.attribute_list if a != p.attribute]
            q.append(others[int(rng.integers(len(others)))])
        elif u < 0.6:
            q = self._query_words(p, tw, rng)
            others = [b for b in self.lexicon.brand_list if b != p.brand]
            q = [w for w in q if w != p.brand]
            q.insert(0, others[int(rng.integers(len(others)))])
        else:
            same_cat = [o for o in products if o.category == p.category and o is not p]
            pool = same_cat if same_cat and rng.random() < 0.6 else products
            other = pool[int(rng.integers(len(pool)))]
            q = self._query_words(other, self.title(other, rng).split(), rng)
        return " ".join(q), title

    def sample(self, want_positive: bool, rng, max_tries: int = 1000) -> tuple[str, str]:
        for _ in range(max_tries):
            q, t = self._positive(rng) if want_positive else self._negative(rng)
            if self.rule(q, t) == int(want_positive):
                return q, t
        raise ConfigError("generator could not produce a pair of the requested class")

    def rule(self, query: str, title: str) -> int:
        return relevance_rule(query, title, self.lexicon, self.cfg.coverage_threshold)

    def sample_any(self, rng) -> tuple[str, str]:
        return self.sample(bool(rng.random() < 0.5), rng)


def _generate_split(gen: PairGenerator, n: int, rng, seen: set) -> list[Example]:
    cfg = gen.cfg
    n_pos_clean = int(round(clean_positive_rate(cfg.positive_rate, cfg.noise_rate) * n))
    want = np.zeros(n, dtype=bool)
    want[rng.permutation(n)[:n_pos_clean]] = True
    pairs = []
    for w in want:
        while True:
            pair = gen.sample(bool(w), rng)
            if pair not in seen:
                seen.add(pair)
                pairs.append(pair)
                break
    labels = want.astype(int)
    pos_idx = np.flatnonzero(want)
    neg_idx = np.flatnonzero(~want)
    flip = np.concatenate([
        rng.permutation(pos_idx)[: int(round(cfg.noise_rate * len(pos_idx)))],
        rng.permutation(neg_idx)[: int(round(cfg.noise_rate * len(neg_idx)))],
    ])
    labels[flip] = 1 - labels[flip]
    return [Example(q, t, int(y)) for (q, t), y in zip(pairs, labels)]


def generate_synthetic_corpus(cfg: GenConfig, seed: int) -> tuple[CorpusSplit, Vocab]:
    cfg.validate()
    gen = PairGenerator(cfg, seed)
    rng = np.random.default_rng([seed, 2])
    seen: set = set()
    train = _generate_split(gen, cfg.n_train, rng, seen)
    dev = _generate_split(gen, cfg.n_dev, rng, seen)
    test = _generate_split(gen, cfg.n_test, rng, seen)
    return CorpusSplit(train, dev, test), gen.lexicon.vocab()


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugConfig:
    strategies: dict[str, float] = field(default_factory=lambda: {"generate": 0.5, "mask": 0.25, "ngram": 0.25})
    gen: GenConfig = field(default_factory=GenConfig)
    corpus_seed: int = 7


def _mask_one(ex: Example, rng) -> Example:
    qw, tw = ex.query.split(), ex.title.split()
    words = qw + tw
    candidates = [i for i, w in enumerate(words) if w != MASK]
    i = candidates[int(rng.integers(len(candidates)))]
    words[i] = MASK
    return Example(" ".join(words[: len(qw)]), " ".join(words[len(qw):]))


def _span(words: list[str], lo: int, rng) -> list[str]:
    n = int(rng.integers(min(lo, len(words)), len(words) + 1))
    start = int(rng.integers(0, len(words) - n + 1))
    return words[start:start + n]


def _ngram(ex: Example, rng) -> Example:
    return Example(" ".join(_span(ex.query.split(), 1, rng)), " ".join(_span(ex.title.split(), 3, rng)))


def augment(train: Sequence[Example], cfg: AugConfig, n: int, seed: int,
            exclude: Iterable[tuple[str, str]] = ()) -> list[Example]:
    """``n`` distinct unlabeled pairs drawn from the configured strategy mix."""
    if n <= 0:
        return []
    names = sorted(cfg.strategies)
    weights = np.array([cfg.strategies[k] for k in names], dtype=float)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ConfigError("augmentation strategy weights must be non-negative with positive sum")
    weights /= weights.sum()
    if any(k not in ("generate", "mask", "ngram") for k in names):
        raise ConfigError(f"unknown augmentation strategy in {names}")
    if not train and any(cfg.strategies[k] > 0 for k in ("mask", "ngram") if k in cfg.strategies):
        raise ConfigError("mask/ngram strategies need a non-empty source corpus")
    gen = PairGenerator(cfg.gen, cfg.corpus_seed) if cfg.strategies.get("generate", 0) > 0 else None
    rng = np.random.default_rng([seed, 3])
    seen = {e.pair for e in train} | set(exclude)
    out: list[Example] = []
    misses = 0
    while len(out) < n:
        kind = names[int(rng.choice(len(names), p=weights))]
        if kind == "generate":
            q, t = gen.sample_any(rng)
            ex = Example(q, t)
        else:
            src = train[int(rng.integers(len(train)))]
            ex = _mask_one(src, rng) if kind == "mask" else _ngram(src, rng)
        if ex.pair in seen:
            misses += 1
            if misses > 50 * n + 1000:
                raise ConfigError(f"could not produce {n} distinct augmented pairs")
            continue
        seen.add(ex.pair)
        out.append(ex)
    return out


def filter_overlap(augmented: Sequence[Example], dev: Sequence[Example], test: Sequence[Example]) -> list[Example]:
    """Drop augmented pairs whose query or title string occurs in dev or test."""
    queries = {e.query for e in dev} | {e.query for e in test}
    titles = {e.title for e in dev} | {e.title for e in test}
    return [e for e in augmented if e.query not in queries and e.title not in titles]


def build_augmented_pool(corpus: CorpusSplit, cfg: AugConfig, n: int, seed: int) -> list[Example]:
    """Augment and overlap-filter, topping up until ``n`` survivors exist."""
    pool: list[Example] = []
    rounds = 0
    while len(pool) < n:
        need = n - len(pool)
        batch = augment(corpus.train, cfg, int(math.ceil(need * 1.5)) + 16, seed=seed * 1000 + rounds,
                        exclude=[e.pair for e in pool])
        pool.extend(filter_overlap(batch, corpus.dev, corpus.test))
        rounds += 1
        if rounds > 50:
            raise ConfigError(f"overlap filter leaves too few augmented pairs (have {len(pool)}, want {n})")
    return pool[:n]


# ---------------------------------------------------------------------------
# teacher labeling


@dataclass
class LabelSummary:
    labeled: int
    skipped: int


def label_with_teacher(examples: Sequence[Example], teacher, vocab: Vocab,
                       batch_size: int = 512) -> tuple[list[Example], LabelSummary]:
    """Attach the teacher's two output logits to every example that assembles.

    ``teacher`` needs a ``logits(batch) -> ndarray[B, 2]`` method.
    """
    encoded, kept = [], []
    skipped = 0
    for ex in examples:
        try:
            encoded.append(encode_pair(ex.query, ex.title, vocab))
            kept.append(ex)
        except (EmptyInputError, DegenerateInputError):
            skipped += 1
    out: list[Example] = []
    for start in range(0, len(kept), batch_size):
        batch = pad_batch(encoded[start:start + batch_size], vocab.pad_id)
        logits = teacher.logits(batch)
        for ex, row in zip(kept[start:start + batch_size], logits):
            out.append(replace(ex, teacher_logits=(float(row[0]), float(row[1]))))
    if skipped:
        log.warning("label_with_teacher skipped %d examples that failed to assemble", skipped)
    return out, LabelSummary(len(out), skipped)


# ---------------------------------------------------------------------------
# TSV I/O


def _check_field(s: str):
    if "\t" in s or "\n" in s:
        raise ValueError(f"field contains tab or newline: {s!r}")
    return s


def write_examples(path, examples: Sequence[Example], labeled: bool = True):
    lines = []
    for e in examples:
        fields = [_check_field(e.query), _check_field(e.title)]
        if labeled:
            if e.label is None:
                raise ValueError("labeled file requires a label on every example")
            fields.append(str(int(e.label)))
            if e.teacher_logits is not None:
                fields += [repr(float(v)) for v in e.teacher_logits]
        lines.append("\t".join(fields))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_examples(path) -> list[Example]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        f = line.split("\t")
        if len(f) == 2:
            out.append(Example(f[0], f[1]))
        elif len(f) == 3:
            out.append(Example(f[0], f[1], int(f[2])))
        elif len(f) == 5:
            label = int(f[2]) if f[2] != "" else None
            out.append(Example(f[0], f[1], label, (float(f[3]), float(f[4]))))
        elif len(f) == 4:
            out.append(Example(f[0], f[1], None, (float(f[2]), float(f[3]))))
        else:
            raise ValueError(f"{path}:{lineno}: expected 2, 3 or 5 tab-separated fields, got {len(f)}")
    return out


def write_soft_unlabeled(path, examples: Sequence[Example]):
    """query, title, logit0, logit1 for augmented pairs that carry no hard label."""
    lines = [
        "\t".join([_check_field(e.query), _check_field(e.title)] + [repr(float(v)) for v in e.teacher_logits])
        for e in examples
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def save_corpus(out_dir, corpus: CorpusSplit, vocab: Vocab, gen_cfg: GenConfig | None = None,
                seed: int | None = None):
    """train/dev/test TSVs plus vocab.txt; with ``gen_cfg`` also corpus.json so the generator can be rebuilt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        write_examples(out / f"{name}.tsv", getattr(corpus, name))
    vocab.save(out / "vocab.txt")
    if gen_cfg is not None:
        meta = {"gen": gen_config_dict(gen_cfg), "seed": seed}
        (out / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_corpus_meta(data_dir) -> tuple[GenConfig, int] | None:
    """The generator config and seed saved next to a corpus, if any."""
    p = Path(data_dir) / "corpus.json"
    if not p.exists():
        return None
    meta = json.loads(p.read_text(encoding="utf-8"))
    return GenConfig(**meta["gen"]), meta["seed"]


def load_corpus(data_dir) -> tuple[CorpusSplit, Vocab]:
    d = Path(data_dir)
    split = CorpusSplit(*(read_examples(d / f"{n}.tsv") for n in ("train", "dev", "test")))
    return split, Vocab.load(d / "vocab.txt")


def gen_config_dict(cfg: GenConfig) -> dict:
    return asdict(cfg)
