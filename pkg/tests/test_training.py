import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest

from qtrdistill import autograd as ag
from qtrdistill.data import ConfigError, Example, GenConfig, generate_synthetic_corpus
from qtrdistill.metrics import EvalRecord
from qtrdistill.model import Model, ParamStore, spec_from_name
from qtrdistill.tokenizer import VocabMismatchError
from qtrdistill.training import (
    DivergenceError, EarlyStopping, EncodedSet, NonFiniteGradientError, OptimizerState, TrainConfig, adamw_step,
    decays, distill, evaluate, hard_ce_loss, kd_loss, lr_sweep, soft_label, student_from_teacher, train,
    train_student, train_teacher,
)


def _t(x, grad=False):
    return ag.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestLosses:
    @pytest.mark.parametrize("label", [0, 1])
    def test_uniform(self, label):
        assert hard_ce_loss(_t([0.0, 0.0]), label).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_saturated(self):
        assert hard_ce_loss(_t([20.0, -20.0]), 1).item() == pytest.approx(40.0, abs=1e-12)
        assert hard_ce_loss(_t([20.0, -20.0]), 0).item() == pytest.approx(0.0, abs=1e-15)

    def test_high_precision(self):
        mpmath.mp.dps = 40
        rng = np.random.default_rng(0)
        z = rng.normal(scale=5, size=(50, 2))
        y = rng.integers(0, 2, size=50)
        ref = mpmath.fsum(
            -mpmath.log(mpmath.exp(mpmath.mpf(float(r[k]))) / mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in r))
            for r, k in zip(z, y)
        ) / 50
        assert hard_ce_loss(_t(z), y).item() == pytest.approx(float(ref), rel=1e-13)

    def test_kd_mse_examples(self):
        assert kd_loss(_t([1.0, 0.0]), [0.0, 1.0]).item() == 1.0
        assert kd_loss(_t([0.3, -2.0]), [0.3, -2.0]).item() == 0.0

    def test_kd_soft_ce_uniform(self):
        assert kd_loss(_t([0.0, 0.0]), [0.0, 0.0], "kd_soft_ce").item() == pytest.approx(math.log(2), abs=1e-15)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            kd_loss(_t([0.0, 0.0]), [0.0, 0.0], "kl")

    @pytest.mark.parametrize("mode", ["hard", "kd_mse", "kd_soft_ce"])
    def test_batch_is_mean_of_examples(self, mode):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(7, 2))
        t = rng.normal(size=(7, 2))
        y = rng.integers(0, 2, size=7)

        def loss(a, b, c):
            return hard_ce_loss(_t(a), c).item() if mode == "hard" else kd_loss(_t(a), b, mode).item()

        per = [loss(z[i], t[i], y[i:i + 1]) for i in range(7)]
        assert loss(z, t, y) == pytest.approx(np.mean(per), abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, size=5)
        t = rng.normal(size=(5, 2))
        for f in (
            lambda q: hard_ce_loss(q["z"], y),
            lambda q: kd_loss(q["z"], t),
            lambda q: kd_loss(q["z"], t, "kd_soft_ce", temperature=2.0),
        ):
            assert ag.grad_check(f, {"z": _t(rng.normal(size=(5, 2)), True)}) < 1e-4

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            z = rng.normal(scale=10, size=(3, 2))
            assert hard_ce_loss(_t(z), rng.integers(0, 2, size=3)).item() >= 0
            assert kd_loss(_t(z), rng.normal(size=(3, 2))).item() >= 0


def _store(**arrays):
    p = ParamStore()
    for k, v in arrays.items():
        p.add(k.replace("_", "."), np.asarray(v, dtype=np.float64), frozen=k.startswith("frozen"))
    return p


class TestAdamW:
    def test_pure_decay(self):
        p = _store(a_w=[1.0, -2.0])
        adamw_step(p, {"a.w": np.zeros(2)}, OptimizerState(), lr=0.1, eps=1e-8, weight_decay=0.5)
        np.testing.assert_allclose(p["a.w"].data, [0.95, -1.9], rtol=0, atol=1e-15)

    def test_first_step_is_sign(self):
        p = _store(a_w=[1.0, 1.0, 1.0])
        adamw_step(p, {"a.w": np.array([3.0, -0.01, 250.0])}, OptimizerState(), lr=0.01, eps=1e-12)
        np.testing.assert_allclose(p["a.w"].data, [0.99, 1.01, 0.99], atol=1e-9)

    def test_no_gradient_no_decay_is_noop(self):
        p = _store(a_w=[1.5, 2.5], a_b=[0.5])
        before = {n: p[n].data.copy() for n in p}
        adamw_step(p, {"a.w": np.zeros(2), "a.b": np.zeros(1)}, OptimizerState(), lr=0.1, weight_decay=0.0)
        assert all(np.array_equal(p[n].data, before[n]) for n in p)

    def test_bias_not_decayed(self):
        p = _store(a_b=[1.0])
        adamw_step(p, {"a.b": np.zeros(1)}, OptimizerState(), lr=0.1, weight_decay=0.5)
        assert p["a.b"].data[0] == 1.0

    def test_frozen_untouched(self):
        p = _store(frozen_w=[1.0], a_w=[1.0])
        adamw_step(p, {"frozen.w": np.ones(1), "a.w": np.ones(1)}, OptimizerState(), lr=0.1, weight_decay=0.1)
        assert p["frozen.w"].data[0] == 1.0 and p["a.w"].data[0] != 1.0

    def test_nonfinite_names_parameter(self):
        p = _store(a_w=[1.0])
        with pytest.raises(NonFiniteGradientError, match="a.w"):
            adamw_step(p, {"a.w": np.array([np.nan])}, OptimizerState(), lr=0.1)
        assert p["a.w"].data[0] == 1.0

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        w0 = rng.normal(size=4)
        grads = rng.normal(size=(5, 4))
        p = _store(a_w=w0)
        st = OptimizerState()
        m = v = np.zeros(4)
        w = w0.copy()
        lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.01
        for t, g in enumerate(grads, 1):
            adamw_step(p, {"a.w": g}, st, lr, (b1, b2), eps, wd)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        np.testing.assert_allclose(p["a.w"].data, w, rtol=1e-14)

    @pytest.mark.parametrize("name,expected", [
        ("layers.0.attn.q.w", True), ("layers.0.fwd.w_ih", True), ("layers.0.fwd.w_hh", True),
        ("layers.0.attn.q.b", False), ("layers.0.ln1.g", False), ("embed.table", False), ("embed.pos", False),
    ])
    def test_decay_set(self, name, expected):
        assert decays(name) is expected


class TestEarlyStopping:
    def test_constant_scores(self):
        es = EarlyStopping(30)
        epoch = 0
        while not es.should_stop:
            epoch += 1
            es.update(epoch, 0.7)
        assert epoch == 31 and es.best_epoch == 1

    def test_improvement_resets(self):
        es = EarlyStopping(2)
        for e, s in enumerate([0.5, 0.5, 0.6, 0.6, 0.6], 1):
            es.update(e, s)
        assert es.best_epoch == 3 and es.should_stop


# ---------------------------------------------------------------------------
# training loop on a tiny corpus

TINY_GEN = GenConfig(n_train=240, n_dev=80, n_test=80, vocab_size=200, n_products=40,
                     n_brands=6, n_categories=6, n_attributes=6)


@pytest.fixture(scope="module")
def tiny():
    corpus, vocab = generate_synthetic_corpus(TINY_GEN, 1)
    spec = spec_from_name("bert-1x8-ff16-h2", embed_dim=8, vocab_size=len(vocab))
    return corpus, vocab, spec, EncodedSet(corpus.train, vocab), EncodedSet(corpus.dev, vocab)


def _scripted(scores):
    it = iter(scores)

    def evaluator(model, data):
        return EvalRecord(next(it), 0.5, 0.7, len(data))

    return evaluator


def _cfg(**kw):
    base = dict(loss="hard_ce", lr=1e-3, lr_set=(1e-3,), max_epochs=5, batch_size=64)
    base.update(kw)
    base.setdefault("patience", base["max_epochs"])
    return TrainConfig(**base)


class TestTrain:
    def test_constant_dev_auc_stops_after_patience(self, tiny):
        _, _, spec, tr, dv = tiny
        _, rep = train(Model.create(spec, 0), tr, dv, _cfg(max_epochs=100, patience=30),
                       evaluator=_scripted([0.6] * 100))
        assert len(rep.epochs) == 31 and rep.stop_reason == "patience" and rep.best_epoch == 1

    def test_improving_runs_to_max_epochs(self, tiny):
        _, _, spec, tr, dv = tiny
        _, rep = train(Model.create(spec, 0), tr, dv, _cfg(max_epochs=6, patience=2),
                       evaluator=_scripted([0.5 + 0.01 * i for i in range(6)]))
        assert len(rep.epochs) == 6 and rep.stop_reason == "max_epochs" and rep.best_epoch == 6

    def test_deterministic(self, tiny):
        _, _, spec, tr, dv = tiny
        runs = [train(Model.create(spec, 4), tr, dv, _cfg(seed=2)) for _ in range(2)]
        assert runs[0][1].to_jsonl() == runs[1][1].to_jsonl()
        for n in runs[0][0].params:
            assert np.array_equal(runs[0][0].params[n].data, runs[1][0].params[n].data)

    def test_best_checkpoint_has_best_dev_auc(self, tiny):
        _, _, spec, tr, dv = tiny
        best, rep = train(Model.create(spec, 1), tr, dv, _cfg(max_epochs=6, lr=3e-3))
        recorded = max(e["dev_roc_auc"] for e in rep.epochs)
        assert rep.best_dev_roc_auc == recorded
        assert rep.epochs[rep.best_epoch - 1]["dev_roc_auc"] == recorded
        assert evaluate(best, dv).roc_auc == pytest.approx(recorded, abs=1e-12)

    def test_frozen_table_unchanged(self, tiny):
        _, _, spec, tr, dv = tiny
        m = Model.create(spec, 0)
        before = m.params["embed.table"].data.copy()
        best, rep = train(m, tr, dv, _cfg(max_epochs=2))
        assert rep.frozen_hash_before == rep.frozen_hash_after
        assert np.array_equal(best.params["embed.table"].data, before)

    def test_empty_sets(self, tiny):
        corpus, vocab, spec, tr, _ = tiny
        with pytest.raises(ConfigError):
            train(Model.create(spec, 0), tr, EncodedSet([], vocab), _cfg())

    def test_kd_needs_teacher_logits(self, tiny):
        _, _, spec, tr, dv = tiny
        with pytest.raises(ConfigError):
            train(Model.create(spec, 0), tr, dv, _cfg(loss="kd_mse"))

    def test_report_jsonl(self, tiny):
        _, _, spec, tr, dv = tiny
        _, rep = train(Model.create(spec, 0), tr, dv, _cfg(max_epochs=2))
        lines = rep.to_jsonl().splitlines()
        assert len(lines) == 3 and '"record": "summary"' in lines[0]

    @pytest.mark.parametrize("kw", [{"loss": "mse"}, {"patience": 0}, {"lr_set": ()}, {"hard_weight": 2.0},
                                    {"max_epochs": 2, "patience": 3}])
    def test_bad_config(self, tiny, kw):
        _, _, spec, tr, dv = tiny
        with pytest.raises(ConfigError):
            train(Model.create(spec, 0), tr, dv, _cfg(**kw))


# Adam caps each step near lr, so only an absurd rate overflows to non-finite values.
@pytest.mark.filterwarnings("ignore::RuntimeWarning")
class TestSweep:
    def test_divergent_rate_excluded(self, tiny):
        _, _, spec, tr, dv = tiny
        res = lr_sweep(lambda: Model.create(spec, 0), tr, dv, _cfg(lr_set=(1e-3, 1e300), max_epochs=2))
        assert res.report.lr == 1e-3
        assert res.reports[1e300] is None and 1e300 in res.errors

    def test_all_divergent(self, tiny):
        _, _, spec, tr, dv = tiny
        with pytest.raises(DivergenceError):
            lr_sweep(lambda: Model.create(spec, 0), tr, dv, _cfg(lr_set=(1e300,), max_epochs=2))

    def test_three_candidates_reported(self, tiny):
        _, _, spec, tr, dv = tiny
        res = lr_sweep(lambda: Model.create(spec, 0), tr, dv, _cfg(lr_set=(1e-3, 5e-5, 1e-4), max_epochs=2))
        assert sorted(res.dev_scores) == [5e-5, 1e-4, 1e-3]
        assert res.report.best_dev_roc_auc == max(res.dev_scores.values())

    def test_tie_prefers_lower_rate(self, tiny):
        _, _, spec, tr, dv = tiny
        res = lr_sweep(lambda: Model.create(spec, 0), tr, dv, _cfg(lr_set=(1e-2, 1e-3), max_epochs=2),
                       evaluator=lambda m, d: EvalRecord(0.6, 0.5, 0.7, len(d)))
        assert res.report.lr == 1e-3

    def test_single_candidate_equals_train(self, tiny):
        _, _, spec, tr, dv = tiny
        res = lr_sweep(lambda: Model.create(spec, 0), tr, dv, _cfg(max_epochs=2))
        _, rep = train(Model.create(spec, 0), tr, dv, _cfg(max_epochs=2))
        assert res.report.to_jsonl() == rep.to_jsonl()


@pytest.fixture(scope="module")
def teacher(tiny):
    corpus, vocab, spec, _, _ = tiny
    model, _ = train_teacher(spec, corpus.train, corpus.dev, vocab, _cfg(max_epochs=2))
    return model


class TestStudents:
    def test_teacher_table_is_trainable_and_student_frozen(self, teacher, tiny):
        assert "embed.table" not in teacher.params.frozen
        student = student_from_teacher(teacher, tiny[2], 0)
        assert student.params.frozen == {"embed.table"}
        assert np.array_equal(student.params["embed.table"].data, teacher.params["embed.table"].data)

    def test_soft_label_keeps_hard_labels(self, teacher, tiny):
        corpus, vocab = tiny[0], tiny[1]
        out = soft_label(corpus.train[:10], teacher, vocab)
        assert [e.label for e in out] == [e.label for e in corpus.train[:10]]
        assert all(e.teacher_logits is not None for e in out)

    def test_distill_with_augmented(self, teacher, tiny):
        corpus, vocab, spec, _, _ = tiny
        aug = [Example(e.query, e.title + " new") for e in corpus.train[:30]]
        res = distill(teacher, spec, corpus.train, corpus.dev, vocab, _cfg(loss="kd_mse", max_epochs=2), aug)
        assert res.report.frozen_hash_before == res.report.frozen_hash_after

    def test_hard_ce_rejects_augmented(self, teacher, tiny):
        corpus, vocab, spec, _, _ = tiny
        with pytest.raises(ConfigError):
            train_student(teacher, spec, corpus.train, corpus.dev, vocab, _cfg(), [Example("a", "b")])

    def test_vocab_mismatch(self, teacher, tiny):
        corpus, vocab, spec, _, _ = tiny
        other = type(vocab)(vocab.tokens[:-1])
        with pytest.raises(VocabMismatchError):
            distill(teacher, spec, corpus.train, corpus.dev, other, _cfg(loss="kd_mse"))

    def test_from_flat(self):
        cfg = TrainConfig.from_flat({"lr_set": "1e-3,2e-3", "max_epochs": "7", "loss": "hard_ce", "junk": "x"})
        assert cfg.lr_set == (1e-3, 2e-3) and cfg.max_epochs == 7 and cfg.loss == "hard_ce"


class TestSelfDistillation:
    def test_student_matches_teacher(self):
        gen = GenConfig(n_train=2000, n_dev=500, n_test=100, vocab_size=200, n_products=60,
                        n_brands=8, n_categories=8, n_attributes=8)
        corpus, vocab = generate_synthetic_corpus(gen, 3)
        spec = spec_from_name("bert-1x32-h4", embed_dim=32, vocab_size=len(vocab))
        cfg = TrainConfig(lr_set=(1e-3,), max_epochs=30, patience=8, batch_size=64)
        teacher, tres = train_teacher(spec, corpus.train, corpus.dev, vocab, cfg)
        sres = distill(teacher, spec, corpus.train, corpus.dev, vocab, replace(cfg, max_epochs=40, patience=10))
        assert tres.report.best_dev_roc_auc > 0.65
        assert sres.report.best_dev_roc_auc >= tres.report.best_dev_roc_auc - 0.01
