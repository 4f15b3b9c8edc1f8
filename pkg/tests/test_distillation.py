import dataclasses
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from amtss.core_math import finite_difference_grad, ops, relative_error
from amtss.data import SyntheticCorpusSpec, generate_corpus
from amtss.distillation import (
    DistillConfig,
    FineTuneConfig,
    LossBreakdown,
    accuracy,
    distill_loss,
    distill_loss_grad,
    fine_tune_teacher,
    train_epoch,
)
from amtss.errors import ConfigError, DataError, DimensionError, LanguageError
from amtss.models import EncoderConfig, StudentModel, TeacherEnsemble, TeacherModel

# 30-digit mpmath: -ln(0.75) + 0.5 * (0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75))
DISTILL_EXAMPLE = 0.3596025905647262

TINY = EncoderConfig(vocab_size=120, embed_dim=8, num_layers=1, num_heads=2, ffn_dim=8, max_seq_len=12,
                     dropout=0.0)
MLP = EncoderConfig(kind="mean_pool_mlp", vocab_size=120, embed_dim=16, num_layers=1, ffn_dim=16,
                    max_seq_len=12, dropout=0.0)


def digest(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.value.tobytes())
    return h.hexdigest()


def test_distill_loss_hand_example():
    out = distill_loss([[0.25, 0.75]], [[0.5, 0.5]], [1], 0.5)
    assert out.total == pytest.approx(DISTILL_EXAMPLE, abs=1e-9)
    assert out.ce_term == pytest.approx(0.287682072451780927, abs=1e-12)
    assert out.kl_term == pytest.approx(0.143841036225890464, abs=1e-12)
    assert abs(out.total - (out.ce_term + 0.5 * out.kl_term)) <= 1e-12


def test_distill_loss_perfect_prediction_is_zero():
    assert distill_loss([[0.0, 1.0, 0.0]], [[0.0, 1.0, 0.0]], [1], 0.3).total == 0.0


def test_distill_loss_small_lambda_is_cross_entropy():
    s, t = np.array([[0.2, 0.8], [0.6, 0.4]]), np.array([[0.9, 0.1], [0.5, 0.5]])
    ce = ops.batch_cross_entropy(s, np.array([1, 0])).mean()
    assert distill_loss(s, t, [1, 0], 1e-12).total == pytest.approx(ce, abs=1e-11)


def test_distill_loss_errors():
    with pytest.raises(DimensionError):
        distill_loss([[0.5, 0.5]], [[0.2, 0.3, 0.5]], [0], 0.5)
    with pytest.raises(DimensionError):
        distill_loss([[0.5, 0.5]], [[0.5, 0.5]], [0, 1], 0.5)
    with pytest.raises(IndexError):
        distill_loss([[0.5, 0.5]], [[0.5, 0.5]], [2], 0.5)


def _probs(rows, cols):
    return hnp.arrays(np.float64, (rows, cols), elements=st.floats(0.01, 1.0)).map(
        lambda a: a / a.sum(axis=1, keepdims=True))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4).flatmap(lambda b: st.tuples(_probs(b, 3), _probs(b, 3))),
       st.floats(0.01, 0.49), st.floats(0.5, 0.99))
def test_distill_loss_monotone_in_lambda(st_pair, lam1, lam2):
    s, t = st_pair
    gold = np.zeros(len(s), dtype=int)
    a, b = distill_loss(s, t, gold, lam1), distill_loss(s, t, gold, lam2)
    if a.kl_term > 0:
        assert a.total < b.total


def test_loss_breakdown_merge_is_weighted_mean():
    a = LossBreakdown(1.0, 2.0, 0.5, 10)
    b = LossBreakdown(4.0, 0.0, 0.5, 30)
    m = a.merge(b)
    assert (m.ce_term, m.kl_term, m.examples_seen) == (pytest.approx(3.25), pytest.approx(0.5), 40)


@pytest.mark.parametrize("temperature", [1.0, 2.5])
def test_distill_grad_matches_finite_differences(temperature):
    rng = np.random.default_rng(0)
    for _ in range(25):
        z = rng.normal(size=(3, 4)) * 2
        target = ops.softmax(rng.normal(size=(3, 4)))
        gold = rng.integers(0, 4, size=3)
        loss, dz, dt = distill_loss_grad(z, target, gold, 0.4, temperature)

        def f_z(v):
            out = distill_loss_grad(v, target, gold, 0.4, temperature)[0]
            return out.total

        def f_t(v):
            return distill_loss_grad(z, v, gold, 0.4, temperature)[0].total

        assert relative_error(dz, finite_difference_grad(f_z, z)) < 1e-6
        assert relative_error(dt, finite_difference_grad(f_t, target.copy())) < 1e-6


def test_temperature_one_reproduces_untempered_loss():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 3))
    target = ops.softmax(rng.normal(size=(5, 3)))
    gold = rng.integers(0, 3, size=5)
    got = distill_loss_grad(z, target, gold, 0.3, 1.0)[0]
    ref = distill_loss(ops.softmax(z), target, gold, 0.3)
    assert got.total == ref.total and got.ce_term == ref.ce_term and got.kl_term == ref.kl_term


@pytest.mark.parametrize("change, field", [
    (dict(lam=0.0), "distill.lam"),
    (dict(lam=1.0), "distill.lam"),
    (dict(temperature=0.5), "distill.temperature"),
    (dict(batch_size=0), "distill.batch_size"),
])
def test_distill_config_validation(change, field):
    with pytest.raises(ConfigError) as err:
        DistillConfig(**change).validate()
    assert err.value.field == field


def test_full_scale_preset():
    cfg = DistillConfig.full_scale()
    assert (cfg.lr, cfg.batch_size, cfg.dropout) == (1e-5, 32, 0.01)


# --- teacher fine-tuning ----------------------------------------------------

def separable_corpus():
    spec = SyntheticCorpusSpec(languages=["a"], num_classes=4, vocab_size=120, seq_len=(6, 12),
                               split_sizes={"train": 160, "valid": 60, "test": 10},
                               class_signal_strength=1.0, seed=1)
    return generate_corpus(spec).splits["a"]


def test_separable_corpus_teacher_reaches_95_percent():
    ds = separable_corpus()
    t = fine_tune_teacher("a", MLP, 4, ds.train, ds.valid, FineTuneConfig(max_epochs=20, lr=1e-2, patience=5))
    assert t.best_valid_acc >= 0.95
    assert accuracy(t.predict_proba, ds.valid) == t.best_valid_acc


def test_fine_tune_descent_and_determinism():
    ds = separable_corpus()
    cfg = FineTuneConfig(max_epochs=8, patience=8, lr=3e-3)
    labels = np.array([ex.label for ex in ds.train])
    losses = []

    def full_loss(epoch, teacher):
        p = teacher.predict_proba([ex.token_ids for ex in ds.train])
        losses.append(float(ops.batch_cross_entropy(p, labels).mean()))

    a = fine_tune_teacher("a", MLP, 4, ds.train, ds.valid, cfg, callback=full_loss)
    drops = sum(later <= earlier for earlier, later in zip(losses, losses[1:]))
    assert len(losses) == 9 and drops >= 0.8 * 8
    b = fine_tune_teacher("a", MLP, 4, ds.train, ds.valid, cfg)
    assert digest(a.parameters()) == digest(b.parameters())


def test_fine_tune_empty_split():
    ds = separable_corpus()
    with pytest.raises(DataError):
        fine_tune_teacher("a", MLP, 4, [], ds.valid)


def test_accuracy_empty_split():
    with pytest.raises(DataError):
        accuracy(lambda ids, lang: None, [])


# --- train_epoch ------------------------------------------------------------

@pytest.fixture(scope="module")
def setup():
    spec = SyntheticCorpusSpec(languages=["a", "b"], num_classes=3, vocab_size=120, seq_len=(4, 10),
                               split_sizes={"train": 40, "valid": 10, "test": 10}, seed=2)
    corpus = generate_corpus(spec)
    teachers = [TeacherModel(x, MLP, 3, seed=i) for i, x in enumerate("ab")]
    return corpus, teachers


def fresh(teachers):
    student = StudentModel(TINY, seed=5)
    for lang in "ab":
        student.add_language_head(lang, 3, seed=5)
    return student, TeacherEnsemble(teachers)


def test_update_weights_flag(setup):
    corpus, teachers = setup
    cfg = DistillConfig(batch_size=8, update_weights=False)
    student, ens = fresh(teachers)
    before = ens.weight_logits.value.tobytes()
    train_epoch(student, ens, ["a", "b"], corpus.splits, cfg)
    assert ens.weight_logits.value.tobytes() == before
    student, ens = fresh(teachers)
    train_epoch(student, ens, ["a", "b"], corpus.splits, dataclasses.replace(cfg, update_weights=True))
    assert ens.weight_logits.value.tobytes() != before


def test_single_language_touches_only_its_head(setup):
    corpus, teachers = setup
    student, ens = fresh(teachers)
    enc, head_a, head_b = (digest(x) for x in (student.encoder.parameters(), student.head_parameters("a"),
                                               student.head_parameters("b")))
    teacher_hash = digest([p for t in teachers for p in t.parameters()])
    train_epoch(student, ens, ["b"], corpus.splits, DistillConfig(batch_size=8))
    assert digest(student.head_parameters("a")) == head_a
    assert digest(student.head_parameters("b")) != head_b
    assert digest(student.encoder.parameters()) != enc
    assert digest([p for t in teachers for p in t.parameters()]) == teacher_hash
    assert all(not np.any(p.grad) for t in teachers for p in t.parameters())


def test_train_epoch_deterministic(setup):
    corpus, teachers = setup
    out = []
    for _ in range(2):
        student, ens = fresh(teachers)
        losses = train_epoch(student, ens, ["a", "b"], corpus.splits, DistillConfig(batch_size=8), epoch=3)
        out.append(({k: v.to_dict() for k, v in losses.items()}, digest(student.parameters()),
                    ens.weight_logits.value.tobytes()))
    assert out[0] == out[1]
    assert out[0][0]["a"]["n"] == 40


def test_train_epoch_errors(setup):
    corpus, teachers = setup
    student, ens = fresh(teachers)
    with pytest.raises(DataError):
        train_epoch(student, ens, [], corpus.splits, DistillConfig())
    with pytest.raises(LanguageError):
        train_epoch(student, ens, ["zz"], corpus.splits, DistillConfig())
