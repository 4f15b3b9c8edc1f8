import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amtss.data import Example, SyntheticCorpusSpec, generate_corpus
from amtss.distillation import DistillConfig
from amtss.errors import ConfigError, ConflictError, DataError, LanguageError, NumericError
from amtss.models import EncoderConfig, StudentModel, TeacherEnsemble, TeacherModel
from amtss.scheduler import (
    AdaptiveConfig,
    MarginReport,
    ScheduleState,
    adapt_new_languages,
    compute_margin,
    evaluate,
    rank_margins,
    run_adaptive_distillation,
    select_topk,
    should_terminate,
)

TINY = EncoderConfig(vocab_size=120, embed_dim=8, num_layers=1, num_heads=2, ffn_dim=8, max_seq_len=10,
                     dropout=0.0)
MLP = EncoderConfig(kind="mean_pool_mlp", vocab_size=120, embed_dim=8, num_layers=1, ffn_dim=8,
                    max_seq_len=10, dropout=0.0)


def oracle_rank(margins):
    return [i for _, i in sorted((-m, i) for i, m in enumerate(margins))]


# --- margins and ranking ----------------------------------------------------

def test_compute_margin_examples():
    assert compute_margin(0.9, 0.8) == pytest.approx(0.1)
    assert compute_margin(0.9, 0.8, 0.5, "weighted_delta") == pytest.approx(0.05)
    assert compute_margin(0.9, 0.95) == pytest.approx(-0.05)
    assert compute_margin(0.9, 0.8, mode="ensemble_delta", ensemble_acc=0.85) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        compute_margin(0.9, 0.8, mode="ensemble_delta")


def test_rank_examples():
    assert rank_margins([0.1, -0.2, 0.3]) == [2, 0, 1]
    assert rank_margins([0.1, 0.1]) == [0, 1]
    with pytest.raises(NumericError):
        rank_margins([0.1, math.nan])


def test_select_topk_examples():
    assert select_topk([2, 0, 1], 2) == [2, 0]
    assert select_topk([2, 0, 1], 3) == [2, 0, 1]
    for k in (0, 4):
        with pytest.raises(ValueError):
            select_topk([2, 0, 1], k)


def test_rank_and_topk_match_oracle_on_1000_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 17))
        # a small value pool forces duplicates
        margins = rng.choice(np.round(rng.uniform(-1, 1, size=4), 2), size=n).tolist()
        k = int(rng.integers(1, n + 1))
        assert rank_margins(margins) == oracle_rank(margins)
        assert select_topk(rank_margins(margins), k) == oracle_rank(margins)[:k]


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=16))
def test_ranked_is_sorted_permutation(margins):
    r = rank_margins(margins)
    assert sorted(r) == list(range(len(margins)))
    assert all(margins[a] >= margins[b] for a, b in zip(r, r[1:]))


# --- termination ------------------------------------------------------------

def state_with(max_margin, epoch):
    rep = MarginReport(epoch, {}, {}, {}, [max_margin, max_margin - 1.0], [0, 1], [], [])
    return ScheduleState(languages=["a", "b"], epoch=epoch, history=[rep])


@pytest.mark.parametrize("below_eps", [True, False])
@pytest.mark.parametrize("epoch_vs_m", [-1, 0, 1])
def test_termination_truth_table(below_eps, epoch_vs_m):
    cfg = AdaptiveConfig(max_epochs=5, epsilon=0.005)
    state = state_with(0.001 if below_eps else 0.1, 5 + epoch_vs_m)
    stop, reason = should_terminate(state, cfg)
    if below_eps:
        assert (stop, reason) == (True, "epsilon")
    elif epoch_vs_m >= 0:
        assert (stop, reason) == (True, "max_epochs")
    else:
        assert (stop, reason) == (False, None)


def test_termination_boundary_and_empty_history():
    cfg = AdaptiveConfig(max_epochs=5, epsilon=0.005)
    assert should_terminate(state_with(0.005, 1), cfg) == (False, None)
    with pytest.raises(DataError):
        should_terminate(ScheduleState(languages=["a"]), cfg)


@pytest.mark.parametrize("change, field", [
    (dict(top_k=0), "adaptive.top_k"),
    (dict(top_k=4), "adaptive.top_k"),
    (dict(epsilon=0.0), "adaptive.epsilon"),
    (dict(max_epochs=0), "adaptive.max_epochs"),
    (dict(margin_mode="best"), "adaptive.margin_mode"),
])
def test_adaptive_config_validation(change, field):
    with pytest.raises(ConfigError) as err:
        AdaptiveConfig(**change).validate(3)
    assert err.value.field == field


# --- evaluate ---------------------------------------------------------------

class FixedModel:
    def __init__(self, table):
        self.table = table

    def predict_proba(self, token_ids, language_id=None):
        return np.array([self.table[ids] for ids in token_ids])


def test_evaluate_recount_and_ties():
    rng = np.random.default_rng(1)
    exs = [Example((i + 1,), int(rng.integers(0, 3)), "a") for i in range(50)]
    table = {ex.token_ids: rng.dirichlet(np.ones(3)) for ex in exs}
    brute = sum(int(np.argmax(table[ex.token_ids]) == ex.label) for ex in exs) / len(exs)
    assert evaluate(FixedModel(table), "a", exs) == brute
    assert evaluate(FixedModel({ex.token_ids: np.eye(3)[ex.label] for ex in exs}), "a", exs) == 1.0
    uniform = FixedModel({ex.token_ids: np.full(3, 1 / 3) for ex in exs})
    assert evaluate(uniform, "a", exs) == sum(ex.label == 0 for ex in exs) / len(exs)
    with pytest.raises(DataError):
        evaluate(uniform, "a", [])


def test_uniform_model_on_balanced_two_class_split():
    spec = SyntheticCorpusSpec(languages=["a"], num_classes=2, vocab_size=120,
                               split_sizes={"train": 0, "valid": 400, "test": 0}, seed=9)
    valid = generate_corpus(spec).splits["a"].valid
    acc = evaluate(FixedModel({ex.token_ids: np.array([0.5, 0.5]) for ex in valid}), "a", valid)
    assert acc == sum(ex.label == 0 for ex in valid) / 400
    assert abs(acc - 0.5) <= 3 * math.sqrt(0.25 / 400)


# --- the adaptive loop ------------------------------------------------------

LANGS = ["a", "b", "c", "d"]


@pytest.fixture(scope="module")
def corpus():
    spec = SyntheticCorpusSpec(languages=LANGS + ["e", "f"], num_classes=3, vocab_size=120, seq_len=(4, 8),
                               split_sizes={"train": 24, "valid": 16, "test": 8}, seed=4)
    return generate_corpus(spec)


def build(langs, seed=0):
    student = StudentModel(TINY, seed=seed)
    for lang in langs:
        student.add_language_head(lang, 3, seed=seed)
    ens = TeacherEnsemble([TeacherModel(x, MLP, 3, seed=i) for i, x in enumerate(langs)])
    return student, ens


def splits(corpus, langs):
    return {lang: corpus.splits[lang] for lang in langs}


def test_frozen_learning_runs_exactly_m_epochs(corpus, tmp_path):
    student, ens = build(LANGS)
    cfg = DistillConfig(lr=0.0, update_weights=False, batch_size=8)
    _, state = run_adaptive_distillation(student, ens, splits(corpus, LANGS), cfg,
                                         AdaptiveConfig(max_epochs=4, top_k=2, epsilon=1e-9),
                                         log_path=tmp_path / "log.jsonl")
    assert state.epoch == 4 and len(state.history) == 4 and state.terminated_reason == "max_epochs"
    first = state.history[0].student_acc
    assert all(r.student_acc == first for r in state.history)
    header, *records = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert header["header"]["max_epochs"] == 4 and header["header"]["margin_mode"] == "raw_delta"
    assert [r["epoch"] for r in records] == [1, 2, 3, 4]
    assert records[-1]["terminated"] == "max_epochs"
    for r in records:
        assert sorted(r["ranked"]) == [0, 1, 2, 3]
        assert r["active"] == r["ranked"][:2]


def test_huge_epsilon_stops_after_first_epoch(corpus):
    student, ens = build(LANGS)
    _, state = run_adaptive_distillation(student, ens, splits(corpus, LANGS), DistillConfig(batch_size=8),
                                         AdaptiveConfig(max_epochs=10, top_k=2, epsilon=10.0))
    assert (state.epoch, state.terminated_reason) == (1, "epsilon")


def test_first_epoch_trains_all_then_top_k(corpus):
    student, ens = build(LANGS)
    _, state = run_adaptive_distillation(student, ens, splits(corpus, LANGS), DistillConfig(batch_size=8),
                                         AdaptiveConfig(max_epochs=3, top_k=2, epsilon=1e-9))
    h = state.history
    assert h[0].trained == LANGS
    for prev, cur in zip(h, h[1:]):
        assert cur.trained == prev.active
        assert len(cur.trained) == 2
    for rep in h:
        assert set(rep.student_acc) == set(LANGS)
        assert [rep.margins[i] for i in rep.ranked] == sorted(rep.margins, reverse=True)


def test_adaptive_run_is_deterministic(corpus, tmp_path):
    logs = []
    for k in range(2):
        student, ens = build(LANGS)
        run_adaptive_distillation(student, ens, splits(corpus, LANGS), DistillConfig(batch_size=8),
                                  AdaptiveConfig(max_epochs=2, top_k=2, epsilon=1e-9),
                                  log_path=tmp_path / f"{k}.jsonl")
        logs.append((tmp_path / f"{k}.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_missing_head_is_rejected(corpus):
    student, ens = build(LANGS)
    with pytest.raises(LanguageError):
        run_adaptive_distillation(student, ens, splits(corpus, LANGS + ["e"]), DistillConfig(),
                                  AdaptiveConfig(max_epochs=1, top_k=1))


def test_adaptation_forces_new_languages_and_keeps_old_heads(corpus, tmp_path):
    student, ens = build(LANGS)
    run_adaptive_distillation(student, ens, splits(corpus, LANGS), DistillConfig(batch_size=8),
                              AdaptiveConfig(max_epochs=2, top_k=3, epsilon=1e-9))
    old_heads = {lang: [p.value.copy() for p in student.head_parameters(lang)] for lang in LANGS}
    new = [TeacherModel(x, MLP, 3, seed=9) for x in ("e", "f")]
    frozen = DistillConfig(lr=0.0, update_weights=False, batch_size=8)
    student, state = adapt_new_languages(student, ens, new, splits(corpus, LANGS + ["e", "f"]), frozen,
                                         AdaptiveConfig(max_epochs=3, top_k=3, epsilon=1e-9),
                                         log_path=tmp_path / "adapt.jsonl")
    assert student.languages == LANGS + ["e", "f"]
    assert ens.weight_logits.value.shape == (6, 6)
    first = state.history[0]
    assert first.trained[:2] == ["e", "f"] and len(first.trained) == 3
    for lang in LANGS:
        assert all(np.array_equal(a, b.value) for a, b in zip(old_heads[lang], student.head_parameters(lang)))
    for line in (tmp_path / "adapt.jsonl").read_text().splitlines()[1:]:
        assert sorted(json.loads(line)["ranked"]) == list(range(6))
    for lang in LANGS + ["e", "f"]:
        p = student.predict_proba([(5, 6, 7)], lang)
        assert abs(p.sum() - 1.0) <= 1e-12


def test_adaptation_errors(corpus):
    student, ens = build(LANGS)
    with pytest.raises(ConflictError):
        adapt_new_languages(student, ens, [TeacherModel("a", MLP, 3)], splits(corpus, LANGS), DistillConfig(),
                            AdaptiveConfig(max_epochs=1))
    student, ens = build(LANGS)
    with pytest.raises(LanguageError):
        adapt_new_languages(student, ens, [TeacherModel("e", MLP, 3)], splits(corpus, LANGS + ["e", "f"]),
                            DistillConfig(), AdaptiveConfig(max_epochs=1))
