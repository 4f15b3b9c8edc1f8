"""Max-margin adaptive training loop and new-language adaptation.

Each epoch trains the student on the active languages, evaluates it on every
language's validation split, ranks languages by how far the student trails the
teacher (the margin), keeps the top K as the next active set, and stops once the
largest margin drops below epsilon or the epoch budget runs out.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from amtss.core_math import ops
from amtss.core_math.optim import AdamW
from amtss.distillation import DistillConfig, accuracy, teacher_logit_cache, train_epoch
from amtss.errors import ConfigError, ConflictError, DataError, LanguageError, NumericError
from amtss.models import StudentModel, TeacherEnsemble, TeacherModel

log = logging.getLogger(__name__)

MARGIN_MODES = ("raw_delta", "weighted_delta", "ensemble_delta")


@dataclass
class AdaptiveConfig:
    max_epochs: int = 200
    top_k: int = 3
    epsilon: float = 0.005
    margin_mode: str = "raw_delta"

    def validate(self, n_languages: int | None = None, prefix: str = "adaptive") -> "AdaptiveConfig":
        if self.max_epochs < 1:
            raise ConfigError(f"{prefix}.max_epochs", "must be >= 1")
        if self.top_k < 1 or (n_languages is not None and self.top_k > n_languages):
            raise ConfigError(f"{prefix}.top_k", f"must lie in [1, {n_languages or 'n'}], got {self.top_k}")
        if not self.epsilon > 0:
            raise ConfigError(f"{prefix}.epsilon", "must be > 0")
        if self.margin_mode not in MARGIN_MODES:
            raise ConfigError(f"{prefix}.margin_mode", f"must be one of {MARGIN_MODES}")
        return self


@dataclass
class MarginReport:
    epoch: int
    student_acc: dict
    teacher_acc: dict
    weights: dict
    margins: list
    ranked: list
    trained: list
    active: list
    losses: dict = field(default_factory=dict)

    @property
    def max_margin(self) -> float:
        return max(self.margins)


@dataclass
class ScheduleState:
    languages: list
    epoch: int = 0
    active_languages: list = field(default_factory=list)
    history: list = field(default_factory=list)
    terminated_reason: str | None = None


def evaluate(model, language_id: str, split) -> float:
    """Argmax accuracy; ties go to the lowest class index."""
    return accuracy(model.predict_proba, split, language_id)


def compute_margin(teacher_acc: float, student_acc: float, weight: float = 1.0,
                   mode: str = "raw_delta", ensemble_acc: float | None = None) -> float:
    if mode == "raw_delta":
        return teacher_acc - student_acc
    if mode == "weighted_delta":
        return weight * (teacher_acc - student_acc)
    if mode == "ensemble_delta":
        if ensemble_acc is None:
            raise ValueError("ensemble_delta needs the ensemble accuracy")
        return ensemble_acc - student_acc
    raise ValueError(f"unknown margin mode {mode!r}")


def rank_margins(margins) -> list:
    """Indices by descending margin; equal margins keep ascending index order."""
    margins = [float(m) for m in margins]
    if any(math.isnan(m) for m in margins):
        raise NumericError("NaN margin")
    return sorted(range(len(margins)), key=lambda i: -margins[i])


def select_topk(ranked, k: int) -> list:
    if not 1 <= k <= len(ranked):
        raise ValueError(f"K={k} out of range for {len(ranked)} languages")
    return list(ranked[:k])


def should_terminate(state: ScheduleState, config: AdaptiveConfig):
    """``(stop, reason)`` with reason ``"epsilon"``, ``"max_epochs"`` or None."""
    if not state.history:
        raise DataError("no margin report yet")
    if state.history[-1].max_margin < config.epsilon:
        return True, "epsilon"
    if state.epoch >= config.max_epochs:
        return True, "max_epochs"
    return False, None


class ScheduleLog:
    """JSON-lines log: one ``{"header": ...}`` record, then one record per epoch.

    The first write truncates the file.
    """

    def __init__(self, path=None):
        self.path = path
        self.lines = []

    def write(self, record: dict) -> None:
        line = json.dumps(record, separators=(",", ":"))
        if self.path is not None:
            with open(self.path, "a" if self.lines else "w") as fh:
                fh.write(line + "\n")
        self.lines.append(line)


def _ensemble_accuracy(ensemble: TeacherEnsemble, lang: str, examples, cache: dict) -> float:
    if lang not in cache:
        cache[lang] = ops.softmax(teacher_logit_cache(ensemble, examples))
    target = ensemble.combine(cache[lang], lang)
    gold = np.array([ex.label for ex in examples])
    return float(np.mean(np.argmax(target, axis=1) == gold))


def run_adaptive_distillation(student: StudentModel, ensemble: TeacherEnsemble, datasets: dict,
                              distill_config: DistillConfig, adaptive_config: AdaptiveConfig, *,
                              initial_active=None, log_path=None, log_header: dict | None = None):
    """Train ``student`` from the weighted teachers with max-margin language selection.

    ``datasets`` maps language id to DatasetSplit; its key order fixes the language
    indices used in rankings. Returns ``(student, ScheduleState)``.
    """
    languages = list(datasets)
    distill_config.validate()
    adaptive_config.validate(len(languages))
    for lang in languages:
        student.head_for(lang)
        ensemble.column(lang)
        if not datasets[lang].valid:
            raise DataError(f"empty valid split for {lang!r}")

    teacher_acc = {lang: evaluate(ensemble.teacher_for(lang), lang, datasets[lang].valid)
                   for lang in languages}
    state = ScheduleState(languages=languages)
    state.active_languages = list(initial_active) if initial_active is not None else list(languages)
    for lang in state.active_languages:
        if lang not in datasets:
            raise LanguageError(f"active language {lang!r} has no dataset")

    optimizer = AdamW(lr=distill_config.lr, weight_decay=distill_config.weight_decay)
    weight_optimizer = AdamW(lr=distill_config.weight_lr if distill_config.weight_lr is not None
                             else distill_config.lr, weight_decay=0.0)
    train_cache, valid_cache = {}, {}
    slog = ScheduleLog(log_path)
    slog.write({"header": {"languages": languages, **asdict(adaptive_config),
                           "lam": distill_config.lam, "update_weights": distill_config.update_weights,
                           "teacher_acc": teacher_acc, **(log_header or {})}})

    while True:
        state.epoch += 1
        trained = list(state.active_languages)
        losses = train_epoch(student, ensemble, trained, datasets, distill_config, epoch=state.epoch,
                             optimizer=optimizer, weight_optimizer=weight_optimizer, cache=train_cache)
        w = ensemble.effective_weights()
        student_acc, weights, margins = {}, {}, []
        for lang in languages:
            i = ensemble.column(lang)
            student_acc[lang] = evaluate(student, lang, datasets[lang].valid)
            weights[lang] = float(w[i, i]) if i < w.shape[0] else float(w[0, i])
            ens_acc = None
            if adaptive_config.margin_mode == "ensemble_delta":
                ens_acc = _ensemble_accuracy(ensemble, lang, datasets[lang].valid, valid_cache)
            margins.append(compute_margin(teacher_acc[lang], student_acc[lang], weights[lang],
                                          adaptive_config.margin_mode, ens_acc))
        ranked = rank_margins(margins)
        active_idx = select_topk(ranked, adaptive_config.top_k)
        state.active_languages = [languages[i] for i in active_idx]
        report = MarginReport(state.epoch, student_acc, dict(teacher_acc), weights, margins, ranked,
                              trained, list(state.active_languages),
                              {k: v.to_dict() for k, v in losses.items()})
        state.history.append(report)
        stop, reason = should_terminate(state, adaptive_config)
        if stop:
            state.terminated_reason = reason
        slog.write({"epoch": state.epoch, "ranked": ranked, "margins": margins,
                    "active": active_idx, "trained": [languages.index(x) for x in trained],
                    "student_acc": student_acc, "weights": weights, "terminated": reason})
        log.info("epoch %d ranked=%s max_margin=%.4f", state.epoch, ranked, max(margins))
        if stop:
            return student, state


def adapt_new_languages(student: StudentModel, ensemble: TeacherEnsemble, new_teachers: list,
                        datasets: dict, distill_config: DistillConfig, adaptive_config: AdaptiveConfig,
                        *, seed: int = 0, log_path=None):
    """Extend a distilled student to new languages without restarting its encoder.

    New heads and ensemble rows/columns are added, the new languages are treated
    as max-margin and forced into the first active set (the remaining K - m slots
    go to the old languages with the largest current margin), and the adaptive
    loop then continues over all languages. ``datasets`` must cover old and new.
    """
    new_langs = [t.language_id for t in new_teachers]
    for t in new_teachers:
        if not isinstance(t, TeacherModel):
            raise TypeError("new_teachers must be TeacherModel instances")
        if t.language_id in student.heads or t.language_id in ensemble.languages:
            raise ConflictError(f"language {t.language_id!r} already present")
    missing = [lang for lang in datasets if lang not in ensemble.languages and lang not in new_langs]
    if missing:
        raise LanguageError(f"no teacher for languages {missing}")
    old_langs = [lang for lang in datasets if lang not in new_langs]

    for t in new_teachers:
        student.add_language_head(t.language_id, t.num_classes, seed=seed)
    ensemble.extend(new_teachers)

    k_rest = adaptive_config.top_k - len(new_langs)
    initial = list(new_langs)
    if k_rest > 0 and old_langs:
        margins = [evaluate(ensemble.teacher_for(lang), lang, datasets[lang].valid)
                   - evaluate(student, lang, datasets[lang].valid) for lang in old_langs]
        initial += [old_langs[i] for i in rank_margins(margins)[:k_rest]]
    return run_adaptive_distillation(student, ensemble, datasets, distill_config, adaptive_config,
                                     initial_active=initial, log_path=log_path,
                                     log_header={"new_languages": new_langs})
