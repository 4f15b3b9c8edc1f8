"""End-to-end recipes: multi-teacher adaptive distillation, the mixed single-teacher
baseline, new-language adaptation, and CSV/markdown reporting."""

import csv
import decimal
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from amtss.config import RunConfig
from amtss.core_math.optim import AdamW
from amtss.data import Corpus, mix_datasets
from amtss.distillation import fine_tune_teacher, train_epoch
from amtss.models import SHARED_HEAD, StudentModel, TeacherEnsemble, count_parameters
from amtss.scheduler import ScheduleLog, adapt_new_languages, evaluate, run_adaptive_distillation

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    name: str
    languages: list
    accuracies: dict
    param_counts: dict
    seed: int
    schedule_log: str | None = None
    extra: dict = field(default_factory=dict)
    config: dict | None = None
    wall_clock: float = 0.0

    @property
    def average(self) -> float:
        return float(np.mean([self.accuracies[lang] for lang in self.languages]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["average"] = self.average
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ExperimentResult":
        d = json.loads(Path(path).read_text())
        d.pop("average", None)
        return cls(**d)


def test_accuracies(model, corpus: Corpus, languages=None, split: str = "test") -> dict:
    return {lang: evaluate(model, lang, corpus.splits[lang][split]) for lang in languages or corpus.languages}


# --- pipeline stages --------------------------------------------------------

def train_teachers(corpus: Corpus, config: RunConfig, languages=None) -> dict:
    """One fine-tuned teacher per language."""
    out = {}
    for lang in languages or corpus.languages:
        ds = corpus.splits[lang]
        out[lang] = fine_tune_teacher(lang, config.teacher_encoder, corpus.spec.num_classes,
                                      ds.train, ds.valid, config.finetune)
    return out


def train_mixed_teacher(corpus: Corpus, config: RunConfig):
    mixed = mix_datasets(corpus.splits, corpus.spec.num_classes, seed=config.seed)
    return fine_tune_teacher(SHARED_HEAD, config.teacher_encoder, corpus.spec.num_classes,
                             mixed.train, mixed.valid, config.finetune)


def new_student(config: RunConfig, languages, num_classes: int, shared_head: bool = False) -> StudentModel:
    student = StudentModel(config.student_encoder_train, seed=config.seed, shared_head=shared_head)
    for lang in ([SHARED_HEAD] if shared_head else languages):
        student.add_language_head(lang, num_classes, seed=config.seed)
    return student


def distill_amtss(corpus: Corpus, teachers: dict, config: RunConfig, log_path=None):
    """Returns ``(student, ensemble, ScheduleState)``."""
    languages = corpus.languages
    ensemble = TeacherEnsemble([teachers[lang] for lang in languages], languages,
                               cross_teacher_mask=config.cross_teacher_mask)
    student = new_student(config, languages, corpus.spec.num_classes)
    student, state = run_adaptive_distillation(student, ensemble, corpus.splits, config.distill,
                                               config.adaptive, log_path=log_path)
    return student, ensemble, state


def matched_baseline_epochs(n_languages: int, adaptive) -> int:
    """Epochs over all languages that cost as many language passes as a full adaptive run
    (every language in epoch 1, then K per epoch up to the epoch budget)."""
    passes = n_languages + (adaptive.max_epochs - 1) * adaptive.top_k
    return max(1, round(passes / n_languages))


def distill_baseline(corpus: Corpus, mixed_teacher, config: RunConfig, log_path=None) -> StudentModel:
    """Distil from the one mixed-data teacher on every language each epoch, no language selection.

    The student has the same per-language heads as the adaptive one unless
    ``config.baseline_head == "shared"``, which serves all languages from one head.
    """
    languages = corpus.languages
    shared = config.baseline_head == "shared"
    ensemble = TeacherEnsemble([mixed_teacher], languages, trainable=False)
    student = new_student(config, languages, corpus.spec.num_classes, shared_head=shared)
    opt = AdamW(lr=config.distill.lr, weight_decay=config.distill.weight_decay)
    epochs = config.baseline_epochs or matched_baseline_epochs(len(languages), config.adaptive)
    slog = ScheduleLog(log_path)
    slog.write({"header": {"mode": "baseline", "languages": languages, "epochs": epochs,
                           "head": config.baseline_head, "lam": config.distill.lam}})
    cache = {}
    for epoch in range(1, epochs + 1):
        losses = train_epoch(student, ensemble, languages, corpus.splits, config.distill,
                             epoch=epoch, optimizer=opt, cache=cache)
        slog.write({"epoch": epoch, "loss": {k: v.to_dict() for k, v in losses.items()}})
    return student


# --- recipes ----------------------------------------------------------------

def param_counts(student, teachers: dict) -> dict:
    counts = {"student": count_parameters(student)}
    counts.update({f"teacher:{k}": count_parameters(t) for k, t in teachers.items()})
    return counts


def run_amtss(corpus: Corpus, config: RunConfig, out_dir=None, teachers=None, return_models=False):
    t0 = time.perf_counter()
    teachers = teachers or train_teachers(corpus, config)
    log_path = Path(out_dir) / "amtss_schedule.jsonl" if out_dir else None
    student, ensemble, state = distill_amtss(corpus, teachers, config, log_path)
    teacher_test = {lang: evaluate(teachers[lang], lang, corpus.splits[lang].test) for lang in corpus.languages}
    result = ExperimentResult(
        name="AMTSS", languages=corpus.languages, accuracies=test_accuracies(student, corpus),
        param_counts=param_counts(student, teachers), seed=config.seed,
        schedule_log=str(log_path) if log_path else None,
        extra={"teacher_test_acc": teacher_test, "epochs": state.epoch,
               "terminated": state.terminated_reason,
               "ranked": [r.ranked for r in state.history]},
        config=config.to_dict(), wall_clock=time.perf_counter() - t0)
    if return_models:
        return result, {"student": student, "ensemble": ensemble, "teachers": teachers, "state": state}
    return result


def run_baseline_mixed_single_teacher(corpus: Corpus, config: RunConfig, out_dir=None, teacher=None,
                                      return_models=False):
    t0 = time.perf_counter()
    teacher = teacher or train_mixed_teacher(corpus, config)
    log_path = Path(out_dir) / "baseline_schedule.jsonl" if out_dir else None
    student = distill_baseline(corpus, teacher, config, log_path)
    teacher_test = {lang: evaluate(teacher, lang, corpus.splits[lang].test) for lang in corpus.languages}
    result = ExperimentResult(
        name="Mixed-single-teacher", languages=corpus.languages,
        accuracies=test_accuracies(student, corpus),
        param_counts=param_counts(student, {SHARED_HEAD: teacher}), seed=config.seed,
        schedule_log=str(log_path) if log_path else None,
        extra={"teacher_test_acc": teacher_test}, config=config.to_dict(),
        wall_clock=time.perf_counter() - t0)
    if return_models:
        return result, {"student": student, "teacher": teacher}
    return result


def adaptation_summary(before: dict, after: dict, old, new, teacher_acc: dict) -> dict:
    old_before = float(np.mean([before[lang] for lang in old]))
    old_after = float(np.mean([after[lang] for lang in old]))
    return {"old_average_before": old_before, "old_average_after": old_after,
            "old_average_drop": old_before - old_after,
            "new_average": float(np.mean([after[lang] for lang in new])),
            "all_average": float(np.mean([after[lang] for lang in list(old) + list(new)])),
            "new_teacher_acc": {lang: teacher_acc[lang] for lang in new},
            "new_gap_to_teacher": {lang: teacher_acc[lang] - after[lang] for lang in new}}


def run_adaptation_experiment(corpus_base: Corpus, corpus_new: Corpus, config: RunConfig, out_dir=None):
    """AMTSS on the base languages, then extension to the new ones. Returns ``(before, after)``."""
    overlap = set(corpus_base.languages) & set(corpus_new.languages)
    if overlap:
        raise ValueError(f"new languages overlap the base set: {sorted(overlap)}")
    t0 = time.perf_counter()
    before, models = run_amtss(corpus_base, config, out_dir, return_models=True)
    student, ensemble = models["student"], models["ensemble"]
    new_teachers = train_teachers(corpus_new, config)
    splits = {**corpus_base.splits, **corpus_new.splits}
    log_path = Path(out_dir) / "adapt_schedule.jsonl" if out_dir else None
    student, state = adapt_new_languages(student, ensemble, [new_teachers[lang] for lang in corpus_new.languages],
                                         splits, config.distill, config.adaptive, seed=config.seed,
                                         log_path=log_path)
    merged = Corpus(corpus_base.spec, splits)
    all_langs = corpus_base.languages + corpus_new.languages
    accs = test_accuracies(student, merged, all_langs)
    teacher_acc = {**before.extra["teacher_test_acc"],
                   **{lang: evaluate(new_teachers[lang], lang, corpus_new.splits[lang].test)
                      for lang in corpus_new.languages}}
    after = ExperimentResult(
        name="AMTSS-adapted", languages=all_langs, accuracies=accs,
        param_counts=param_counts(student, {**models["teachers"], **new_teachers}), seed=config.seed,
        schedule_log=str(log_path) if log_path else None,
        extra={**adaptation_summary(before.accuracies, accs, corpus_base.languages, corpus_new.languages,
                                    teacher_acc),
               "teacher_test_acc": teacher_acc, "epochs": state.epoch,
               "terminated": state.terminated_reason, "ranked": [r.ranked for r in state.history]},
        config=config.to_dict(), wall_clock=time.perf_counter() - t0)
    return before, after


# --- reporting --------------------------------------------------------------

def _pct(x: float) -> str:
    # scale the stored value exactly; 100.0 * x can itself round
    return str((decimal.Decimal(x) * 100).quantize(decimal.Decimal("0.01"), decimal.ROUND_HALF_EVEN))


def report_table(results) -> tuple[list, list]:
    """Header and rows: one row per result, languages in first-seen order, then Average."""
    languages = []
    for r in results:
        languages += [lang for lang in r.languages if lang not in languages]
    header = ["Model"] + languages + ["Average"]
    rows = []
    for r in results:
        rows.append([r.name] + [_pct(r.accuracies[lang]) if lang in r.accuracies else "-"
                                for lang in languages] + [_pct(r.average)])
    return header, rows


def emit_report(results, out_dir) -> list:
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header, rows = report_table(results)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    (out / "report.csv").write_text(buf.getvalue())

    md = ["# Test accuracy (%)", "",
          "| " + " | ".join(header) + " |",
          "|" + "|".join("---" for _ in header) + "|"]
    md += ["| " + " | ".join(row) + " |" for row in rows]
    md += ["", "## Parameter counts", ""]
    for r in results:
        md.append(f"- {r.name} (seed {r.seed}): student {r.param_counts.get('student', '-')}; "
                  + ", ".join(f"{k} {v}" for k, v in r.param_counts.items() if k != "student"))
    (out / "report.md").write_text("\n".join(md) + "\n")
    return [out / "report.csv", out / "report.md"]


# --- multi-seed drivers -----------------------------------------------------

def run_main_comparison(seeds, make_config, out_dir=None) -> list:
    """AMTSS and the mixed single-teacher baseline per seed. ``make_config(seed)`` builds each RunConfig.

    Returns ``[(amtss_result, baseline_result), ...]``.
    """
    from amtss.data import generate_corpus
    pairs = []
    for seed in seeds:
        config = make_config(seed).validate()
        run_dir = None
        if out_dir is not None:
            run_dir = Path(out_dir) / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
        corpus = generate_corpus(config.corpus)
        amtss = run_amtss(corpus, config, run_dir)
        baseline = run_baseline_mixed_single_teacher(corpus, config, run_dir)
        log.info("seed %d: AMTSS %.4f baseline %.4f", seed, amtss.average, baseline.average)
        if run_dir is not None:
            amtss.save(run_dir / "amtss.json")
            baseline.save(run_dir / "baseline.json")
            emit_report([amtss, baseline], run_dir)
        pairs.append((amtss, baseline))
    return pairs


def run_adaptation_seeds(seeds, make_config, new_languages=("L5", "L6"), out_dir=None) -> list:
    """Base AMTSS run then adaptation to ``new_languages``, per seed. ``make_config(seed)``
    must use a corpus that contains the base and new languages."""
    from amtss.data import generate_corpus
    out = []
    for seed in seeds:
        config = make_config(seed).validate()
        corpus = generate_corpus(config.corpus)
        base = [lang for lang in corpus.languages if lang not in new_languages]
        run_dir = None
        if out_dir is not None:
            run_dir = Path(out_dir) / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
        before, after = run_adaptation_experiment(corpus.subset(base), corpus.subset(list(new_languages)),
                                                  config, run_dir)
        if run_dir is not None:
            before.save(run_dir / "before.json")
            after.save(run_dir / "after.json")
            emit_report([before, after], run_dir)
        out.append((before, after))
    return out
