"""Command-line entry point.

    amtss gen-data        --out DIR [--config FILE] [--seed N]
    amtss train-teachers  --corpus DIR --out DIR [--languages L ...] [--no-mixed]
    amtss distill         --corpus DIR --teachers DIR --out DIR [--baseline] [--margin-mode MODE]
    amtss adapt           --corpus DIR --teachers DIR --student FILE --new-languages L ... --out DIR
    amtss report          RESULT.json ... --out DIR

Exit codes: 0 success, 1 runtime or I/O failure, 2 invalid configuration or arguments.
``AMTSS_LOG`` (error, warning, info, debug) sets the log level.
"""

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from amtss.config import RunConfig, load_config
from amtss.data import generate_corpus, read_corpus, write_corpus
from amtss.errors import AMTSSError, ConfigError, ConflictError, LanguageError
from amtss.experiments import (
    ExperimentResult,
    adaptation_summary,
    emit_report,
    param_counts,
    run_amtss,
    run_baseline_mixed_single_teacher,
    test_accuracies,
    train_mixed_teacher,
    train_teachers,
)
from amtss.models import SHARED_HEAD, TeacherEnsemble, load_checkpoint, save_checkpoint
from amtss.scheduler import MARGIN_MODES, adapt_new_languages, evaluate

log = logging.getLogger("amtss")

MIXED_TEACHER = "mixed"
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(AMTSSError):
    """Bad command-line input that no config field is responsible for."""


def teacher_path(teachers_dir, language_id: str) -> Path:
    name = MIXED_TEACHER if language_id == SHARED_HEAD else language_id
    return Path(teachers_dir) / f"teacher_{name}.zip"


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.validate()


def _corpus(args, cfg: RunConfig):
    """Read the corpus directory; its stored spec overrides the config's."""
    corpus = read_corpus(args.corpus)
    return corpus, dataclasses.replace(cfg, corpus=corpus.spec).validate()


def _load_teacher(teachers_dir, language_id: str):
    path = teacher_path(teachers_dir, language_id)
    if not path.is_file():
        raise FileNotFoundError(f"missing teacher checkpoint {path}")
    model, meta, _ = load_checkpoint(path)
    if meta["kind"] != "teacher":
        raise UsageError(f"{path} is not a teacher checkpoint")
    return model


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args)
    files = write_corpus(generate_corpus(cfg.corpus), out)
    (out / "config.json").write_text(cfg.to_json())
    log.info("wrote %d corpus files to %s", len(files), out)
    return 0


def cmd_train_teachers(args) -> int:
    corpus, cfg = _corpus(args, _config(args))
    languages = args.languages or corpus.languages
    unknown = [lang for lang in languages if lang not in corpus.languages]
    if unknown:
        raise UsageError(f"languages not in corpus: {unknown}")
    out = _out(args)
    for lang, teacher in train_teachers(corpus, cfg, languages).items():
        save_checkpoint(teacher_path(out, lang), teacher, extra={"best_valid_acc": teacher.best_valid_acc})
    if not args.no_mixed:
        teacher = train_mixed_teacher(corpus.subset(languages), cfg)
        save_checkpoint(teacher_path(out, SHARED_HEAD), teacher, extra={"best_valid_acc": teacher.best_valid_acc})
    return 0


def cmd_distill(args) -> int:
    cfg = _config(args)
    if args.margin_mode:
        cfg = dataclasses.replace(cfg, adaptive=dataclasses.replace(cfg.adaptive, margin_mode=args.margin_mode))
    corpus, cfg = _corpus(args, cfg)
    out = _out(args)
    if args.baseline:
        teacher = _load_teacher(args.teachers, SHARED_HEAD)
        result, models = run_baseline_mixed_single_teacher(corpus, cfg, out, teacher=teacher, return_models=True)
        save_checkpoint(out / "student.zip", models["student"])
    else:
        teachers = {lang: _load_teacher(args.teachers, lang) for lang in corpus.languages}
        result, models = run_amtss(corpus, cfg, out, teachers=teachers, return_models=True)
        save_checkpoint(out / "student.zip", models["student"], models["ensemble"])
    result.save(out / "result.json")
    log.info("%s average test accuracy %.4f", result.name, result.average)
    return 0


def cmd_adapt(args) -> int:
    corpus, cfg = _corpus(args, _config(args))
    student, meta, logits = load_checkpoint(args.student)
    if meta["kind"] != "student" or "ensemble" not in meta:
        raise UsageError(f"{args.student} is not an adaptive-distillation student checkpoint")
    old = meta["ensemble"]["languages"]
    new = list(args.new_languages)
    clash = [lang for lang in new if lang in old]
    if clash:
        raise ConflictError(f"languages already adapted: {clash}")
    missing = [lang for lang in old + new if lang not in corpus.languages]
    if missing:
        raise LanguageError(f"languages missing from corpus: {missing}")

    ensemble = TeacherEnsemble([_load_teacher(args.teachers, lang) for lang in meta["ensemble"]["teachers"]],
                               old, trainable=meta["ensemble"]["trainable"],
                               cross_teacher_mask=meta["ensemble"]["cross_teacher_mask"])
    ensemble.weight_logits.value = logits.copy()
    new_teachers = [_load_teacher(args.teachers, lang) for lang in new]
    out = _out(args)

    before = ExperimentResult("AMTSS", old, test_accuracies(student, corpus, old),
                              param_counts(student, dict(zip(old, ensemble.teachers))), cfg.seed,
                              config=cfg.to_dict())
    datasets = {lang: corpus.splits[lang] for lang in old + new}
    student, state = adapt_new_languages(student, ensemble, new_teachers, datasets, cfg.distill, cfg.adaptive,
                                         seed=cfg.seed, log_path=out / "adapt_schedule.jsonl")
    accs = test_accuracies(student, corpus, old + new)
    teacher_acc = {lang: evaluate(ensemble.teacher_for(lang), lang, corpus.splits[lang].test) for lang in old + new}
    after = ExperimentResult(
        "AMTSS-adapted", old + new, accs,
        param_counts(student, {lang: ensemble.teacher_for(lang) for lang in old + new}), cfg.seed,
        schedule_log=str(out / "adapt_schedule.jsonl"),
        extra={**adaptation_summary(before.accuracies, accs, old, new, teacher_acc),
               "teacher_test_acc": teacher_acc, "epochs": state.epoch, "terminated": state.terminated_reason},
        config=cfg.to_dict())
    save_checkpoint(out / "student.zip", student, ensemble)
    before.save(out / "before.json")
    after.save(out / "after.json")
    emit_report([before, after], out)
    return 0


def cmd_report(args) -> int:
    if not args.results:
        raise UsageError("report needs at least one result file")
    results = [ExperimentResult.load(p) for p in args.results]
    emit_report(results, _out(args))
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amtss", description="Adaptive multi-teacher distillation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--config", help="JSON run config; omitted fields take their defaults")
        p.add_argument("--seed", type=int, help="override the config's top-level seed")
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        if corpus:
            p.add_argument("--corpus", required=True, help="corpus directory written by gen-data")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p, corpus=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teachers", help="fine-tune one teacher per language plus the mixed teacher")
    common(p)
    p.add_argument("--languages", nargs="+", help="train only these languages (default: all in the corpus)")
    p.add_argument("--no-mixed", action="store_true", help="skip the mixed-data single teacher")
    p.set_defaults(func=cmd_train_teachers)

    p = sub.add_parser("distill", help="distil a student with max-margin language selection")
    common(p)
    p.add_argument("--teachers", required=True, help="directory of teacher checkpoints")
    p.add_argument("--baseline", action="store_true",
                   help="distil from the mixed-data teacher on every language instead")
    p.add_argument("--margin-mode", choices=MARGIN_MODES, help="override adaptive.margin_mode")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("adapt", help="extend a distilled student to new languages")
    common(p)
    p.add_argument("--teachers", required=True, help="directory with teacher checkpoints for old and new languages")
    p.add_argument("--student", required=True, help="student.zip written by distill")
    p.add_argument("--new-languages", nargs="+", required=True, help="language ids to add")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("report", help="tabulate result files as CSV and markdown")
    p.add_argument("results", nargs="*", help="result JSON files")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("AMTSS_LOG", "warning").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"AMTSS_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (ConfigError, ConflictError, LanguageError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, AMTSSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
