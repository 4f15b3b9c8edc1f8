"""Run configuration: one JSON document, every default materialised on save."""

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields

from amtss.data import SyntheticCorpusSpec, adaptation_spec, ae_like_spec, xnli_like_spec
from amtss.distillation import DistillConfig, FineTuneConfig
from amtss.errors import ConfigError
from amtss.models import EncoderConfig, student_encoder_config, teacher_encoder_config
from amtss.scheduler import AdaptiveConfig

CORPUS_PRESETS = {"ae": ae_like_spec, "xnli": xnli_like_spec, "adaptation": adaptation_spec}


@dataclass
class RunConfig:
    # base spec the "corpus" section of a config file is applied on top of
    corpus_preset: str = "ae"
    corpus: SyntheticCorpusSpec = field(default_factory=ae_like_spec)
    teacher_encoder: EncoderConfig = field(
        default_factory=lambda: teacher_encoder_config(kind="mean_pool_mlp"))
    student_encoder: EncoderConfig = field(default_factory=student_encoder_config)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    # epochs over every language for the single-teacher baseline; None matches the
    # adaptive schedule's budget of language passes
    baseline_epochs: int | None = None
    # "per_language" keeps baseline and adaptive students the same size; "shared" is one head
    baseline_head: str = "per_language"
    cross_teacher_mask: bool = False
    output_dir: str = "runs"
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.corpus_preset not in CORPUS_PRESETS:
            raise ConfigError("corpus_preset", f"must be one of {sorted(CORPUS_PRESETS)}")
        self.corpus.validate("corpus")
        self.teacher_encoder.validate("teacher_encoder")
        self.student_encoder.validate("student_encoder")
        self.finetune.validate("finetune")
        self.distill.validate("distill")
        self.adaptive.validate(len(self.corpus.languages), "adaptive")
        for name in ("teacher_encoder", "student_encoder"):
            if getattr(self, name).vocab_size != self.corpus.vocab_size:
                raise ConfigError(f"{name}.vocab_size", "must equal corpus.vocab_size")
            if getattr(self, name).max_seq_len < self.corpus.seq_len[1]:
                raise ConfigError(f"{name}.max_seq_len", "shorter than corpus.seq_len max")
        if self.baseline_head not in ("per_language", "shared"):
            raise ConfigError("baseline_head", "must be 'per_language' or 'shared'")
        if self.baseline_epochs is not None and self.baseline_epochs < 1:
            raise ConfigError("baseline_epochs", "must be >= 1")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the top-level seed pushed into every seeded sub-config."""
        return dataclasses.replace(
            self, seed=seed,
            corpus=dataclasses.replace(self.corpus, seed=seed),
            finetune=dataclasses.replace(self.finetune, seed=seed),
            distill=dataclasses.replace(self.distill, seed=seed))

    @property
    def student_encoder_train(self) -> EncoderConfig:
        return dataclasses.replace(self.student_encoder, dropout=self.distill.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"] = self.corpus.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        sections = {"corpus": SyntheticCorpusSpec, "teacher_encoder": EncoderConfig,
                    "student_encoder": EncoderConfig, "finetune": FineTuneConfig,
                    "distill": DistillConfig, "adaptive": AdaptiveConfig}
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown field")
        seed = raw.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed", "must be an integer")
        preset = raw.get("corpus_preset", "ae")
        if preset not in CORPUS_PRESETS:
            raise ConfigError("corpus_preset", f"must be one of {sorted(CORPUS_PRESETS)}")
        base = cls(corpus_preset=preset, corpus=CORPUS_PRESETS[preset]()).with_seed(seed)
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                kwargs[key] = _section(key, sections[key], value, getattr(base, key))
            else:
                kwargs[key] = value
        cfg = dataclasses.replace(base, **kwargs)
        return cfg.validate()


def desk_config(seed: int = 0, max_epochs: int = 30, **kw) -> RunConfig:
    """Default presets with an epoch budget that fits a single CPU core in minutes."""
    cfg = RunConfig(**kw).with_seed(seed)
    return dataclasses.replace(cfg, adaptive=dataclasses.replace(cfg.adaptive, max_epochs=max_epochs))


def desk_adaptation_config(seed: int = 0, max_epochs: int = 20) -> RunConfig:
    """Seven-language corpus (five base + two new) with a shorter budget per phase."""
    return desk_config(seed, max_epochs, corpus_preset="adaptation", corpus=adaptation_spec())


def _section(name: str, cls, value, default):
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a JSON object")
    known = {f.name for f in fields(cls)}
    for key in value:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    try:
        return dataclasses.replace(default, **value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<json line {exc.lineno}>", exc.msg) from None
    return RunConfig.from_dict(raw)
