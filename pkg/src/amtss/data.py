"""Synthetic multilingual classification corpora with skewed label distributions.

Vocabulary layout (global ids)::

    0                      pad
    [1, 1 + S)             shared range, S = round(shared_fraction * (vocab_size - 1))
    [1 + S + k P, ...)     private range of the language in slot k, P tokens each

Each language draws, from its own substream, a few private keywords and a few
shared-range keywords per class. The shared keywords are assigned to classes
independently per language, so the same shared token can point to different
classes in different languages; a model that ignores the language of its input
pays for it.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from amtss.errors import ConfigError, DataError
from amtss.rng import substream

SPLITS = ("train", "valid", "test")
SPEC_FILE = "corpus_spec.json"


@dataclass(frozen=True)
class Example:
    token_ids: tuple
    label: int
    language_id: str

    def to_json(self) -> str:
        return json.dumps({"lang": self.language_id, "label": self.label, "tokens": list(self.token_ids)},
                          separators=(",", ":"))


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __getitem__(self, split: str) -> list:
        if split not in SPLITS:
            raise KeyError(split)
        return getattr(self, split)


@dataclass
class SyntheticCorpusSpec:
    languages: list = field(default_factory=lambda: [f"L{i}" for i in range(5)])
    num_classes: int = 20
    vocab_size: int = 1000
    shared_fraction: float = 0.2
    language_slots: int = 8
    seq_len: tuple = (8, 32)
    split_sizes: dict = field(default_factory=lambda: {"train": 400, "valid": 50, "test": 50})
    # language -> probability vector; languages not listed are uniform
    label_distribution: dict = field(default_factory=dict)
    class_signal_strength: float = 0.3
    shared_signal_fraction: float = 0.8
    keywords_per_class: int = 2
    seed: int = 0

    def __post_init__(self):
        self.seq_len = tuple(self.seq_len)
        self.languages = list(self.languages)

    # -- layout --
    @property
    def shared_size(self) -> int:
        return int(round(self.shared_fraction * (self.vocab_size - 1)))

    @property
    def private_size(self) -> int:
        return (self.vocab_size - 1 - self.shared_size) // self.language_slots

    def shared_range(self) -> range:
        return range(1, 1 + self.shared_size)

    def private_range(self, language_id: str) -> range:
        k = self.languages.index(language_id)
        start = 1 + self.shared_size + k * self.private_size
        return range(start, start + self.private_size)

    def labels_for(self, language_id: str) -> np.ndarray:
        dist = self.label_distribution.get(language_id)
        if dist is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        return np.asarray(dist, dtype=np.float64)

    def validate(self, prefix: str = "corpus") -> "SyntheticCorpusSpec":
        if not self.languages:
            raise ConfigError(f"{prefix}.languages", "must list at least one language")
        if len(set(self.languages)) != len(self.languages):
            raise ConfigError(f"{prefix}.languages", "duplicate language id")
        if len(self.languages) > self.language_slots:
            raise ConfigError(f"{prefix}.language_slots",
                              f"{len(self.languages)} languages need at least as many slots")
        if self.num_classes < 2:
            raise ConfigError(f"{prefix}.num_classes", "must be >= 2")
        if not 0.0 < self.shared_fraction < 1.0:
            raise ConfigError(f"{prefix}.shared_fraction", "must be in (0, 1)")
        kw = self.num_classes * self.keywords_per_class
        if self.keywords_per_class < 1 or kw > self.private_size or kw > self.shared_size:
            raise ConfigError(f"{prefix}.keywords_per_class",
                              f"{kw} keywords do not fit private range {self.private_size} "
                              f"/ shared range {self.shared_size}; raise vocab_size")
        lo, hi = self.seq_len
        if not 1 <= lo <= hi:
            raise ConfigError(f"{prefix}.seq_len", f"need 1 <= min <= max, got {self.seq_len}")
        for s in SPLITS:
            if int(self.split_sizes.get(s, -1)) < 0:
                raise ConfigError(f"{prefix}.split_sizes.{s}", "must be a non-negative count")
        for lang, dist in self.label_distribution.items():
            where = f"{prefix}.label_distribution.{lang}"
            if lang not in self.languages:
                raise ConfigError(where, "unknown language")
            d = np.asarray(dist, dtype=np.float64)
            if d.shape != (self.num_classes,):
                raise ConfigError(where, f"needs {self.num_classes} entries, got {d.size}")
            if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-9:
                raise ConfigError(where, f"must be a probability vector (sum={d.sum():.6g})")
        if not 0.0 < self.class_signal_strength <= 1.0:
            raise ConfigError(f"{prefix}.class_signal_strength", "must be in (0, 1]")
        if not 0.0 <= self.shared_signal_fraction <= 1.0:
            raise ConfigError(f"{prefix}.shared_signal_fraction", "must be in [0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seq_len"] = list(self.seq_len)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCorpusSpec":
        return cls(**d)


def skewed_label_distributions(languages, num_classes: int, exponent: float = 0.8,
                               zero_label: tuple | None = None, seed: int = 2023) -> dict:
    """Zipf-like label priors with a per-language class ordering.

    ``zero_label=(language, class)`` removes one class entirely from one language.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for lang in languages:
        w = 1.0 / np.arange(1, num_classes + 1) ** exponent
        w = w[np.argsort(rng.permutation(num_classes))]
        if zero_label is not None and zero_label[0] == lang:
            w[zero_label[1]] = 0.0
        out[lang] = [round(float(x), 12) for x in w / w.sum()]
        # keep the materialised vector summing to 1 after rounding
        out[lang][int(np.argmax(out[lang]))] += round(1.0 - sum(out[lang]), 12)
    return out


def ae_like_spec(seed: int = 0, languages=None, **kw) -> SyntheticCorpusSpec:
    """Five languages, 20 classes, skewed priors and one empty class in the second language."""
    languages = languages or [f"L{i}" for i in range(5)]
    dist = skewed_label_distributions(languages, 20, zero_label=(languages[1], 19)
                                      if len(languages) > 1 else None)
    return SyntheticCorpusSpec(languages=languages, num_classes=20, label_distribution=dist,
                               seed=seed, **kw)


def xnli_like_spec(seed: int = 0, **kw) -> SyntheticCorpusSpec:
    return SyntheticCorpusSpec(num_classes=3, seed=seed, **kw)


def adaptation_spec(seed: int = 0, **kw) -> SyntheticCorpusSpec:
    """Seven languages laid out in the same slots as the base preset, so the first
    five are bit-identical to ``ae_like_spec`` with the same seed."""
    return ae_like_spec(seed, languages=[f"L{i}" for i in range(7)], **kw)


def _keywords(spec: SyntheticCorpusSpec, language_id: str):
    rng = substream(spec.seed, "keywords", language_id)
    n = spec.num_classes * spec.keywords_per_class
    priv = spec.private_range(language_id)
    private = rng.choice(np.arange(priv.start, priv.stop), size=n, replace=False)
    shared = rng.choice(np.arange(1, 1 + spec.shared_size), size=n, replace=False)
    shape = (spec.num_classes, spec.keywords_per_class)
    return private.reshape(shape), shared.reshape(shape)


def _generate_split(spec: SyntheticCorpusSpec, language_id: str, split: str, keywords) -> list:
    rng = substream(spec.seed, "examples", language_id, split)
    private_kw, shared_kw = keywords
    priv = spec.private_range(language_id)
    noise_pool = np.concatenate([np.arange(1, 1 + spec.shared_size), np.arange(priv.start, priv.stop)])
    probs = spec.labels_for(language_id)
    n = int(spec.split_sizes[split])
    labels = rng.choice(spec.num_classes, size=n, p=probs)
    lo, hi = spec.seq_len
    out = []
    for y in labels:
        length = int(rng.integers(lo, hi + 1))
        signal = rng.random(length) < spec.class_signal_strength
        use_shared = rng.random(length) < spec.shared_signal_fraction
        kw_pick = rng.integers(0, spec.keywords_per_class, size=length)
        noise = rng.choice(noise_pool, size=length)
        toks = np.where(signal, np.where(use_shared, shared_kw[y, kw_pick], private_kw[y, kw_pick]), noise)
        out.append(Example(tuple(int(t) for t in toks), int(y), language_id))
    return out


@dataclass
class Corpus:
    spec: SyntheticCorpusSpec
    splits: dict  # language -> DatasetSplit

    @property
    def languages(self) -> list:
        return list(self.splits)

    def subset(self, languages) -> "Corpus":
        return Corpus(self.spec, {lang: self.splits[lang] for lang in languages})


def generate_corpus(spec: SyntheticCorpusSpec) -> Corpus:
    spec.validate()
    splits = {}
    for lang in spec.languages:
        kw = _keywords(spec, lang)
        splits[lang] = DatasetSplit(**{s: _generate_split(spec, lang, s, kw) for s in SPLITS})
    return Corpus(spec, splits)


def label_histogram(examples, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for ex in examples:
        counts[ex.label] += 1
    return counts


def mix_datasets(splits: dict, num_classes, seed: int = 0, name: str = "*") -> DatasetSplit:
    """Concatenate every language's splits and shuffle each with a seeded permutation.

    ``num_classes`` is an int or a per-language mapping; the single-head baseline
    needs it uniform. Examples keep their own language ids.
    """
    if isinstance(num_classes, dict):
        counts = {num_classes[lang] for lang in splits}
        if len(counts) != 1:
            raise DataError(f"class counts differ across languages: {sorted(counts)}")
    mixed = DatasetSplit()
    for s in SPLITS:
        pooled = [ex for lang in splits for ex in splits[lang][s]]
        order = substream(seed, "mix", name, s).permutation(len(pooled))
        setattr(mixed, s, [pooled[i] for i in order])
    return mixed


def write_corpus(corpus: Corpus, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / SPEC_FILE).write_text(json.dumps(corpus.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    written = [out / SPEC_FILE]
    for lang, ds in corpus.splits.items():
        for s in SPLITS:
            path = out / f"{lang}.{s}.jsonl"
            path.write_text("".join(ex.to_json() + "\n" for ex in ds[s]))
            written.append(path)
    return written


def read_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    if not (d / SPEC_FILE).is_file():
        raise FileNotFoundError(f"no {SPEC_FILE} in {d}")
    spec = SyntheticCorpusSpec.from_dict(json.loads((d / SPEC_FILE).read_text()))
    splits = {}
    for lang in spec.languages:
        ds = DatasetSplit()
        for s in SPLITS:
            path = d / f"{lang}.{s}.jsonl"
            if not path.is_file():
                continue
            rows = [json.loads(line) for line in path.read_text().splitlines() if line]
            setattr(ds, s, [Example(tuple(r["tokens"]), int(r["label"]), r["lang"]) for r in rows])
        splits[lang] = ds
    return Corpus(spec, splits)
