"""Encoders, projection heads, teacher/student assemblies and the weighted teacher ensemble."""

import io
import json
import zipfile
from dataclasses import asdict, dataclass, replace

import numpy as np

from amtss.core_math import ops
from amtss.core_math.layers import Embedding, LayerNorm, Linear, Module, ResidualMLP, TransformerBlock
from amtss.core_math.optim import Parameter
from amtss.errors import ConflictError, ConfigError, DataError, LanguageError, VocabularyError
from amtss.rng import substream

PAD_ID = 0
CHECKPOINT_VERSION = 1
ENCODER_KINDS = ("tiny_transformer", "mean_pool_mlp")
# Every language starts out trusting its own teacher most.
DIAG_LOGIT = 2.0
SHARED_HEAD = "*"


@dataclass
class EncoderConfig:
    kind: str = "tiny_transformer"
    vocab_size: int = 1000
    embed_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 64
    max_seq_len: int = 32
    dropout: float = 0.01

    def validate(self, prefix: str = "encoder") -> "EncoderConfig":
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"{prefix}.kind", f"must be one of {ENCODER_KINDS}, got {self.kind!r}")
        if self.vocab_size < 2:
            raise ConfigError(f"{prefix}.vocab_size", "must be >= 2")
        if self.num_layers < 1:
            raise ConfigError(f"{prefix}.num_layers", "must be >= 1")
        if self.embed_dim < 1 or self.ffn_dim < 1 or self.max_seq_len < 1:
            raise ConfigError(f"{prefix}.embed_dim", "dimensions must be positive")
        if self.kind == "tiny_transformer" and (self.num_heads < 1 or self.embed_dim % self.num_heads):
            raise ConfigError(f"{prefix}.num_heads",
                              f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"{prefix}.dropout", "must be in [0, 1)")
        return self


def teacher_encoder_config(vocab_size: int = 1000, **kw) -> EncoderConfig:
    return replace(EncoderConfig(vocab_size=vocab_size, embed_dim=64, num_layers=4, num_heads=4,
                                 ffn_dim=128), **kw)


def student_encoder_config(vocab_size: int = 1000, **kw) -> EncoderConfig:
    return replace(EncoderConfig(vocab_size=vocab_size, embed_dim=32, num_layers=4, num_heads=4,
                                 ffn_dim=64), **kw)


def pad_batch(sequences, max_len: int | None = None):
    """Right-pad with ``PAD_ID``. Returns int ids (B, L) and a float mask (B, L).

    Sequences longer than ``max_len`` are truncated.
    """
    if len(sequences) == 0:
        raise DataError("empty batch")
    lengths = [min(len(s), max_len) if max_len else len(s) for s in sequences]
    if min(lengths) < 1:
        raise DataError("empty token sequence")
    L = max(lengths)
    ids = np.zeros((len(sequences), L), dtype=np.int64)
    for r, (seq, n) in enumerate(zip(sequences, lengths)):
        ids[r, :n] = seq[:n]
    return ids, (ids != PAD_ID).astype(np.float64)


class Encoder(Module):
    """Token ids to one pooled vector per sequence (mean over non-pad positions)."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.tok = Embedding(config.vocab_size, config.embed_dim, rng)
        if config.kind == "tiny_transformer":
            self.pos = Embedding(config.max_seq_len, config.embed_dim, rng)
            self.blocks = [TransformerBlock(config.embed_dim, config.num_heads, config.ffn_dim,
                                            config.dropout, rng) for _ in range(config.num_layers)]
            self.ln_f = LayerNorm(config.embed_dim)
        else:
            self.blocks = [ResidualMLP(config.embed_dim, config.ffn_dim, config.dropout, rng)
                           for _ in range(config.num_layers)]
        self._mask = None

    def forward(self, ids: np.ndarray, mask: np.ndarray, rng=None) -> np.ndarray:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise VocabularyError(f"token id out of range [0, {self.config.vocab_size})")
        self._mask = mask
        x = self.tok.forward(ids)
        if self.config.kind == "tiny_transformer":
            x = x + self.pos.forward(np.broadcast_to(np.arange(ids.shape[1]), ids.shape))
            for blk in self.blocks:
                x = blk.forward(x, mask, rng)
            return ops.mean_pool(self.ln_f.forward(x), mask)
        h = ops.mean_pool(x, mask)
        for blk in self.blocks:
            h = blk.forward(h, rng)
        return h

    def backward(self, dh: np.ndarray) -> None:
        if self.config.kind == "tiny_transformer":
            dx = self.ln_f.backward(ops.mean_pool_backward(dh, self._mask))
            for blk in reversed(self.blocks):
                dx = blk.backward(dx)
            self.pos.backward(dx)
            self.tok.backward(dx)
        else:
            for blk in reversed(self.blocks):
                dh = blk.backward(dh)
            self.tok.backward(ops.mean_pool_backward(dh, self._mask))


def encode(encoder: Encoder, token_ids, rng=None) -> np.ndarray:
    """Pooled hidden states (batch x embed_dim) for a list of token sequences."""
    ids, mask = pad_batch(token_ids, encoder.config.max_seq_len)
    return encoder.forward(ids, mask, rng)


class ProjectionHead(Module):
    def __init__(self, embed_dim: int, num_classes: int, rng: np.random.Generator | None = None,
                 std: float = 0.02):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        w = np.zeros((embed_dim, num_classes)) if rng is None else rng.normal(0.0, std, (embed_dim, num_classes))
        self.proj = Linear(embed_dim, num_classes, np.random.default_rng(0))
        self.proj.weight.value = w
        self.num_classes = num_classes

    def forward(self, h: np.ndarray) -> np.ndarray:
        return self.proj.forward(h)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        return self.proj.backward(dlogits)


class TeacherModel(Module):
    """One encoder plus one projection head, fine-tuned for a single language."""

    def __init__(self, language_id: str, config: EncoderConfig, num_classes: int, seed: int = 0):
        rng = substream(seed, "teacher-init", language_id)
        self.language_id = language_id
        self.encoder = Encoder(config, rng)
        self.head = ProjectionHead(config.embed_dim, num_classes, rng)
        self.assign_ids()

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def logits(self, token_ids, rng=None) -> np.ndarray:
        return self.head.forward(encode(self.encoder, token_ids, rng))

    def backward(self, dlogits: np.ndarray) -> None:
        self.encoder.backward(self.head.backward(dlogits))

    def predict_proba(self, token_ids, language_id: str | None = None) -> np.ndarray:
        """Class distribution per sequence. ``language_id`` is accepted for interface parity."""
        return ops.softmax(self.logits(token_ids))


def teacher_predict(teacher: TeacherModel, token_ids) -> np.ndarray:
    return teacher.predict_proba(token_ids)


class StudentModel(Module):
    """Shared encoder with one projection head per language.

    With ``shared_head`` every language is served by a single head; this is the
    mixed-data baseline topology.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0, shared_head: bool = False):
        self.encoder = Encoder(config, substream(seed, "student-init", "encoder"))
        self.heads: dict[str, ProjectionHead] = {}
        self.shared_head = shared_head
        self.assign_ids()

    @property
    def languages(self) -> list[str]:
        return list(self.heads)

    def head_for(self, language_id: str) -> ProjectionHead:
        key = SHARED_HEAD if self.shared_head else language_id
        try:
            return self.heads[key]
        except KeyError:
            raise LanguageError(f"no projection head for language {language_id!r}") from None

    def add_language_head(self, language_id: str, num_classes: int, seed: int = 0) -> None:
        if self.shared_head:
            language_id = SHARED_HEAD
        if language_id in self.heads:
            raise ConflictError(f"language {language_id!r} already has a head")
        rng = substream(seed, "head-init", language_id)
        self.heads[language_id] = ProjectionHead(self.encoder.config.embed_dim, num_classes, rng)
        self.heads[language_id].assign_ids(f"heads.{language_id}.")

    def head_parameters(self, language_id: str) -> list[Parameter]:
        return self.head_for(language_id).parameters()

    def trainable_for(self, language_id: str) -> list[Parameter]:
        """Parameters a batch of ``language_id`` can touch."""
        return self.encoder.parameters() + self.head_parameters(language_id)

    def logits(self, language_id: str, token_ids, rng=None) -> np.ndarray:
        head = self.head_for(language_id)
        self._active = head
        return head.forward(encode(self.encoder, token_ids, rng))

    def backward(self, dlogits: np.ndarray) -> None:
        self.encoder.backward(self._active.backward(dlogits))

    def predict_proba(self, token_ids, language_id: str) -> np.ndarray:
        return ops.softmax(self.logits(language_id, token_ids))


def student_predict(student: StudentModel, language_id: str, token_ids) -> np.ndarray:
    return student.predict_proba(token_ids, language_id)


def add_language_head(student: StudentModel, language_id: str, num_classes: int, seed: int = 0) -> None:
    student.add_language_head(language_id, num_classes, seed)


class TeacherEnsemble(Module):
    """Teachers plus a (teachers x languages) matrix of importance-weight logits.

    The weight of teacher ``t`` for language ``i`` is the softmax over column ``i``.
    Teacher ``t`` is the dedicated teacher of ``languages[t]``.
    """

    def __init__(self, teachers: list[TeacherModel], languages: list[str] | None = None,
                 trainable: bool = True, cross_teacher_mask: bool = False):
        if not teachers:
            raise ValueError("ensemble needs at least one teacher")
        classes = {t.num_classes for t in teachers}
        if len(classes) != 1:
            raise DataError(f"teachers disagree on class count: {sorted(classes)}")
        self.teachers = list(teachers)
        self.languages = list(languages) if languages is not None else [t.language_id for t in teachers]
        n_t, n_l = len(self.teachers), len(self.languages)
        logits = np.zeros((n_t, n_l))
        for t in range(min(n_t, n_l)):
            logits[t, t] = DIAG_LOGIT
        self.weight_logits = Parameter(logits, "ensemble.weight_logits")
        self.trainable = trainable
        self.cross_teacher_mask = cross_teacher_mask

    @property
    def num_classes(self) -> int:
        return self.teachers[0].num_classes

    def column(self, language_id: str) -> int:
        try:
            return self.languages.index(language_id)
        except ValueError:
            raise LanguageError(f"language {language_id!r} not registered in ensemble") from None

    def teacher_for(self, language_id: str) -> TeacherModel:
        i = self.column(language_id)
        return self.teachers[i] if i < len(self.teachers) else self.teachers[0]

    def _masked_logits(self) -> np.ndarray:
        z = self.weight_logits.value
        if not self.cross_teacher_mask:
            return z
        keep = np.eye(*z.shape, dtype=bool) if z.shape[0] > 1 else np.ones_like(z, dtype=bool)
        return np.where(keep, z, -np.inf)

    def effective_weights(self) -> np.ndarray:
        return ops.softmax(self._masked_logits(), axis=0)

    def teacher_logits(self, token_ids) -> np.ndarray:
        """Stacked teacher logits (T, B, C), evaluated in eval mode."""
        out = []
        for t in self.teachers:
            was = t.training
            t.eval()
            out.append(t.logits(token_ids))
            t.train(was)
        return np.stack(out)

    def combine(self, teacher_probs: np.ndarray, language_id: str) -> np.ndarray:
        """Convex combination of (T, B, C) teacher distributions for one language."""
        w = self.effective_weights()[:, self.column(language_id)]
        return np.einsum("t,tbc->bc", w, teacher_probs)

    def combine_backward(self, dtarget: np.ndarray, teacher_probs: np.ndarray, language_id: str) -> None:
        i = self.column(language_id)
        w = self.effective_weights()[:, i]
        dw = np.einsum("bc,tbc->t", dtarget, teacher_probs)
        dz = ops.softmax_backward(dw, w)
        if self.cross_teacher_mask:
            dz = np.where(np.isfinite(self._masked_logits()[:, i]), dz, 0.0)
        self.weight_logits.grad[:, i] += dz

    def extend(self, new_teachers: list[TeacherModel]) -> None:
        """Append teachers and their languages; new rows/columns get diagonal-dominant init."""
        for t in new_teachers:
            if t.language_id in self.languages:
                raise ConflictError(f"language {t.language_id!r} already in ensemble")
            if t.num_classes != self.num_classes:
                raise DataError(f"teacher {t.language_id!r} has {t.num_classes} classes, "
                                f"ensemble has {self.num_classes}")
        old = self.weight_logits.value
        n_t, n_l = old.shape
        m = len(new_teachers)
        z = np.zeros((n_t + m, n_l + m))
        z[:n_t, :n_l] = old
        for k in range(m):
            z[n_t + k, n_l + k] = DIAG_LOGIT
        self.teachers.extend(new_teachers)
        self.languages.extend(t.language_id for t in new_teachers)
        self.weight_logits = Parameter(z, "ensemble.weight_logits")


def ensemble_soft_target(ensemble: TeacherEnsemble, language_id: str, token_ids,
                         temperature: float = 1.0) -> np.ndarray:
    ensemble.column(language_id)
    probs = ops.softmax(ensemble.teacher_logits(token_ids) / temperature)
    return ensemble.combine(probs, language_id)


def effective_weights(ensemble: TeacherEnsemble) -> np.ndarray:
    return ensemble.effective_weights()


def count_parameters(model: Module) -> int:
    return sum(p.size for p in model.parameters())


# --- checkpoints ------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _array_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a, dtype="<f8"), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, model: Module, ensemble: TeacherEnsemble | None = None,
                    extra: dict | None = None) -> None:
    """Write a model (and optionally ensemble weight logits) as a zip of .npy tensors.

    Output bytes depend only on the model contents.
    """
    if isinstance(model, TeacherModel):
        meta = {"kind": "teacher", "language_id": model.language_id, "num_classes": model.num_classes}
    elif isinstance(model, StudentModel):
        meta = {"kind": "student", "shared_head": model.shared_head,
                "heads": [[k, h.num_classes] for k, h in model.heads.items()]}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    meta["format_version"] = CHECKPOINT_VERSION
    meta["encoder"] = asdict(model.encoder.config)
    if ensemble is not None:
        meta["ensemble"] = {"languages": ensemble.languages,
                            "teachers": [t.language_id for t in ensemble.teachers],
                            "trainable": ensemble.trainable,
                            "cross_teacher_mask": ensemble.cross_teacher_mask}
    meta["extra"] = extra or {}
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name, p in model.named_parameters():
            _write_entry(zf, f"params/{name}.npy", _array_bytes(p.value))
        if ensemble is not None:
            _write_entry(zf, "ensemble/weight_logits.npy", _array_bytes(ensemble.weight_logits.value))


def load_checkpoint(path):
    """Returns ``(model, meta, ensemble_weight_logits_or_None)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        arrays = {n[len("params/"):-len(".npy")]: np.lib.format.read_array(io.BytesIO(zf.read(n)))
                  for n in zf.namelist() if n.startswith("params/")}
        logits = None
        if "ensemble/weight_logits.npy" in zf.namelist():
            logits = np.lib.format.read_array(io.BytesIO(zf.read("ensemble/weight_logits.npy")))
    config = EncoderConfig(**meta["encoder"])
    if meta["kind"] == "teacher":
        model = TeacherModel(meta["language_id"], config, meta["num_classes"])
    else:
        model = StudentModel(config, shared_head=meta["shared_head"])
        for lang, c in meta["heads"]:
            model.add_language_head(lang, c)
    for name, p in model.named_parameters():
        if name not in arrays or arrays[name].shape != p.shape:
            raise DataError(f"{path}: missing or mis-shaped tensor {name!r}")
        p.value = arrays[name].astype(np.float64)
        p.grad = np.zeros_like(p.value)
    return model, meta, logits
