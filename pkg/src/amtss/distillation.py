"""Distillation objective, teacher fine-tuning and the inner training epoch."""

import logging
from dataclasses import dataclass

import numpy as np

from amtss.core_math import ops
from amtss.core_math.optim import FULL_SCALE_LR, AdamW
from amtss.errors import ConfigError, DataError, DimensionError, LanguageError
from amtss.models import EncoderConfig, StudentModel, TeacherEnsemble, TeacherModel
from amtss.rng import substream

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    lam: float = 0.5
    temperature: float = 1.0
    lr: float = 1e-3
    batch_size: int = 32
    dropout: float = 0.01
    weight_decay: float = 0.01
    update_weights: bool = True
    weight_lr: float | None = None  # defaults to lr
    seed: int = 0

    def validate(self, prefix: str = "distill") -> "DistillConfig":
        if not 0.0 < self.lam < 1.0:
            raise ConfigError(f"{prefix}.lam", f"must lie in (0, 1), got {self.lam}")
        if self.temperature < 1.0:
            raise ConfigError(f"{prefix}.temperature", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"{prefix}.batch_size", "must be >= 1")
        if self.lr < 0:
            raise ConfigError(f"{prefix}.lr", "must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"{prefix}.dropout", "must be in [0, 1)")
        return self

    @classmethod
    def full_scale(cls, **kw) -> "DistillConfig":
        """Settings for full-size pretrained encoders: lr 1e-5, batch 32, dropout 0.01."""
        return cls(lr=FULL_SCALE_LR, batch_size=32, dropout=0.01, **kw)


@dataclass
class FineTuneConfig:
    max_epochs: int = 30
    patience: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 0

    def validate(self, prefix: str = "finetune") -> "FineTuneConfig":
        if self.max_epochs < 1:
            raise ConfigError(f"{prefix}.max_epochs", "must be >= 1")
        if self.patience < 1:
            raise ConfigError(f"{prefix}.patience", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"{prefix}.batch_size", "must be >= 1")
        return self


@dataclass
class LossBreakdown:
    ce_term: float = 0.0
    kl_term: float = 0.0
    lam: float = 0.0
    examples_seen: int = 0

    @property
    def total(self) -> float:
        return self.ce_term + self.lam * self.kl_term

    def merge(self, other: "LossBreakdown") -> "LossBreakdown":
        """Example-weighted running mean."""
        n = self.examples_seen + other.examples_seen
        if n == 0:
            return LossBreakdown(lam=other.lam)
        a, b = self.examples_seen / n, other.examples_seen / n
        return LossBreakdown(a * self.ce_term + b * other.ce_term,
                             a * self.kl_term + b * other.kl_term, other.lam, n)

    def to_dict(self) -> dict:
        return {"ce": self.ce_term, "kl": self.kl_term, "total": self.total, "n": self.examples_seen}


def _check_shapes(student_probs, teacher_probs, gold):
    if student_probs.shape != teacher_probs.shape:
        raise DimensionError(f"student {student_probs.shape} vs teacher {teacher_probs.shape}")
    if len(gold) != student_probs.shape[0]:
        raise DimensionError(f"{len(gold)} labels for {student_probs.shape[0]} rows")


def distill_loss(student_probs, teacher_probs, gold_labels, lam: float) -> LossBreakdown:
    """Batch-mean cross-entropy against gold plus ``lam`` times batch-mean KL(teacher || student)."""
    s = np.atleast_2d(np.asarray(student_probs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_probs, dtype=np.float64))
    gold = np.atleast_1d(np.asarray(gold_labels))
    _check_shapes(s, t, gold)
    ce = ops.batch_cross_entropy(s, gold).mean()
    kl = ops.batch_kl_divergence(t, s).mean()
    return LossBreakdown(float(ce), float(kl), lam, len(gold))


def distill_loss_grad(student_logits: np.ndarray, target: np.ndarray, gold, lam: float,
                      temperature: float = 1.0):
    """Loss plus gradients w.r.t. student logits and the soft target.

    The KL term compares ``target`` with the student at ``temperature`` and is
    scaled by temperature**2, so gradient magnitudes do not shrink as it grows;
    at temperature 1 this is exactly :func:`distill_loss`.
    Returns ``(LossBreakdown, dlogits, dtarget)``.
    """
    gold = np.asarray(gold)
    B = student_logits.shape[0]
    p = ops.softmax(student_logits)
    p_t = p if temperature == 1.0 else ops.softmax(student_logits / temperature)
    _check_shapes(p, target, gold)
    tau2 = temperature * temperature
    ce = ops.batch_cross_entropy(p, gold).mean()
    kl = tau2 * ops.batch_kl_divergence(target, p_t).mean()

    onehot = np.zeros_like(p)
    onehot[np.arange(B), gold] = 1.0
    dlogits = (p - onehot) / B + lam * temperature * (p_t - target) / B
    dtarget = lam * tau2 / B * (np.log(np.maximum(target, ops.PROB_FLOOR)) + 1.0
                               - np.log(np.maximum(p_t, ops.PROB_FLOOR)))
    return LossBreakdown(float(ce), float(kl), lam, B), dlogits, dtarget


def batches(n: int, batch_size: int, rng: np.random.Generator | None, lengths=None, pool: int = 8):
    """Index batches; shuffled when ``rng`` is given.

    With ``lengths``, indices are sorted by length inside pools of ``pool`` batches
    before cutting (less padding), and the batch order is shuffled again.
    """
    order = np.arange(n) if rng is None else rng.permutation(n)
    if lengths is not None:
        lengths = np.asarray(lengths)
        span = batch_size * pool
        order = np.concatenate([chunk[np.argsort(lengths[chunk], kind="stable")]
                                for chunk in (order[i:i + span] for i in range(0, n, span))])
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if rng is not None and lengths is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


def _lengths(examples) -> np.ndarray:
    return np.array([len(ex.token_ids) for ex in examples])


def accuracy(predict, examples, language_id: str | None = None, batch_size: int = 256) -> float:
    if not examples:
        raise DataError("cannot evaluate on an empty split")
    correct = 0
    for idx in batches(len(examples), batch_size, None, _lengths(examples)):
        chunk = [examples[i] for i in idx]
        probs = predict([ex.token_ids for ex in chunk], language_id)
        correct += int(np.sum(np.argmax(probs, axis=1) == np.array([ex.label for ex in chunk])))
    return correct / len(examples)


def fine_tune_teacher(language_id: str, encoder_config: EncoderConfig, num_classes: int,
                      train, valid, config: FineTuneConfig | None = None, callback=None) -> TeacherModel:
    """Fit a teacher with plain cross-entropy and AdamW; return the best-validation weights.

    Stops after ``config.patience`` epochs without a validation improvement.
    ``callback(epoch, teacher)`` runs before training (epoch 0) and after each epoch.
    """
    config = (config or FineTuneConfig()).validate()
    if not train or not valid:
        raise DataError(f"teacher {language_id!r}: empty train or valid split")
    teacher = TeacherModel(language_id, encoder_config, num_classes, seed=config.seed)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    params = teacher.parameters()
    labels = np.array([ex.label for ex in train])
    train_lengths = _lengths(train)
    best_acc, best_state, stale = -1.0, None, 0
    teacher.fit_history = []
    if callback:
        callback(0, teacher)
    for epoch in range(1, config.max_epochs + 1):
        teacher.train()
        shuffle = substream(config.seed, "teacher-shuffle", language_id, epoch)
        drop = substream(config.seed, "teacher-dropout", language_id, epoch)
        running = 0.0
        for idx in batches(len(train), config.batch_size, shuffle, train_lengths):
            teacher.zero_grad()
            logits = teacher.logits([train[i].token_ids for i in idx], drop)
            p = ops.softmax(logits)
            running += float(ops.batch_cross_entropy(p, labels[idx]).sum())
            d = p.copy()
            d[np.arange(len(idx)), labels[idx]] -= 1.0
            teacher.backward(d / len(idx))
            opt.step(params)
        teacher.eval()
        acc = accuracy(teacher.predict_proba, valid)
        teacher.fit_history.append({"epoch": epoch, "train_loss": running / len(train), "valid_acc": acc})
        log.debug("teacher %s epoch %d loss %.4f valid %.4f", language_id, epoch, running / len(train), acc)
        if callback:
            callback(epoch, teacher)
        if acc > best_acc:
            best_acc, best_state, stale = acc, [p.value.copy() for p in params], 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    for p, v in zip(params, best_state):
        p.value = v
    teacher.best_valid_acc = best_acc
    log.info("teacher %s: best valid acc %.4f", language_id, best_acc)
    return teacher


def teacher_logit_cache(ensemble: TeacherEnsemble, examples, batch_size: int = 256) -> np.ndarray:
    """Teacher logits for every example, shape (T, N, C). Teachers are frozen, so this is reusable."""
    out = None
    for idx in batches(len(examples), batch_size, None, _lengths(examples)):
        logits = ensemble.teacher_logits([examples[i].token_ids for i in idx])
        if out is None:
            out = np.zeros((logits.shape[0], len(examples), logits.shape[2]))
        out[:, idx, :] = logits
    return out


def train_epoch(student: StudentModel, ensemble: TeacherEnsemble, active, datasets: dict,
                config: DistillConfig, *, epoch: int = 1, optimizer: AdamW | None = None,
                weight_optimizer: AdamW | None = None, cache: dict | None = None) -> dict:
    """One pass over each active language's train split, batches interleaved round-robin.

    Each batch updates the shared encoder and that language's head only. With
    ``config.update_weights`` the ensemble weight logits follow the gradient of the
    same loss. Returns a LossBreakdown per active language.
    """
    if not active:
        raise DataError("empty active language set")
    for lang in active:
        student.head_for(lang)
        ensemble.column(lang)
        if lang not in datasets:
            raise LanguageError(f"no dataset for language {lang!r}")
    optimizer = optimizer or AdamW(lr=config.lr, weight_decay=config.weight_decay)
    if weight_optimizer is None:
        weight_optimizer = AdamW(lr=config.weight_lr if config.weight_lr is not None else config.lr,
                                 weight_decay=0.0)
    cache = {} if cache is None else cache
    update_w = config.update_weights and ensemble.trainable

    plan = {}
    for lang in active:
        train = datasets[lang].train
        if not train:
            raise DataError(f"empty train split for {lang!r}")
        if lang not in cache:
            cache[lang] = teacher_logit_cache(ensemble, train)
        plan[lang] = batches(len(train), config.batch_size, substream(config.seed, "shuffle", epoch, lang),
                             _lengths(train))
    schedule = [(lang, b) for k in range(max(len(v) for v in plan.values()))
                for lang in active if k < len(plan[lang]) for b in [plan[lang][k]]]

    losses = {lang: LossBreakdown(lam=config.lam) for lang in active}
    student.train()
    for step, (lang, idx) in enumerate(schedule):
        train = datasets[lang].train
        gold = np.array([train[i].label for i in idx])
        student.zero_grad()
        ensemble.weight_logits.zero_grad()
        drop = substream(config.seed, "dropout", epoch, step)
        logits = student.logits(lang, [train[i].token_ids for i in idx], drop)
        t_probs = ops.softmax(cache[lang][:, idx, :] / config.temperature)
        target = ensemble.combine(t_probs, lang)
        loss, dlogits, dtarget = distill_loss_grad(logits, target, gold, config.lam, config.temperature)
        student.backward(dlogits)
        optimizer.step(student.trainable_for(lang))
        if update_w:
            ensemble.combine_backward(dtarget, t_probs, lang)
            weight_optimizer.step([ensemble.weight_logits])
        losses[lang] = losses[lang].merge(loss)
    student.eval()
    return losses
