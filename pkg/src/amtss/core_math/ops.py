"""Forward/backward pairs for the differentiable primitives.

All arrays are float64 numpy arrays. Backward functions take the upstream
gradient plus whatever the forward returned as cache and return input
gradients; they never touch global state.
"""

import math

import numpy as np

from amtss.errors import DimensionError, NumericError

PROB_FLOOR = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


# --- linear algebra ---------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inner = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if a.shape[-1] != inner:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of ``a @ b`` for 2-D ``b`` and ``a`` of any leading rank."""
    da = dout @ b.T
    db = a.reshape(-1, a.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    return da, db


# --- normalisation and probabilities ---------------------------------------

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(logits)):
        raise NumericError("softmax: NaN in logits")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dout: np.ndarray, probs: np.ndarray, axis: int = -1) -> np.ndarray:
    return probs * (dout - np.sum(dout * probs, axis=axis, keepdims=True))


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(logits)):
        raise NumericError("log_softmax: NaN in logits")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def log_softmax_backward(dout: np.ndarray, logp: np.ndarray, axis: int = -1) -> np.ndarray:
    return dout - np.exp(logp) * np.sum(dout, axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dout: np.ndarray, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dgamma = (dout * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# --- activations ------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


# --- lookup, dropout, pooling ----------------------------------------------

def embedding(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return table[ids]


def embedding_backward(dout: np.ndarray, ids: np.ndarray, vocab_size: int) -> np.ndarray:
    dtable = np.zeros((vocab_size, dout.shape[-1]))
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, dout.shape[-1]))
    return dtable


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout. Returns ``(out, mask)``; mask is None when inactive."""
    if not training or rate <= 0.0 or rng is None:
        return x, None
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask) -> np.ndarray:
    return dout if mask is None else dout * mask


def mean_pool(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean over positions where ``mask`` is 1. ``x`` is (B, L, d), ``mask`` (B, L)."""
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return np.einsum("bld,bl->bd", x, mask) / counts


def mean_pool_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return (dout / counts)[:, None, :] * mask[:, :, None]


# --- losses -----------------------------------------------------------------

def cross_entropy(probs, gold: int) -> float:
    """-ln probs[gold] with the probability floored at ``PROB_FLOOR``."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= gold < probs.shape[-1]:
        raise IndexError(f"gold label {gold} out of range for {probs.shape[-1]} classes")
    return float(-math.log(max(float(probs[gold]), PROB_FLOOR)))


def kl_divergence(p, q) -> float:
    """sum p ln(p/q), with 0 ln 0 = 0 and both sides floored at ``PROB_FLOOR`` inside the log,
    so KL(p, p) is exactly 0 even for entries below the floor."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence length mismatch: {p.shape} vs {q.shape}")
    return float(np.sum(_kl_terms(p, q)))


def _kl_terms(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pos = p > 0
    return np.where(pos, p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))), 0.0)


def batch_cross_entropy(probs: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy for a (B, C) probability matrix."""
    gold = np.asarray(gold)
    if gold.size and (gold.min() < 0 or gold.max() >= probs.shape[1]):
        raise IndexError(f"gold labels out of range for {probs.shape[1]} classes")
    picked = probs[np.arange(probs.shape[0]), gold]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def batch_kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row KL(p || q) for (B, C) matrices."""
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    return _kl_terms(p, q).sum(axis=-1)
