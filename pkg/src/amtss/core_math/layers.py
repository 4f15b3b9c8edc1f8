"""Layers with cached forward state and explicit backward passes.

A layer's ``forward`` stores what its ``backward`` needs; ``backward`` takes the
upstream gradient, accumulates into its parameters' ``grad`` and returns the
gradient with respect to the input. One forward must be followed by at most one
backward before the next forward.
"""

import math

import numpy as np

from amtss.core_math import ops
from amtss.core_math.optim import Parameter


class Module:
    training: bool = False

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for key, item in val.items():
                    if isinstance(item, Module):
                        yield f"{name}.{key}", item

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                out.append((prefix + name, val))
        for name, child in self._children():
            out.extend(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_ids(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.id = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = Parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return ops.matmul(x, self.weight.value) + self.bias.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dw = ops.matmul_backward(dout, self._x, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        return dx


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, std: float = 0.1):
        self.weight = Parameter(rng.normal(0.0, std, size=(num, dim)))
        self._ids = None

    def forward(self, ids: np.ndarray) -> np.ndarray:
        self._ids = ids
        return ops.embedding(self.weight.value, ids)

    def backward(self, dout: np.ndarray) -> None:
        self.weight.grad += ops.embedding_backward(dout, self._ids, self.weight.shape[0])


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._cache = ops.layer_norm(x, self.gamma.value, self.beta.value, self.eps)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dg, db = ops.layer_norm_backward(dout, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class SelfAttention(Module):
    """Multi-head self-attention with a key padding mask."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        if dim % num_heads:
            raise ValueError(f"embed_dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)
        self._cache = None

    def forward(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        B, L, d = x.shape
        H = self.num_heads
        dh = d // H
        qkv = self.qkv.forward(x).reshape(B, L, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scale = 1.0 / math.sqrt(dh)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask[:, None, None, :] > 0, scores, -1e30)
        attn = ops.softmax(scores)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        self._cache = (q, k, v, attn, scale)
        return self.out.forward(ctx)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        q, k, v, attn, scale = self._cache
        B, H, L, dh = q.shape
        dctx = self.out.backward(dout).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = ops.softmax_backward(dattn, attn) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, L, 3 * H * dh)
        return self.qkv.backward(dqkv)


class TransformerBlock(Module):
    """Pre-norm encoder block; dropout on the attention and feed-forward outputs."""

    def __init__(self, dim: int, num_heads: int, ffn_dim: int, dropout: float,
                 rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff1 = Linear(dim, ffn_dim, rng)
        self.ff2 = Linear(ffn_dim, dim, rng)
        self.dropout = dropout
        self._cache = None

    def forward(self, x: np.ndarray, mask: np.ndarray, rng=None) -> np.ndarray:
        a = self.attn.forward(self.ln1.forward(x), mask)
        a, m1 = ops.dropout(a, self.dropout, rng, self.training)
        x = x + a
        pre = self.ff1.forward(self.ln2.forward(x))
        f = self.ff2.forward(ops.gelu(pre))
        f, m2 = ops.dropout(f, self.dropout, rng, self.training)
        self._cache = (pre, m1, m2)
        return x + f

    def backward(self, dout: np.ndarray) -> np.ndarray:
        pre, m1, m2 = self._cache
        df = ops.dropout_backward(dout, m2)
        dpre = ops.gelu_backward(self.ff2.backward(df), pre)
        dx = dout + self.ln2.backward(self.ff1.backward(dpre))
        da = ops.dropout_backward(dx, m1)
        return dx + self.ln1.backward(self.attn.backward(da))


class ResidualMLP(Module):
    """x + W2 gelu(W1 x), used by the bag-of-embeddings encoder."""

    def __init__(self, dim: int, hidden: int, dropout: float, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.dropout = dropout
        self._cache = None

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        pre = self.fc1.forward(x)
        f, mask = ops.dropout(self.fc2.forward(ops.gelu(pre)), self.dropout, rng, self.training)
        self._cache = (pre, mask)
        return x + f

    def backward(self, dout: np.ndarray) -> np.ndarray:
        pre, mask = self._cache
        dpre = ops.gelu_backward(self.fc2.backward(ops.dropout_backward(dout, mask)), pre)
        return dout + self.fc1.backward(dpre)
