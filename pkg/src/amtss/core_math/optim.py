"""Parameters and the AdamW optimizer (decoupled weight decay)."""

from dataclasses import dataclass, field

import numpy as np

from amtss.errors import NumericError

# learning rate for fine-tuning full-size pretrained encoders
FULL_SCALE_LR = 1e-5


class Parameter:
    """A trainable tensor and its accumulated gradient."""

    __slots__ = ("id", "value", "grad")

    def __init__(self, value: np.ndarray, id: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.id = id

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.value.shape})"


@dataclass
class AdamWState:
    """Per-parameter moment estimates and step count."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    state: dict = field(default_factory=dict)

    def step(self, params) -> None:
        """Apply one update to each parameter in ``params`` using its current grad."""
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.id!r}")
        for p in params:
            adamw_step(p, self._state_for(p), self.lr, self.beta1, self.beta2,
                       self.eps, self.weight_decay)

    def _state_for(self, p: Parameter) -> AdamWState:
        st = self.state.get(p.id)
        if st is None:
            st = AdamWState(np.zeros_like(p.value), np.zeros_like(p.value))
            self.state[p.id] = st
        return st


def adamw_step(p: Parameter, st: AdamWState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    g = p.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter {p.id!r}")
    st.t += 1
    st.m *= beta1
    st.m += (1.0 - beta1) * g
    st.v *= beta2
    st.v += (1.0 - beta2) * g * g
    m_hat = st.m / (1.0 - beta1 ** st.t)
    v_hat = st.v / (1.0 - beta2 ** st.t)
    # decay acts on the value directly, never through the gradient
    p.value *= 1.0 - lr * weight_decay
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
