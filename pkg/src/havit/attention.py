"""Multi-head self-attention with historical logit blending.

Each layer computes its scaled logits ``A_self = Q K^T / sqrt(d_k)`` and
mixes them with the blended logits handed down by the previous layer::

    A_current = alpha * A_self + (1 - alpha) * H_prev
    out       = softmax(A_current) V

``A_current`` becomes the history for the next layer. With ``alpha = 1``
the history drops out and the layer is ordinary attention, which is what
:func:`baseline_attention` computes directly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from havit import tensor as T
from havit.errors import ConfigurationError, ContractError, DimensionError
from havit.tensor import Tensor

TRAIN_STREAM = 0
EVAL_STREAM = 1


class InitStrategy(str, enum.Enum):
    RANDOM = "random"
    ZERO = "zero"


@dataclass(frozen=True)
class BlendConfig:
    alpha: float = 0.45
    init_strategy: InitStrategy = InitStrategy.RANDOM
    seed: int = 0
    # Cut the gradient path through H_prev (ablation; off by default).
    detach_history: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "init_strategy", InitStrategy(self.init_strategy))
        if self.seed < 0:
            raise ConfigurationError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class AttentionHistory:
    """Blended pre-softmax logits ``[B, h, n, n]`` produced by one layer.

    ``layer_index`` is 0 for the initial history and ``l`` for the output of
    encoder layer ``l``. ``self_logits`` keeps the layer's own ``A_self`` for
    inspection; it is ``None`` for the initial history.
    """

    logits: Tensor
    layer_index: int
    self_logits: Tensor | None = None

    def __post_init__(self):
        s = self.logits.shape
        if len(s) != 4 or s[2] != s[3]:
            raise DimensionError(f"attention history must be [B, h, n, n], got {s}")
        if self.layer_index < 0:
            raise ContractError(f"layer_index must be >= 0, got {self.layer_index}")


@dataclass
class AttentionLayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    num_heads: int

    def __post_init__(self):
        d = self.ln_gamma.shape[0]
        if d % self.num_heads:
            raise ConfigurationError(f"d_model={d} is not divisible by {self.num_heads} heads")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(d, d)}")

    @property
    def d_model(self) -> int:
        return self.ln_gamma.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads


def init_history(strategy, B: int, h: int, n: int, seed: int = 0,
                 batch_counter: int = 0, stream: int = TRAIN_STREAM) -> AttentionHistory:
    """Initial history ``H_0`` of shape ``[B, h, n, n]``.

    Random draws are standard normal from a generator keyed on
    ``(seed, stream, batch_counter)``, so a given batch always sees the same
    tensor. The result is a constant: it never requires a gradient.
    """
    if min(B, h, n) < 1:
        raise DimensionError(f"history extents must be >= 1, got B={B}, h={h}, n={n}")
    strategy = InitStrategy(strategy)
    if strategy is InitStrategy.ZERO:
        data = np.zeros((B, h, n, n))
    else:
        rng = np.random.default_rng([seed, stream, batch_counter])
        data = rng.standard_normal((B, h, n, n))
    return AttentionHistory(Tensor(data), layer_index=0)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    B, n, d = x.shape
    return T.transpose(T.reshape(x, (B, n, num_heads, d // num_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, h, n, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, n, h * dk))


def self_attention_logits(Q: Tensor, K: Tensor, d_k: int | None = None) -> Tensor:
    """Scaled dot-product logits ``Q K^T / sqrt(d_k)`` per head."""
    if Q.ndim != 4 or Q.shape != K.shape:
        raise DimensionError(f"self_attention_logits: Q {Q.shape} and K {K.shape} must match as [B, h, n, d_k]")
    d_k = Q.shape[-1] if d_k is None else d_k
    return T.mul(T.bmm(Q, T.transpose(K, (0, 1, 3, 2))), 1.0 / math.sqrt(d_k))


def blend_history(A_self: Tensor, H_prev, alpha: float) -> Tensor:
    """``alpha * A_self + (1 - alpha) * H_prev``, elementwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    H = H_prev.logits if isinstance(H_prev, AttentionHistory) else H_prev
    if A_self.shape != H.shape:
        raise DimensionError(f"blend_history: A_self {A_self.shape} vs history {H.shape}")
    return T.add(T.mul(A_self, alpha), T.mul(H, 1.0 - alpha))


def _qkv(X: Tensor, params: AttentionLayerParams):
    if X.ndim != 3 or X.shape[-1] != params.d_model:
        raise DimensionError(f"attention input {X.shape} does not match d_model={params.d_model}")
    Xn = T.layer_norm(X, params.ln_gamma, params.ln_beta)
    h = params.num_heads
    Q = split_heads(T.linear(Xn, params.w_q), h)
    K = split_heads(T.linear(Xn, params.w_k), h)
    V = split_heads(T.linear(Xn, params.w_v), h)
    return Q, K, V


def _attend(logits: Tensor, V: Tensor, params: AttentionLayerParams) -> Tensor:
    out = T.bmm(T.softmax_rows(logits), V)
    return T.linear(merge_heads(out), params.w_o, params.b_o)


def attention_layer_forward(X: Tensor, H_prev: AttentionHistory, params: AttentionLayerParams,
                            cfg: BlendConfig, layer_index: int = 1):
    """One attention sublayer with history blending (no residual).

    Returns ``(Y, H_current)`` where ``H_current.logits`` is the blended
    ``A_current`` tagged with ``layer_index``.
    """
    if H_prev.layer_index != layer_index - 1:
        raise ContractError(
            f"layer {layer_index} received history from layer {H_prev.layer_index}; "
            f"expected {layer_index - 1}")
    Q, K, V = _qkv(X, params)
    A_self = self_attention_logits(Q, K)
    H = T.detach(H_prev.logits) if cfg.detach_history else H_prev.logits
    A_current = blend_history(A_self, H, cfg.alpha)
    Y = _attend(A_current, V, params)
    return Y, AttentionHistory(A_current, layer_index, self_logits=A_self)


def baseline_attention(X: Tensor, params: AttentionLayerParams) -> Tensor:
    """Standard multi-head attention sublayer, no history path."""
    Q, K, V = _qkv(X, params)
    return _attend(self_attention_logits(Q, K), V, params)


def blend_coefficients(alpha, L: int) -> list:
    """Weights of ``A_self^1..A_self^L`` and ``H_0`` in the unrolled blend.

    Works with any numeric type supporting ``+``, ``-`` and ``**``
    (e.g. :class:`fractions.Fraction` for exact arithmetic).
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    return [alpha * (1 - alpha) ** (L - l) for l in range(1, L + 1)] + [(1 - alpha) ** L]


def unrolled_blend_oracle(A_self_list: Sequence[Tensor], H_0, alpha: float) -> Tensor:
    """Closed form of the history after ``L`` layers.

    ``sum_l alpha (1-alpha)^(L-l) A_self^l + (1-alpha)^L H_0``, evaluated
    directly in numpy with no gradient tracking.
    """
    if not A_self_list:
        raise ValueError("unrolled_blend_oracle needs at least one layer")
    H0 = H_0.logits if isinstance(H_0, AttentionHistory) else H_0
    for A in A_self_list:
        if A.shape != H0.shape:
            raise DimensionError(f"unrolled_blend_oracle: A_self {A.shape} vs H_0 {H0.shape}")
    coeffs = blend_coefficients(alpha, len(A_self_list))
    acc = coeffs[-1] * H0.data
    for c, A in zip(coeffs[:-1], A_self_list):
        acc = acc + c * A.data
    return Tensor(acc)
