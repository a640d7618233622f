"""Vision Transformer with historical attention propagation.

Each encoder layer blends its raw attention logits with the blended logits of
the layer before it; see :mod:`havit.attention`.
"""

from havit.attention import (
    AttentionHistory,
    AttentionLayerParams,
    BlendConfig,
    InitStrategy,
    attention_layer_forward,
    baseline_attention,
    blend_history,
    init_history,
    self_attention_logits,
    unrolled_blend_oracle,
)
from havit.model import HAViT, ModelConfig, extract_cls_attention, patchify
from havit.tensor import Tensor, backward

__version__ = "0.1.0"
