"""HAViT classifier: patch embedding, blended-attention encoder, linear head."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from havit import tensor as T
from havit.attention import (
    TRAIN_STREAM,
    AttentionHistory,
    AttentionLayerParams,
    BlendConfig,
    InitStrategy,
    _attend,
    _qkv,
    attention_layer_forward,
    init_history,
    self_attention_logits,
)
from havit.errors import ConfigurationError, DimensionError, FormatError
from havit.tensor import Tensor

CHECKPOINT_MAGIC = b"HAVITCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    patch_size: int = 4
    d_model: int = 256
    num_heads: int = 8
    depth: int = 6
    mlp_ratio: float = 4.0
    num_classes: int = 100
    blend: BlendConfig = field(default_factory=BlendConfig)
    baseline_mode: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        P = self.patch_size
        if P < 1 or self.image_height % P or self.image_width % P:
            raise ConfigurationError(
                f"image {self.image_height}x{self.image_width} is not divisible into {P}x{P} patches")
        if self.d_model < 1 or self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by {self.num_heads} heads")
        if self.depth < 1 or self.num_classes < 1 or self.channels < 1:
            raise ConfigurationError("depth, num_classes and channels must be >= 1")
        if self.hidden_dim < 1:
            raise ConfigurationError(f"mlp_ratio={self.mlp_ratio} gives an empty MLP")
        if isinstance(self.blend, dict):
            object.__setattr__(self, "blend", BlendConfig(**self.blend))

    @property
    def num_patches(self) -> int:
        return self.image_height * self.image_width // self.patch_size**2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.d_model))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["blend"]["init_strategy"] = self.blend.init_strategy.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["blend"] = BlendConfig(**d.get("blend", {}))
        return cls(**d)


PRESETS = {
    "tiny": dict(image_height=32, image_width=32, patch_size=8, d_model=16,
                 num_heads=2, depth=2, mlp_ratio=4.0, num_classes=4),
    "desk": dict(depth=6, d_model=256, num_heads=8),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(**{**base, **overrides})


@dataclass
class ForwardTrace:
    histories: list[AttentionHistory]
    logits: Tensor
    initial_history: AttentionHistory | None = None


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, n, hid = config.d_model, config.seq_len, config.hidden_dim
    shapes = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (n, d),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.gamma": (d,), p + "ln1.beta": (d,),
            p + "attn.w_q": (d, d), p + "attn.w_k": (d, d), p + "attn.w_v": (d, d),
            p + "attn.w_o": (d, d), p + "attn.b_o": (d,),
            p + "ln2.gamma": (d,), p + "ln2.beta": (d,),
            p + "mlp.w1": (d, hid), p + "mlp.b1": (hid,),
            p + "mlp.w2": (hid, d), p + "mlp.b2": (d,),
        })
    shapes.update({
        "norm.gamma": (d,), "norm.beta": (d,),
        "head.weight": (d, config.num_classes), "head.bias": (config.num_classes,),
    })
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Truncated-normal weights and embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf == "beta" or leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, config.init_std)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def layer_params(params: dict[str, Tensor], i: int, num_heads: int) -> AttentionLayerParams:
    p = f"blocks.{i}."
    return AttentionLayerParams(
        w_q=params[p + "attn.w_q"], w_k=params[p + "attn.w_k"], w_v=params[p + "attn.w_v"],
        w_o=params[p + "attn.w_o"], b_o=params[p + "attn.b_o"],
        ln_gamma=params[p + "ln1.gamma"], ln_beta=params[p + "ln1.beta"],
        num_heads=num_heads,
    )


def patchify(image, P: int) -> Tensor:
    """Split ``[B, C, H, W]`` images into raster-ordered flattened ``P x P`` patches."""
    image = T.as_tensor(image)
    if image.ndim != 4:
        raise DimensionError(f"patchify expects [B, C, H, W], got {image.shape}")
    B, C, H, W = image.shape
    if P < 1 or H % P or W % P:
        raise ConfigurationError(f"image size H={H}, W={W} is not divisible by patch size P={P}")
    gh, gw = H // P, W // P
    x = T.reshape(image, (B, C, gh, P, gw, P))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (B, gh * gw, C * P * P))


def embed(patches: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Project patches, prepend the CLS token and add positional embeddings."""
    B, N, _ = patches.shape
    pos = params["pos_embed"]
    d = pos.shape[1]
    if pos.shape[0] != N + 1:
        raise DimensionError(f"pos_embed has {pos.shape[0]} rows for {N} patches + CLS")
    tokens = T.linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])
    cls = T.broadcast_to(T.reshape(params["cls_token"], (1, d)), (B, 1, d))
    x = T.concat([cls, tokens], axis=1)
    return T.add(x, T.broadcast_to(pos, (B, N + 1, d)))


def _mlp(x: Tensor, params: dict[str, Tensor], i: int) -> Tensor:
    p = f"blocks.{i}."
    hidden = T.gelu(T.linear(x, params[p + "mlp.w1"], params[p + "mlp.b1"]))
    return T.linear(hidden, params[p + "mlp.w2"], params[p + "mlp.b2"])


def encoder_forward(x: Tensor, config: ModelConfig, params: dict[str, Tensor],
                    batch_counter: int = 0, stream: int = TRAIN_STREAM,
                    fixed_histories: Sequence[Tensor] | None = None) -> ForwardTrace:
    """Run the pre-norm encoder stack and the classification head.

    ``batch_counter`` and ``stream`` select the random initial history; they
    are ignored for zero init and in baseline mode. ``fixed_histories``
    (one ``[B, h, n, n]`` tensor per layer) replaces the history each layer
    receives with a constant, which is what a detached history looks like
    to the finite-difference oracle.
    """
    B, n, d = x.shape
    if n != config.seq_len or d != config.d_model:
        raise DimensionError(f"encoder input {x.shape} does not match config (n={config.seq_len}, d={config.d_model})")
    h = config.num_heads
    blend = config.blend
    H0 = None
    H = None
    if fixed_histories is not None and len(fixed_histories) != config.depth:
        raise DimensionError(f"{len(fixed_histories)} fixed histories for depth {config.depth}")
    if not config.baseline_mode:
        H0 = init_history(blend.init_strategy, B, h, n, blend.seed, batch_counter, stream)
        H = H0
    histories = []
    for i in range(config.depth):
        ap = layer_params(params, i, h)
        if config.baseline_mode:
            Q, K, V = _qkv(x, ap)
            A = self_attention_logits(Q, K)
            y = _attend(A, V, ap)
            H = AttentionHistory(A, i + 1, self_logits=A)
        else:
            if fixed_histories is not None:
                H = AttentionHistory(T.detach(T.as_tensor(fixed_histories[i])), i)
            y, H = attention_layer_forward(x, H, ap, blend, layer_index=i + 1)
        histories.append(H)
        x = T.add(x, y)
        p = f"blocks.{i}."
        x = T.add(x, _mlp(T.layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"]), params, i))
    x = T.layer_norm(x, params["norm.gamma"], params["norm.beta"])
    logits = T.linear(T.select(x, 0, axis=1), params["head.weight"], params["head.bias"])
    return ForwardTrace(histories, logits, H0)


def forward(images, config: ModelConfig, params: dict[str, Tensor],
            batch_counter: int = 0, stream: int = TRAIN_STREAM,
            fixed_histories: Sequence[Tensor] | None = None) -> ForwardTrace:
    images = T.as_tensor(images)
    if images.shape[1:] != (config.channels, config.image_height, config.image_width):
        raise DimensionError(
            f"images {images.shape} do not match config "
            f"[B, {config.channels}, {config.image_height}, {config.image_width}]")
    x = embed(patchify(images, config.patch_size), params)
    return encoder_forward(x, config, params, batch_counter, stream, fixed_histories)


def extract_cls_attention(trace: ForwardTrace, layer: int) -> np.ndarray:
    """Head-averaged CLS-to-patch attention of encoder ``layer`` (1-based) as ``[B, g, g]``.

    The stored logits are softmaxed, the CLS->CLS entry is dropped and each
    head's row renormalised before averaging, so every map sums to 1.
    """
    if not 1 <= layer <= len(trace.histories):
        raise IndexError(f"layer {layer} out of range 1..{len(trace.histories)}")
    logits = trace.histories[layer - 1].logits.data
    N = logits.shape[-1] - 1
    g = math.isqrt(N)
    if g * g != N:
        raise ConfigurationError(f"{N} patches do not form a square grid")
    row = logits[:, :, 0, :]
    e = np.exp(row - row.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    patches = probs[:, :, 1:]
    patches = patches / patches.sum(axis=-1, keepdims=True)
    return patches.mean(axis=1).reshape(-1, g, g)


class HAViT:
    """Config plus named parameters, with a batch counter for the H_0 stream."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                raise DimensionError(f"parameter {name} missing or not of shape {shape}")

    def forward(self, images, batch_counter: int = 0, stream: int = TRAIN_STREAM) -> ForwardTrace:
        return forward(images, self.config, self.params, batch_counter, stream)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def save(self, path) -> None:
        save_checkpoint(path, self.config, self.params)

    @classmethod
    def load(cls, path) -> HAViT:
        config, params = load_checkpoint(path)
        return cls(config, params)


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor]) -> None:
    """Write ``magic | u32 version | u32 header_len | JSON header | <f8 payload``.

    The header echoes the config and lists each tensor's name, shape and
    element offset into the little-endian float64 payload.
    """
    entries, offset = [], 0
    for name in sorted(params):
        shape = list(params[name].shape)
        entries.append({"name": name, "shape": shape, "offset": offset})
        offset += math.prod(shape)
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "config": config.to_dict(),
                         "tensors": entries}, sort_keys=True).encode("utf-8")
    payload = np.concatenate([params[e["name"]].data.reshape(-1) for e in entries]) if entries else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    raw = Path(path).read_bytes()
    m = len(CHECKPOINT_MAGIC)
    if raw[:m] != CHECKPOINT_MAGIC or len(raw) < m + 8:
        raise FormatError(f"{path} is not a HAViT checkpoint")
    version, hlen = struct.unpack("<II", raw[m:m + 8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[m + 8:m + 8 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[m + 8 + hlen:], dtype="<f8")
    config = ModelConfig.from_dict(header["config"])
    params = {}
    for e in header["tensors"]:
        count = math.prod(e["shape"])
        chunk = payload[e["offset"]:e["offset"] + count]
        if chunk.size != count:
            raise FormatError(f"{path}: tensor {e['name']} truncated")
        params[e["name"]] = Tensor(chunk.reshape(e["shape"]), requires_grad=True, name=e["name"])
    return config, params


__all__ = [
    "ModelConfig", "ForwardTrace", "HAViT", "InitStrategy", "PRESETS", "preset",
    "patchify", "embed", "encoder_forward", "forward", "extract_cls_attention",
    "init_params", "param_shapes", "parameter_count", "save_checkpoint", "load_checkpoint",
]
