"""Two-branch classifier: tabular MLP plus tubelet-transformer image branches.

Volumes are cut into non-overlapping t*h*w tubes, linearly projected to
tokens, and run through a pre-norm transformer encoder with joint attention
over all tokens; a class token is read out. Branch embeddings (one per ROI,
plus the tabular embedding in mixed mode) are concatenated and classified.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from math import prod, sqrt
from typing import Optional

import numpy as np

from .tensor import (
    Tensor,
    add,
    bmm,
    concat,
    dropout,
    gelu,
    layer_norm,
    matmul,
    mul,
    narrow,
    reshape,
    softmax,
    transpose,
)

MODE_MIXED = "mixed"
MODE_IMAGE_ONLY = "image-only"

CHECKPOINT_MAGIC = b"MWT1"


class ConfigError(ValueError):
    """Invalid model configuration."""


class CheckpointError(ValueError):
    """Malformed parameter checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    image_dims: tuple = (25, 32, 32, 3)  # (T slices, H, W, C)
    tubelet: tuple = (5, 8, 8)
    embed_dim: int = 64
    depth: int = 4
    heads: int = 8
    mlp_ratio: float = 2.0
    dropout_rate: float = 0.2
    tabular_dim: int = 4
    tabular_hidden: tuple = (16, 8)
    num_branches: int = 1
    num_classes: int = 2
    mode: str = MODE_MIXED

    def __post_init__(self):
        t, h, w = self.tubelet
        T, H, W, C = self.image_dims
        if T % t or H % h or W % w:
            raise ConfigError(
                f"tubelet {self.tubelet} does not divide image dims "
                f"{self.image_dims[:3]}")
        if min(t, h, w, C) < 1:
            raise ConfigError("tubelet and channel sizes must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_classes != 2:
            raise ConfigError("only binary classification is supported")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} out of range")
        if self.depth < 1 or self.num_branches < 1:
            raise ConfigError("depth and num_branches must be >= 1")
        if self.mode not in (MODE_MIXED, MODE_IMAGE_ONLY):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == MODE_MIXED and len(self.tabular_hidden) < 1:
            raise ConfigError("mixed mode needs at least one tabular layer")

    @property
    def patch_dim(self) -> int:
        t, h, w = self.tubelet
        return t * h * w * self.image_dims[3]

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(self.embed_dim * self.mlp_ratio))

    @property
    def fused_width(self) -> int:
        width = self.num_branches * self.embed_dim
        if self.mode == MODE_MIXED:
            width += self.tabular_hidden[-1]
        return width


def count_tokens(image_dims, tubelet) -> int:
    """Tokens per volume: one per non-overlapping tubelet."""
    T, H, W = image_dims[:3]
    t, h, w = tubelet
    if T % t or H % h or W % w:
        raise ConfigError(f"tubelet {tubelet} does not divide {image_dims[:3]}")
    return (T // t) * (H // h) * (W // w)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every learnable tensor's shape, as a pure function of the config."""
    d = config.embed_dim
    n_tokens = count_tokens(config.image_dims, config.tubelet)
    hidden = config.mlp_hidden
    shapes: dict[str, tuple] = {}
    for i in range(config.num_branches):
        p = f"branch{i}"
        shapes[f"{p}.tubelet.weight"] = (config.patch_dim, d)
        shapes[f"{p}.tubelet.bias"] = (d,)
        shapes[f"{p}.cls"] = (1, d)
        shapes[f"{p}.pos"] = (n_tokens + 1, d)
        for l in range(config.depth):
            b = f"{p}.block{l}"
            shapes[f"{b}.ln1.gamma"] = (d,)
            shapes[f"{b}.ln1.beta"] = (d,)
            for proj in ("q", "k", "v", "o"):
                shapes[f"{b}.attn.w{proj}"] = (d, d)
            shapes[f"{b}.ln2.gamma"] = (d,)
            shapes[f"{b}.ln2.beta"] = (d,)
            shapes[f"{b}.mlp.w1"] = (d, hidden)
            shapes[f"{b}.mlp.b1"] = (hidden,)
            shapes[f"{b}.mlp.w2"] = (hidden, d)
            shapes[f"{b}.mlp.b2"] = (d,)
        shapes[f"{p}.norm.gamma"] = (d,)
        shapes[f"{p}.norm.beta"] = (d,)
    if config.mode == MODE_MIXED:
        prev = config.tabular_dim
        for j, width in enumerate(config.tabular_hidden):
            shapes[f"tabular.layer{j}.weight"] = (prev, width)
            shapes[f"tabular.layer{j}.bias"] = (width,)
            prev = width
    shapes["head.weight"] = (config.fused_width, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Weights ~ truncated normal(0.02), pos ~ normal(0.02), rest zeros/ones."""
    rng = np.random.default_rng([int(seed), 0x1A17])
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "pos":
            data = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "gamma":
            data = np.ones(shape)
        elif leaf.startswith("w"):  # weight, wq/wk/wv/wo, w1/w2
            data = _trunc_normal(rng, shape, 0.02)
        else:  # biases, beta offsets, class token
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def flatten_params(params: dict[str, Tensor]) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in params.values()]) \
        if params else np.zeros(0)


def params_from_vector(vec: Tensor, shapes: dict[str, tuple]) -> dict[str, Tensor]:
    """Differentiable unflatten, for whole-model gradient checks."""
    out = {}
    offset = 0
    for name, shape in shapes.items():
        n = prod(shape)
        out[name] = reshape(narrow(vec, 0, offset, n), shape)
        offset += n
    return out


def extract_tubelet_patches(volume: np.ndarray, tubelet) -> np.ndarray:
    """Cut a (T,H,W,C) volume (or (B,...) batch) into flattened tubelets.

    Token order is row-major over (temporal, height, width) block indices;
    each block flattens slice-major, then row, column, channel.
    """
    t, h, w = tubelet
    batched = volume.ndim == 5
    vol = volume if batched else volume[None]
    B, T, H, W, C = vol.shape
    if T % t or H % h or W % w:
        raise ConfigError(f"tubelet {tubelet} does not divide volume {vol.shape[1:4]}")
    blocks = vol.reshape(B, T // t, t, H // h, h, W // w, w, C)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    patches = blocks.reshape(B, (T // t) * (H // h) * (W // w), t * h * w * C)
    return patches if batched else patches[0]


def tubelet_embed(volume: np.ndarray, weight: Tensor, bias: Tensor,
                  tubelet) -> Tensor:
    """Project flattened tubelets to tokens: (B,N,d) (or (N,d) unbatched)."""
    patches = extract_tubelet_patches(np.asarray(volume, dtype=np.float64), tubelet)
    return add(matmul(Tensor(patches), weight), bias)


def add_cls_and_pos(tokens: Tensor, cls: Tensor, pos: Tensor) -> Tensor:
    """Prepend the class token at index 0 and add positional embeddings."""
    B = tokens.shape[0]
    cls_rows = add(Tensor(np.zeros((B, 1, cls.shape[-1]))), cls)
    return add(concat([cls_rows, tokens], axis=1), pos)


def attention_block(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int,
                    dropout_rate: float, training: bool,
                    rng: Optional[np.random.Generator]) -> Tensor:
    """Pre-norm residual block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    B, M, d = x.shape
    dh = d // heads
    scale = Tensor(1.0 / sqrt(dh))

    h = layer_norm(x, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
    q = matmul(h, p[f"{prefix}.attn.wq"])
    k = matmul(h, p[f"{prefix}.attn.wk"])
    v = matmul(h, p[f"{prefix}.attn.wv"])

    def split_heads(t: Tensor) -> Tensor:
        t = reshape(t, (B, M, heads, dh))
        return reshape(transpose(t, (0, 2, 1, 3)), (B * heads, M, dh))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = mul(bmm(q, transpose(k, (0, 2, 1))), scale)
    attn = softmax(scores, axis=2)
    attn = dropout(attn, dropout_rate, training, rng)
    ctx = bmm(attn, v)
    ctx = reshape(transpose(reshape(ctx, (B, heads, M, dh)), (0, 2, 1, 3)),
                  (B, M, d))
    x = add(x, matmul(ctx, p[f"{prefix}.attn.wo"]))

    h = layer_norm(x, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
    h = gelu(add(matmul(h, p[f"{prefix}.mlp.w1"]), p[f"{prefix}.mlp.b1"]))
    h = add(matmul(h, p[f"{prefix}.mlp.w2"]), p[f"{prefix}.mlp.b2"])
    h = dropout(h, dropout_rate, training, rng)
    return add(x, h)


def encode_image_branch(volumes: np.ndarray, params: dict[str, Tensor],
                        branch: int, config: ModelConfig, training: bool = False,
                        rng: Optional[np.random.Generator] = None) -> Tensor:
    """Full image branch: (B,T,H,W,C) volumes -> (B,d) class-token embedding."""
    volumes = np.asarray(volumes, dtype=np.float64)
    if volumes.ndim == 4:
        volumes = volumes[None]
    if volumes.shape[1:] != tuple(config.image_dims):
        raise ConfigError(
            f"volume dims {volumes.shape[1:]} do not match config "
            f"{tuple(config.image_dims)}")
    p = f"branch{branch}"
    tokens = tubelet_embed(volumes, params[f"{p}.tubelet.weight"],
                           params[f"{p}.tubelet.bias"], config.tubelet)
    x = add_cls_and_pos(tokens, params[f"{p}.cls"], params[f"{p}.pos"])
    for l in range(config.depth):
        x = attention_block(x, params, f"{p}.block{l}", config.heads,
                            config.dropout_rate, training, rng)
    x = layer_norm(x, params[f"{p}.norm.gamma"], params[f"{p}.norm.beta"])
    cls_row = narrow(x, 1, 0, 1)
    return reshape(cls_row, (x.shape[0], config.embed_dim))


def mlp_branch_forward(features: np.ndarray, params: dict[str, Tensor],
                       config: ModelConfig, training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tensor:
    """Dense layers with GELU between them; last hidden is the embedding."""
    del training, rng  # no dropout in the tabular branch
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None]
    if features.shape[1] != config.tabular_dim:
        raise ConfigError(
            f"tabular feature count {features.shape[1]} != {config.tabular_dim}")
    x = Tensor(features)
    last = len(config.tabular_hidden) - 1
    for j in range(len(config.tabular_hidden)):
        x = add(matmul(x, params[f"tabular.layer{j}.weight"]),
                params[f"tabular.layer{j}.bias"])
        if j != last:
            x = gelu(x)
    return x


def fuse_classify(embeddings: list[Tensor], params: dict[str, Tensor],
                  config: ModelConfig, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Concatenate branch embeddings, dropout, dense to 2 logits, softmax."""
    if not embeddings:
        raise ValueError("fuse_classify needs at least one branch embedding")
    fused = embeddings[0] if len(embeddings) == 1 else concat(embeddings, axis=1)
    fused = dropout(fused, config.dropout_rate, training, rng)
    logits = add(matmul(fused, params["head.weight"]), params["head.bias"])
    return softmax(logits, axis=1)


def forward_batch(config: ModelConfig, params: dict[str, Tensor],
                  tabular: Optional[np.ndarray], volumes: list[np.ndarray],
                  training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Class probabilities (B,2) for a batch of mixed samples."""
    if len(volumes) != config.num_branches:
        raise ValueError(
            f"expected {config.num_branches} image branches, got {len(volumes)}")
    embeddings: list[Tensor] = []
    if config.mode == MODE_MIXED:
        if tabular is None:
            raise ValueError("mixed mode requires tabular features")
        embeddings.append(mlp_branch_forward(tabular, params, config,
                                             training, rng))
    for i, vol in enumerate(volumes):
        embeddings.append(encode_image_branch(vol, params, i, config,
                                              training, rng))
    return fuse_classify(embeddings, params, config, training, rng)


def forward(config: ModelConfig, params: dict[str, Tensor],
            tabular: Optional[np.ndarray], volumes: list[np.ndarray],
            training: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Single-sample convenience wrapper: returns probabilities of shape (2,)."""
    tab = None if tabular is None else np.asarray(tabular)[None]
    vols = [np.asarray(v)[None] for v in volumes]
    probs = forward_batch(config, params, tab, vols, training, rng)
    return reshape(probs, (2,))


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Write params: magic, manifest (name/shape/offset), raw LE float64."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"entries": entries}, sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    (mlen,) = struct.unpack("<I", blob[4:8])
    try:
        manifest = json.loads(blob[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    payload = blob[8 + mlen:]
    params: dict[str, Tensor] = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        n = prod(shape) if shape else 1
        start = entry["offset"]
        end = start + 8 * n
        if end > len(payload):
            raise CheckpointError(
                f"checkpoint payload truncated for {entry['name']!r}")
        arr = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape)
        params[entry["name"]] = Tensor(arr.copy(), requires_grad=True)
    return params
