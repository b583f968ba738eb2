"""Forward-only transformer encoder for validating token-pack semantics.

This is deliberately a toy: small dims, numpy float64 math, no training.
It exists so sequence-level properties of the tokenizer are observable
end to end; the two that matter are that the CLS output is invariant to
reordering valid tokens (attention is a set operation once positions are
additive) and that masked pad rows cannot influence it at all (their keys
are excluded from every softmax and their residual streams are never read).

Weights live in a named-tensor container ("CHWT"); see save_weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._util import atomic_write
from .embeddings import EmbeddingTable, PosGrid, position_for_tokens, scale_embed
from .tokenizer import TokenPack

WEIGHTS_MAGIC = b"CHWT"
WEIGHTS_VERSION = 1
HEAD_KINDS = ("scalar_score", "distribution")


class WeightsFormatError(ValueError):
    """Raised when weight-container bytes do not parse."""


@dataclass(frozen=True)
class ViTConfig:
    embed_dim: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 16
    channels: int = 3
    head_kind: str = "scalar_score"
    head_bins: int = 10

    def __post_init__(self):
        if self.embed_dim < 1 or self.layers < 0 or self.heads < 1:
            raise ValueError("bad encoder dimensions")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must divide evenly across heads")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.head_kind == "distribution" and self.head_bins < 2:
            raise ValueError("distribution head needs >= 2 bins")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def out_dim(self) -> int:
        return 1 if self.head_kind == "scalar_score" else self.head_bins


@dataclass
class Weights:
    """Named float32 tensors; see expected_tensor_shapes for the layout."""

    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"missing tensor {name!r}") from None

    def pos_grid(self) -> PosGrid:
        return PosGrid(self["pos.grid"], self["pos.cls"])

    def embedding_table(self) -> EmbeddingTable:
        return EmbeddingTable(self["scales.vectors"], self["scales.mask"])


def expected_tensor_shapes(
    cfg: ViTConfig, grid_rows: int, grid_cols: int, num_scales: int
) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    hidden = cfg.mlp_ratio * d
    shapes = {
        "patch_proj.weight": (d, cfg.patch_size * cfg.patch_size * cfg.channels),
        "patch_proj.bias": (d,),
        "cls": (d,),
        "pos.grid": (grid_rows, grid_cols, d),
        "pos.cls": (d,),
        "scales.vectors": (num_scales, d),
        "scales.mask": (d,),
        "head.weight": (cfg.out_dim, d),
        "head.bias": (cfg.out_dim,),
    }
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        shapes[b + "ln1.gamma"] = (d,)
        shapes[b + "ln1.beta"] = (d,)
        shapes[b + "attn.qkv.weight"] = (3 * d, d)
        shapes[b + "attn.qkv.bias"] = (3 * d,)
        shapes[b + "attn.out.weight"] = (d, d)
        shapes[b + "attn.out.bias"] = (d,)
        shapes[b + "ln2.gamma"] = (d,)
        shapes[b + "ln2.beta"] = (d,)
        shapes[b + "mlp.fc1.weight"] = (hidden, d)
        shapes[b + "mlp.fc1.bias"] = (hidden,)
        shapes[b + "mlp.fc2.weight"] = (d, hidden)
        shapes[b + "mlp.fc2.bias"] = (d,)
    return shapes


def validate_weights(
    weights: Weights, cfg: ViTConfig, grid_rows: int, grid_cols: int, num_scales: int
) -> None:
    expected = expected_tensor_shapes(cfg, grid_rows, grid_cols, num_scales)
    for name, shape in expected.items():
        t = weights[name]
        if t.shape != shape:
            raise ValueError(f"tensor {name!r} has shape {t.shape}, expected {shape}")


def init_weights(
    cfg: ViTConfig,
    grid_rows: int = 16,
    grid_cols: int = 16,
    num_scales: int = 2,
    seed: int = 0,
) -> Weights:
    """Deterministic synthetic weights: N(0, 0.02), LayerNorm at identity."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, cfg.embed_dim, cfg.layers]))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_tensor_shapes(cfg, grid_rows, grid_cols, num_scales).items():
        if name.endswith("gamma"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(("beta", "bias")):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
    return Weights(tensors)


def patch_encode(pack: TokenPack, weights: Weights) -> np.ndarray:
    """Linear projection of flattened token pixels: (length, embed_dim) f64."""
    w = weights["patch_proj.weight"].astype(np.float64)
    b = weights["patch_proj.bias"].astype(np.float64)
    flat = pack.pixels.reshape(pack.length, -1).astype(np.float64)
    if flat.shape[1] != w.shape[1]:
        raise ValueError(
            f"token pixels ({flat.shape[1]}) do not match projection ({w.shape[1]})"
        )
    return flat @ w.T + b


def assemble_input(
    encoded: np.ndarray,
    positions: np.ndarray,
    scales: np.ndarray,
    valid_mask: np.ndarray,
    weights: Weights,
) -> tuple[np.ndarray, np.ndarray]:
    """Build the encoder sequence: CLS row, then token rows.

    Valid rows are encoded + position + scale; pad rows are replaced by the
    mask vector outright. Returns (sequence (l+1, d) float64, key mask (l+1,)).
    """
    l, d = encoded.shape
    if positions.shape != (l, d) or scales.shape != (l, d) or valid_mask.shape != (l,):
        raise ValueError("assemble_input shape mismatch")
    seq = np.empty((l + 1, d), dtype=np.float64)
    seq[0] = weights["cls"].astype(np.float64) + weights["pos.cls"].astype(np.float64)
    rows = encoded + positions.astype(np.float64) + scales.astype(np.float64)
    rows[~valid_mask] = weights["scales.mask"].astype(np.float64)
    seq[1:] = rows
    key_mask = np.concatenate([[True], valid_mask])
    return seq, key_mask


def _layer_norm(x, gamma, beta, eps=1e-6):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def _softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def _gelu(x):
    # tanh form; exact erf is not worth a dependency for a toy encoder
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _attention(x, key_mask, weights, prefix, cfg: ViTConfig):
    d, h, dh = cfg.embed_dim, cfg.heads, cfg.head_dim
    qkv = x @ weights[prefix + "attn.qkv.weight"].astype(np.float64).T
    qkv = qkv + weights[prefix + "attn.qkv.bias"].astype(np.float64)
    q, k, v = np.split(qkv, 3, axis=1)
    L = x.shape[0]
    q = q.reshape(L, h, dh).transpose(1, 0, 2)
    k = k.reshape(L, h, dh).transpose(1, 0, 2)
    v = v.reshape(L, h, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    scores[:, :, ~key_mask] = -np.inf
    attn = _softmax(scores, axis=-1)
    out = (attn @ v).transpose(1, 0, 2).reshape(L, d)
    out = out @ weights[prefix + "attn.out.weight"].astype(np.float64).T
    return out + weights[prefix + "attn.out.bias"].astype(np.float64)


def _mlp(x, weights, prefix):
    h = _gelu(x @ weights[prefix + "mlp.fc1.weight"].astype(np.float64).T
              + weights[prefix + "mlp.fc1.bias"].astype(np.float64))
    return h @ weights[prefix + "mlp.fc2.weight"].astype(np.float64).T + weights[
        prefix + "mlp.fc2.bias"
    ].astype(np.float64)


def encoder_forward(
    seq: np.ndarray, key_mask: np.ndarray, weights: Weights, cfg: ViTConfig
) -> np.ndarray:
    """Pre-norm transformer stack over an assembled sequence.

    Pad keys are masked out of every attention softmax. Zero layers is the
    identity. Non-finite activations raise instead of propagating quietly.
    """
    if seq.ndim != 2 or seq.shape[0] != key_mask.shape[0]:
        raise ValueError("sequence/mask shape mismatch")
    if not key_mask[0]:
        raise ValueError("the CLS row must be a valid key")
    x = seq.astype(np.float64)
    for i in range(cfg.layers):
        prefix = f"blocks.{i}."
        x = x + _attention(
            _layer_norm(
                x,
                weights[prefix + "ln1.gamma"].astype(np.float64),
                weights[prefix + "ln1.beta"].astype(np.float64),
            ),
            key_mask,
            weights,
            prefix,
            cfg,
        )
        x = x + _mlp(
            _layer_norm(
                x,
                weights[prefix + "ln2.gamma"].astype(np.float64),
                weights[prefix + "ln2.beta"].astype(np.float64),
            ),
            weights,
            prefix,
        )
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite activations after layer {i}")
    return x


def head(cls_state: np.ndarray, weights: Weights, cfg: ViTConfig):
    """Map the CLS state to a scalar score or a softmax distribution."""
    logits = weights["head.weight"].astype(np.float64) @ cls_state + weights[
        "head.bias"
    ].astype(np.float64)
    if cfg.head_kind == "scalar_score":
        return float(logits[0])
    return _softmax(logits, axis=-1)


def forward_pack(pack: TokenPack, weights: Weights, cfg: ViTConfig) -> dict:
    """Full pipeline on one pack; returns sequence, cls state, and head output."""
    encoded = patch_encode(pack, weights)
    positions = position_for_tokens(pack, weights.pos_grid())
    scales = scale_embed(pack, weights.embedding_table())
    seq, key_mask = assemble_input(encoded, positions, scales, pack.valid_mask, weights)
    out = encoder_forward(seq, key_mask, weights, cfg)
    return {"sequence": out, "cls": out[0], "output": head(out[0], weights, cfg)}


def save_weights(weights: Weights, path) -> None:
    """Serialize named tensors, atomically.

    Little-endian layout: magic "CHWT" | u32 version | u32 tensor count,
    then per tensor (sorted by name): u16 name length | UTF-8 name |
    u8 ndim | u32 dims | f32 row-major data. Sorting makes the byte output
    a pure function of the tensor contents.
    """
    names = sorted(weights.tensors)
    parts = [struct.pack("<4sII", WEIGHTS_MAGIC, WEIGHTS_VERSION, len(names))]
    for name in names:
        t = np.ascontiguousarray(weights.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:32]}...")
        if t.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} has too many dims")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.tobytes())
    atomic_write(path, b"".join(parts), prefix=".weights-")


def load_weights(path, cfg: ViTConfig | None = None) -> Weights:
    """Parse a weight container; validates against cfg when one is given.

    Validation infers the position-grid dims and scale count from the stored
    tensors themselves, so it checks everything else against the config.
    """
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12:
        raise WeightsFormatError("truncated weights header")
    magic, version, count = struct.unpack_from("<4sII", buf, 0)
    if magic != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < off + 2:
            raise WeightsFormatError("truncated tensor name length")
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        if len(buf) < off + name_len + 1:
            raise WeightsFormatError("truncated tensor name")
        name = buf[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        if len(buf) < off + 4 * ndim:
            raise WeightsFormatError("truncated tensor dims")
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n_elements = 1
        for d in dims:
            n_elements *= d
        nbytes = 4 * n_elements
        if len(buf) < off + nbytes:
            raise WeightsFormatError(f"truncated data for tensor {name!r}")
        tensors[name] = (
            np.frombuffer(buf, dtype="<f4", count=n_elements, offset=off)
            .reshape(dims)
            .astype(np.float32)
        )
        off += nbytes
    if off != len(buf):
        raise WeightsFormatError("trailing bytes after last tensor")
    weights = Weights(tensors)
    if cfg is not None:
        try:
            grid = weights["pos.grid"]
            num_scales = weights["scales.vectors"].shape[0]
            validate_weights(weights, cfg, grid.shape[0], grid.shape[1], num_scales)
        except (KeyError, ValueError) as exc:
            raise WeightsFormatError(f"weights do not match config: {exc}") from exc
    return weights
