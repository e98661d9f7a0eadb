"""Asymmetric ViT encoder/decoder for masked pretraining, plus the classifier.

Parameters live in a flat ``{name: Tensor}`` mapping inside :class:`Weights`.
Names are dotted paths (``enc.0.attn.q.w``) and double as checkpoint keys.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .patching import PatchMask, full_mask, patchify, sincos_pos_embed
from .tensor import Tensor

INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    mlp_ratio: int = 4
    dec_dim: int = 32
    dec_depth: int = 1
    dec_heads: int = 2

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} must divide image size {self.image_size}")
        for dim, heads, what in ((self.enc_dim, self.enc_heads, "encoder"),
                                 (self.dec_dim, self.dec_heads, "decoder")):
            if heads < 1 or dim % heads:
                raise ConfigError(f"{what} dim {dim} not divisible by {heads} heads")
            if dim % 4:
                raise ConfigError(f"{what} dim {dim} must be divisible by 4")
        if self.enc_depth < 0 or self.dec_depth < 0 or self.mlp_ratio < 1:
            raise ConfigError("depths must be >= 0 and mlp_ratio >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def vit_base(image_size: int = 224, patch_size: int = 16) -> ViTConfig:
    """ViT-B/16 encoder with the standard MAE decoder; for shape checks only."""
    return ViTConfig(image_size=image_size, patch_size=patch_size, enc_dim=768,
                     enc_depth=12, enc_heads=12, dec_dim=512, dec_depth=8, dec_heads=16)


@dataclass
class Weights:
    cfg: ViTConfig
    params: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self, prefixes: Sequence[str] | None = None) -> list[str]:
        if prefixes is None:
            return list(self.params)
        return [n for n in self.params if n.startswith(tuple(prefixes))]

    def num_params(self, prefixes: Sequence[str] | None = None) -> int:
        return sum(self.params[n].data.size for n in self.names(prefixes))

    def copy(self) -> "Weights":
        return Weights(self.cfg, {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
                                  for n, t in self.params.items()})

    def arrays(self) -> dict:
        return {n: t.data for n, t in self.params.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()


ENCODER_PREFIXES = ("patch_embed.", "enc.", "enc_norm.")
DECODER_PREFIXES = ("dec_embed.", "mask_token", "dec.", "dec_norm.", "dec_pred.")
HEAD_PREFIXES = ("head.",)


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _block_shapes(prefix: str, dim: int, mlp_ratio: int) -> list[tuple[str, tuple]]:
    hidden = dim * mlp_ratio
    return [
        (f"{prefix}.ln1.g", (dim,)), (f"{prefix}.ln1.b", (dim,)),
        (f"{prefix}.attn.q.w", (dim, dim)), (f"{prefix}.attn.q.b", (dim,)),
        (f"{prefix}.attn.k.w", (dim, dim)), (f"{prefix}.attn.k.b", (dim,)),
        (f"{prefix}.attn.v.w", (dim, dim)), (f"{prefix}.attn.v.b", (dim,)),
        (f"{prefix}.attn.proj.w", (dim, dim)), (f"{prefix}.attn.proj.b", (dim,)),
        (f"{prefix}.ln2.g", (dim,)), (f"{prefix}.ln2.b", (dim,)),
        (f"{prefix}.mlp.fc1.w", (dim, hidden)), (f"{prefix}.mlp.fc1.b", (hidden,)),
        (f"{prefix}.mlp.fc2.w", (hidden, dim)), (f"{prefix}.mlp.fc2.b", (dim,)),
    ]


def param_shapes(cfg: ViTConfig) -> list[tuple[str, tuple]]:
    """Every parameter name and shape, in canonical order."""
    shapes = [("patch_embed.w", (cfg.patch_dim, cfg.enc_dim)), ("patch_embed.b", (cfg.enc_dim,))]
    for i in range(cfg.enc_depth):
        shapes += _block_shapes(f"enc.{i}", cfg.enc_dim, cfg.mlp_ratio)
    shapes += [("enc_norm.g", (cfg.enc_dim,)), ("enc_norm.b", (cfg.enc_dim,))]
    shapes += [("dec_embed.w", (cfg.enc_dim, cfg.dec_dim)), ("dec_embed.b", (cfg.dec_dim,)),
               ("mask_token", (cfg.dec_dim,))]
    for i in range(cfg.dec_depth):
        shapes += _block_shapes(f"dec.{i}", cfg.dec_dim, cfg.mlp_ratio)
    shapes += [("dec_norm.g", (cfg.dec_dim,)), ("dec_norm.b", (cfg.dec_dim,)),
               ("dec_pred.w", (cfg.dec_dim, cfg.patch_dim)), ("dec_pred.b", (cfg.patch_dim,))]
    shapes += [("head.fc1.w", (cfg.enc_dim, cfg.enc_dim)), ("head.fc1.b", (cfg.enc_dim,)),
               ("head.fc2.w", (cfg.enc_dim, 1)), ("head.fc2.b", (1,))]
    return shapes


def init_weights(cfg: ViTConfig, seed: int = 0) -> Weights:
    """Truncated-normal projections (std 0.02, cut at 2 std), zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".w") or name == "mask_token":
            data = _trunc_normal(rng, shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Weights(cfg, params)


def is_no_decay(name: str) -> bool:
    """Biases, norm parameters and the mask token are exempt from weight decay."""
    return name.endswith(".b") or name.endswith(".g") or name == "mask_token"


def layer_id(name: str, depth: int) -> int:
    """Block index used for layer-wise lr decay; the head sits at ``depth + 1``."""
    if name.startswith("patch_embed."):
        return 0
    if name.startswith("enc."):
        return int(name.split(".")[1]) + 1
    return depth + 1


# ---------------------------------------------------------------------------
# forward pass


def _attention(x: Tensor, w: Weights, prefix: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads

    def split(t):
        return T.permute(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(T.linear(x, w[f"{prefix}.q.w"], w[f"{prefix}.q.b"]))
    k = split(T.linear(x, w[f"{prefix}.k.w"], w[f"{prefix}.k.b"]))
    v = split(T.linear(x, w[f"{prefix}.v.w"], w[f"{prefix}.v.b"]))
    att = T.softmax_lastdim(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh)))
    out = T.reshape(T.permute(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
    return T.linear(out, w[f"{prefix}.proj.w"], w[f"{prefix}.proj.b"])


def _block(x: Tensor, w: Weights, prefix: str, heads: int) -> Tensor:
    h = T.layer_norm(x, w[f"{prefix}.ln1.g"], w[f"{prefix}.ln1.b"])
    x = T.add(x, _attention(h, w, f"{prefix}.attn", heads))
    h = T.layer_norm(x, w[f"{prefix}.ln2.g"], w[f"{prefix}.ln2.b"])
    h = T.gelu(T.linear(h, w[f"{prefix}.mlp.fc1.w"], w[f"{prefix}.mlp.fc1.b"]))
    return T.add(x, T.linear(h, w[f"{prefix}.mlp.fc2.w"], w[f"{prefix}.mlp.fc2.b"]))


def encode_tokens(patches, positions, w: Weights) -> Tensor:
    """Run the encoder over an explicit token list.

    ``patches`` is [B, V, p*p]; ``positions`` ([V] or [B, V]) picks each
    token's positional embedding.  Token order is free, which is what makes
    the encoder permutation-equivariant.
    """
    cfg = w.cfg
    patches = T.as_tensor(patches)
    if patches.ndim != 3 or patches.shape[-1] != cfg.patch_dim:
        raise T.ShapeError("encode_tokens", patches.shape, (None, None, cfg.patch_dim))
    pos = _pos_table(cfg.enc_dim, cfg.grid)
    positions = np.asarray(positions)
    pos_rows = pos[positions]
    if pos_rows.ndim == 2:
        pos_rows = pos_rows[None]
    x = T.add(T.linear(patches, w["patch_embed.w"], w["patch_embed.b"]), pos_rows)
    for i in range(cfg.enc_depth):
        x = _block(x, w, f"enc.{i}", cfg.enc_heads)
    return T.layer_norm(x, w["enc_norm.g"], w["enc_norm.b"])


def _as_batch(patches, masks):
    patches = T.as_tensor(patches)
    single = patches.ndim == 2
    if single:
        patches = T.reshape(patches, (1,) + patches.shape)
        masks = [masks]
    elif isinstance(masks, PatchMask):
        masks = [masks] * patches.shape[0]
    if len(masks) != patches.shape[0]:
        raise ValueError(f"{len(masks)} masks for a batch of {patches.shape[0]}")
    return patches, list(masks), single


def encode_visible(patches, masks, w: Weights) -> Tensor:
    """Encode only the visible patches.

    ``patches`` is [N, p*p] with one :class:`PatchMask` (returns [V, D]) or
    [B, N, p*p] with a mask per sample (returns [B, V, D]).
    """
    patches, masks, single = _as_batch(patches, masks)
    if patches.shape[1] != w.cfg.num_patches:
        raise T.ShapeError("encode_visible", patches.shape, (w.cfg.num_patches, w.cfg.patch_dim))
    vis = np.stack([m.visible for m in masks])
    out = encode_tokens(T.gather_rows(patches, vis), vis, w)
    return T.reshape(out, out.shape[1:]) if single else out


def decode_full(latents, masks, w: Weights) -> Tensor:
    """Reconstruct every patch from visible-token latents plus mask tokens."""
    cfg = w.cfg
    latents = T.as_tensor(latents)
    single = latents.ndim == 2
    if single:
        latents = T.reshape(latents, (1,) + latents.shape)
        masks = [masks]
    elif isinstance(masks, PatchMask):
        masks = [masks] * latents.shape[0]
    b, v, _ = latents.shape
    if len(masks) != b or any(len(m.visible) != v for m in masks):
        raise T.ShapeError("decode_full", latents.shape,
                           tuple(len(m.visible) for m in masks), detail="mask/latent count mismatch")
    n = masks[0].num_patches
    if n != cfg.num_patches:
        raise T.ShapeError("decode_full", (n,), (cfg.num_patches,), detail="mask size vs config")
    x = T.linear(latents, w["dec_embed.w"], w["dec_embed.b"])
    if n > v:
        tokens = T.expand(w["mask_token"], (b, n - v, cfg.dec_dim))
        x = T.concat([x, tokens], axis=1)
        x = T.gather_rows(x, np.stack([m.restore_order for m in masks]))
    x = T.add(x, _pos_table(cfg.dec_dim, cfg.grid)[None])
    for i in range(cfg.dec_depth):
        x = _block(x, w, f"dec.{i}", cfg.dec_heads)
    x = T.layer_norm(x, w["dec_norm.g"], w["dec_norm.b"])
    out = T.linear(x, w["dec_pred.w"], w["dec_pred.b"])
    return T.reshape(out, out.shape[1:]) if single else out


def reconstruct(patches, masks, w: Weights) -> Tensor:
    return decode_full(encode_visible(patches, masks, w), masks, w)


def pooled_features(images, w: Weights) -> Tensor:
    """Mean-pooled encoder tokens over all patches, [B, D]."""
    cfg = w.cfg
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.shape[-2:] != (cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"image shape {images.shape[-2:]} does not match model image size {cfg.image_size}")
    patches = patchify(images, cfg.patch_size)
    tokens = encode_tokens(patches, np.arange(cfg.num_patches), w)
    return T.mean(tokens, axis=1)


def head(features, w: Weights) -> Tensor:
    h = T.gelu(T.linear(T.as_tensor(features), w["head.fc1.w"], w["head.fc1.b"]))
    out = T.linear(h, w["head.fc2.w"], w["head.fc2.b"])
    return T.reshape(out, (out.shape[0],))


def classify(images, w: Weights) -> Tensor:
    """Logits [B] for already-degraded images [B, H, W] (or one [H, W] image)."""
    return head(pooled_features(images, w), w)


_POS_CACHE: dict = {}


def _pos_table(dim: int, grid: int) -> np.ndarray:
    key = (dim, grid)
    if key not in _POS_CACHE:
        table = sincos_pos_embed(dim, grid)
        table.setflags(write=False)
        _POS_CACHE[key] = table
    return _POS_CACHE[key]


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (all integers little-endian):
#   8 bytes   magic b"DMIMCKPT"
#   u32       format version
#   u64       header length L
#   L bytes   UTF-8 JSON header, keys sorted:
#               {"config": {...}, "meta": {...},
#                "params": [{"name", "shape", "offset"}, ...]}
#   rest      parameter payload, float64 little-endian, C order,
#             each array starting at its "offset" into the payload

MAGIC = b"DMIMCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, w: Weights, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in w.params:
        arr = np.ascontiguousarray(w.params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": w.cfg.to_dict(), "meta": meta or {}, "params": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[Weights, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    payload = memoryview(raw)[start + hlen:]
    cfg = ViTConfig.from_dict(header["config"])
    params = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        params[e["name"]] = Tensor(arr.reshape(e["shape"]).astype(np.float64),
                                   requires_grad=True, name=e["name"])
    expected = {n: s for n, s in param_shapes(cfg)}
    got = {n: t.shape for n, t in params.items()}
    if got != expected:
        raise CheckpointError(f"{path}: parameter set does not match its config")
    return Weights(cfg, params), header["meta"]
