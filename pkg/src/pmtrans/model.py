"""Tiny vision transformer on the tape engine.

Patch embedding is a single affine map of flattened patches, which keeps
embedding and pixel-space mixing exactly interchangeable. Blocks are
pre-norm. Post-softmax attention maps are captured per layer for the
scoring paths. Pooling is either the class-token output or the mean of the
final patch features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import FormatError, ShapeError, Tensor

CKPT_MAGIC = b"PMTC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    n_layers: int = 2
    n_heads: int = 4
    embed_dim: int = 32
    mlp_ratio: float = 4.0
    n_classes: int = 4
    use_cls_token: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError("image_size must be a multiple of patch_size")
        if self.embed_dim % self.n_heads != 0:
            raise ShapeError("embed_dim must be a multiple of n_heads")
        if self.embed_dim < self.n_classes - 1:
            # a linear head cannot place K confident one-hots in fewer dims
            raise ShapeError("embed_dim must be at least n_classes - 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.n_patches + (1 if self.use_cls_token else 0)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class ForwardRecord:
    """Everything a single forward pass exposes to the rest of the system."""

    patch_seq: Tensor                 # embedded input patches (B, n, D), pre position
    attention: list[np.ndarray]       # per layer, post-softmax (B, H, s, s), detached
    patch_features: Tensor            # final-layer patch features (B, n, D)
    pooled: Tensor                    # (B, D)
    logits: Tensor                    # (B, K)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    vals = rng.standard_normal(shape) * std
    return np.clip(vals, -2.0 * std, 2.0 * std).astype(np.float32)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameter dict; insertion order fixes checkpoint block order."""
    p: dict[str, Tensor] = {}

    def par(name, arr):
        p[name] = Tensor(arr, requires_grad=True)

    par("embed.w", _trunc_normal(rng, (cfg.patch_dim, cfg.embed_dim)))
    par("embed.b", np.zeros(cfg.embed_dim, dtype=np.float32))
    par("pos", _trunc_normal(rng, (cfg.seq_len, cfg.embed_dim)))
    if cfg.use_cls_token:
        par("cls", _trunc_normal(rng, (1, 1, cfg.embed_dim)))
    hidden = int(cfg.embed_dim * cfg.mlp_ratio)
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        par(pre + "ln1.g", np.ones(cfg.embed_dim, dtype=np.float32))
        par(pre + "ln1.b", np.zeros(cfg.embed_dim, dtype=np.float32))
        par(pre + "qkv.w", _trunc_normal(rng, (cfg.embed_dim, 3 * cfg.embed_dim)))
        par(pre + "qkv.b", np.zeros(3 * cfg.embed_dim, dtype=np.float32))
        par(pre + "proj.w", _trunc_normal(rng, (cfg.embed_dim, cfg.embed_dim)))
        par(pre + "proj.b", np.zeros(cfg.embed_dim, dtype=np.float32))
        par(pre + "ln2.g", np.ones(cfg.embed_dim, dtype=np.float32))
        par(pre + "ln2.b", np.zeros(cfg.embed_dim, dtype=np.float32))
        par(pre + "fc1.w", _trunc_normal(rng, (cfg.embed_dim, hidden)))
        par(pre + "fc1.b", np.zeros(hidden, dtype=np.float32))
        par(pre + "fc2.w", _trunc_normal(rng, (hidden, cfg.embed_dim)))
        par(pre + "fc2.b", np.zeros(cfg.embed_dim, dtype=np.float32))
    par("norm.g", np.ones(cfg.embed_dim, dtype=np.float32))
    par("norm.b", np.zeros(cfg.embed_dim, dtype=np.float32))
    par("head.w", _trunc_normal(rng, (cfg.embed_dim, cfg.n_classes)))
    par("head.b", np.zeros(cfg.n_classes, dtype=np.float32))
    return p


ENCODER_PREFIXES = ("embed.", "pos", "cls", "blocks.", "norm.")
CLASSIFIER_PREFIXES = ("head.",)


def split_param_names(params: dict[str, Tensor]) -> tuple[list[str], list[str]]:
    """Encoder block vs classifier block, by name prefix."""
    enc = [k for k in params if k.startswith(ENCODER_PREFIXES)]
    cls = [k for k in params if k.startswith(CLASSIFIER_PREFIXES)]
    return enc, cls


def flatten_patches(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, C, H, W) pixels to (B, n, patch_dim) rows, grid row-major."""
    b, c, h, w = images.shape
    if c != cfg.channels or h != cfg.image_size or w != cfg.image_size:
        raise ShapeError(f"images {images.shape} do not match config")
    ps, g = cfg.patch_size, cfg.grid
    x = images.reshape(b, c, g, ps, g, ps)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, gy, gx, C, ps, ps)
    return np.ascontiguousarray(x.reshape(b, g * g, cfg.patch_dim), dtype=np.float32)


def patch_embed(images: np.ndarray, params: dict[str, Tensor],
                cfg: ModelConfig) -> Tensor:
    rows = Tensor(flatten_patches(images, cfg))
    return T.add(T.matmul(rows, params["embed.w"]), params["embed.b"])


def _attention(x: Tensor, params: dict[str, Tensor], pre: str, cfg: ModelConfig,
               store: list[np.ndarray]) -> Tensor:
    b, s, d = x.shape
    nh = cfg.n_heads
    hd = d // nh
    qkv = T.add(T.matmul(x, params[pre + "qkv.w"]), params[pre + "qkv.b"])
    q = T.slice_axis(qkv, 2, 0, d)
    k = T.slice_axis(qkv, 2, d, 2 * d)
    v = T.slice_axis(qkv, 2, 2 * d, 3 * d)

    def heads(t):
        return T.reshape(T.permute(T.reshape(t, (b, s, nh, hd)), (0, 2, 1, 3)),
                         (b * nh, s, hd))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = T.mul(T.matmul(qh, T.transpose(kh)), np.float32(1.0 / np.sqrt(hd)))
    attn = T.softmax(scores, axis=-1)
    store.append(attn.data.reshape(b, nh, s, s).copy())
    ctx = T.matmul(attn, vh)
    ctx = T.reshape(T.permute(T.reshape(ctx, (b, nh, s, hd)), (0, 2, 1, 3)), (b, s, d))
    return T.add(T.matmul(ctx, params[pre + "proj.w"]), params[pre + "proj.b"])


def encode(patch_seq: Tensor, params: dict[str, Tensor],
           cfg: ModelConfig) -> ForwardRecord:
    """Run the transformer over an embedded patch sequence (B, n, D)."""
    b, n, d = patch_seq.shape
    if n != cfg.n_patches or d != cfg.embed_dim:
        raise ShapeError(f"patch sequence {patch_seq.shape} does not match config")
    x = patch_seq
    if cfg.use_cls_token:
        x = T.concat([T.expand0(params["cls"], b), x], axis=1)
    x = T.add(x, params["pos"])
    attn_store: list[np.ndarray] = []
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        h = T.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = T.add(x, _attention(h, params, pre, cfg, attn_store))
        h = T.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h = T.add(T.matmul(T.gelu(T.add(T.matmul(h, params[pre + "fc1.w"]),
                                        params[pre + "fc1.b"])),
                           params[pre + "fc2.w"]),
                  params[pre + "fc2.b"])
        x = T.add(x, h)
    x = T.layer_norm(x, params["norm.g"], params["norm.b"])
    if cfg.use_cls_token:
        patch_features = T.slice_axis(x, 1, 1, cfg.seq_len)
        pooled = T.reshape(T.slice_axis(x, 1, 0, 1), (b, d))
    else:
        patch_features = x
        pooled = T.tmean(x, axis=1)
    logits = T.add(T.matmul(pooled, params["head.w"]), params["head.b"])
    return ForwardRecord(patch_seq=patch_seq, attention=attn_store,
                         patch_features=patch_features, pooled=pooled,
                         logits=logits)


def forward(images: np.ndarray, params: dict[str, Tensor],
            cfg: ModelConfig) -> ForwardRecord:
    return encode(patch_embed(images, params, cfg), params, cfg)


# ---------------------------------------------------------------------------
# checkpoint file
#
# magic "PMTC", version u32, then one block per parameter: name length u32,
# utf-8 name bytes, rank u32, extents u32 each, payload little-endian f32.
# Blocks run to end of file; insertion order of the dict is preserved.


def save_checkpoint(params: dict[str, Tensor], path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, t in params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(t.data.astype("<f4").tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"truncated header: {len(raw)} bytes at offset 0")
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    out: dict[str, np.ndarray] = {}
    off = 8
    while off < len(raw):
        try:
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            if len(raw[off:off + nlen]) != nlen:
                raise struct.error("short name")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            end = off + 4 * count
            if end > len(raw):
                raise struct.error("short payload")
            arr = np.frombuffer(raw, dtype="<f4", count=count,
                                offset=off).reshape(shape).copy()
            off = end
        except (struct.error, UnicodeDecodeError) as e:
            raise FormatError(f"corrupt block near offset {off}: {e}") from e
        out[name] = arr
    return out


def restore_params(params: dict[str, Tensor], blocks: dict[str, np.ndarray]) -> None:
    """Load checkpoint blocks into an existing parameter dict, strict on shape."""
    missing = set(params) - set(blocks)
    extra = set(blocks) - set(params)
    if missing or extra:
        raise FormatError(f"parameter names differ: missing={sorted(missing)} "
                          f"extra={sorted(extra)}")
    for name, t in params.items():
        if blocks[name].shape != t.data.shape:
            raise FormatError(f"shape mismatch for '{name}': checkpoint "
                              f"{blocks[name].shape} vs model {t.data.shape}")
        t.data = blocks[name].astype(np.float32)


def evaluate_accuracy(images: np.ndarray, labels: np.ndarray,
                      params: dict[str, Tensor], cfg: ModelConfig,
                      batch: int = 256) -> float:
    """Argmax accuracy without recording anything on a tape."""
    hits = 0
    for i in range(0, images.shape[0], batch):
        rec = forward(images[i:i + batch], params, cfg)
        hits += int((rec.logits.data.argmax(axis=1) == labels[i:i + batch]).sum())
    return hits / images.shape[0]
