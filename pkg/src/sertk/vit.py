"""Vision-transformer encoder and classification head for spectrogram images.

Layout follows the usual pre-norm ViT: patch projection, CLS token and
position embeddings, ``depth`` blocks of (LN -> multi-head attention ->
residual, LN -> MLP -> residual), a final LN and a linear head on the CLS
row. The ``beit`` variant adds a learned per-head relative position bias to
the attention logits; everything else is shared.
"""

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff import ops
from .errors import NonFiniteValue, ShapeMismatch

VARIANTS = ("vit", "beit")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    channels: int = 3
    patch_size: int = 16
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_dim: int = 128
    n_classes: int = 4
    variant: str = "vit"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.n_classes != 4:
            raise ValueError("the classifier head is fixed at 4 emotion classes")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if min(self.channels, self.depth, self.mlp_dim) < 1:
            raise ValueError("channels, depth and mlp_dim must be positive")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid ** 2

    @property
    def seq_len(self):
        return self.n_patches + 1

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def patch_dim(self):
        return self.patch_size ** 2 * self.channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRESETS = {
    "toy-vit": ModelConfig(),
    "toy-beit": ModelConfig(variant="beit"),
    "vit-base": ModelConfig(embed_dim=768, heads=12, depth=12, mlp_dim=3072),
    "beit-base": ModelConfig(embed_dim=768, heads=12, depth=12, mlp_dim=3072, variant="beit"),
}


def preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


def parameter_shapes(cfg):
    """Ordered ``name -> shape``; this order is the checkpoint order."""
    d, n = cfg.embed_dim, cfg.seq_len
    shapes = {
        "patch_proj.weight": (cfg.patch_dim, d),
        "patch_proj.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (n, d),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "attn.qkv"] = (d, 3 * cfg.heads * cfg.head_dim)
        shapes[p + "attn.proj.weight"] = (cfg.heads * cfg.head_dim, d)
        shapes[p + "attn.proj.bias"] = (d,)
        if cfg.variant == "beit":
            shapes[p + "attn.rel_bias"] = (relative_table_size(cfg.grid), cfg.heads)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, cfg.mlp_dim)
        shapes[p + "mlp.fc1.bias"] = (cfg.mlp_dim,)
        shapes[p + "mlp.fc2.weight"] = (cfg.mlp_dim, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["norm.gain"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.n_classes)
    shapes["head.bias"] = (cfg.n_classes,)
    return shapes


def relative_table_size(grid):
    return (2 * grid - 1) ** 2 + 3


def relative_position_index(grid):
    """``[T, T]`` indices into the relative-bias table, CLS included.

    Patch pairs index by their (row, col) offset; the last three slots hold
    CLS->patch, patch->CLS and CLS->CLS.
    """
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    dr = rows[:, None] - rows[None, :] + grid - 1
    dc = cols[:, None] - cols[None, :] + grid - 1
    n_rel = (2 * grid - 1) ** 2
    t = grid * grid + 1
    idx = np.empty((t, t), dtype=np.intp)
    idx[1:, 1:] = dr * (2 * grid - 1) + dc
    idx[0, 1:] = n_rel
    idx[1:, 0] = n_rel + 1
    idx[0, 0] = n_rel + 2
    return idx


def _trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg, rng, dtype=np.float32):
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            arr = np.ones(shape)
        elif leaf in ("bias", "cls_token", "rel_bias"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def patchify(images, patch_size):
    """``[B, H, W, C]`` -> ``[B, N, P*P*C]``; patches row-major, each flattened (row, col, channel)."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeMismatch(f"image {h}x{w} not divisible into {p}x{p} patches")
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def _linear(x, weight, bias=None):
    y = ops.matmul(x, weight)
    return y if bias is None else ops.add(y, bias)


def patchify_and_embed(images, params, cfg):
    """Token sequence ``[B, N+1, D]``: CLS row first, position embeddings added."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if images.shape[1:] != expected:
        raise ShapeMismatch(f"image shape {images.shape[1:]} does not match config {expected}")
    dtype = params["patch_proj.weight"].dtype
    patches = Tensor(patchify(images, cfg.patch_size).astype(dtype, copy=False))
    x = _linear(patches, params["patch_proj.weight"], params["patch_proj.bias"])
    b = images.shape[0]
    cls = ops.reshape(params["cls_token"], (1, 1, cfg.embed_dim))
    cls = ops.add(Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=dtype)), cls)
    z = ops.concat([cls, x], axis=1)
    return ops.add(z, params["pos_embed"])


def attention_weights(q, k, bias=None):
    """``softmax(q k^T / sqrt(D_h) + bias)`` over the key axis."""
    d_h = q.shape[-1]
    # scaling q rather than the scores touches T*D_h values instead of T*T
    scores = ops.matmul(ops.scale(q, 1.0 / math.sqrt(d_h)), ops.transpose(k, _swap_last(k.ndim)))
    if bias is not None:
        scores = ops.add(scores, bias)
    return ops.softmax(scores)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def self_attention(z_norm, u_qkv, bias=None, return_weights=False):
    """Single-head attention with ``[q, k, v] = z_norm @ u_qkv``.

    ``u_qkv`` is ``[D, 3*D_h]`` with q, k, v column blocks in that order.
    """
    if u_qkv.shape[0] != z_norm.shape[-1] or u_qkv.shape[1] % 3:
        raise ShapeMismatch(f"U_qkv {u_qkv.shape} incompatible with input {z_norm.shape}")
    d_h = u_qkv.shape[1] // 3
    qkv = ops.matmul(z_norm, u_qkv)
    q = ops.getitem(qkv, (Ellipsis, slice(0, d_h)))
    k = ops.getitem(qkv, (Ellipsis, slice(d_h, 2 * d_h)))
    v = ops.getitem(qkv, (Ellipsis, slice(2 * d_h, 3 * d_h)))
    w = attention_weights(q, k, bias)
    out = ops.matmul(w, v)
    return (out, w) if return_weights else out


def head_qkv_slice(u_qkv, head, heads):
    """Columns of the fused ``[D, 3*k*D_h]`` matrix belonging to one head, as ``[D, 3*D_h]``."""
    d_h = u_qkv.shape[1] // (3 * heads)
    cols = np.concatenate([np.arange(j * heads * d_h + head * d_h, j * heads * d_h + (head + 1) * d_h)
                           for j in range(3)])
    return u_qkv[:, cols]


def multi_head_attention(z_norm, u_qkv, u_msa, msa_bias, heads, rel_bias=None, return_weights=False):
    """All heads in parallel, concatenated and projected by ``u_msa``.

    ``u_qkv`` columns are laid out ``[q heads | k heads | v heads]``, each
    block holding ``heads`` slices of width ``D_h``.
    """
    *lead, t, d = z_norm.shape
    if u_qkv.shape != (d, u_qkv.shape[1]) or u_qkv.shape[1] % (3 * heads):
        raise ShapeMismatch(f"U_qkv {u_qkv.shape} incompatible with D={d}, {heads} heads")
    d_h = u_qkv.shape[1] // (3 * heads)
    if u_msa.shape != (heads * d_h, u_msa.shape[1]):
        raise ShapeMismatch(f"U_msa {u_msa.shape} expected first dim {heads * d_h}")
    if len(lead) != 1:
        raise ShapeMismatch("multi_head_attention expects a [B, T, D] batch")
    b = lead[0]
    if not return_weights:
        merged = ops.fused_attention(ops.matmul(z_norm, u_qkv), heads, rel_bias)
        return _linear(merged, u_msa, msa_bias)
    qkv = ops.reshape(ops.matmul(z_norm, u_qkv), (b, t, 3, heads, d_h))
    qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, k, T, D_h]
    q, k, v = (ops.getitem(qkv, i) for i in range(3))
    w = attention_weights(q, k, rel_bias)
    heads_out = ops.matmul(w, v)  # [B, k, T, D_h]
    merged = ops.reshape(ops.transpose(heads_out, (0, 2, 1, 3)), (b, t, heads * d_h))
    out = _linear(merged, u_msa, msa_bias)
    return (out, w) if return_weights else out


def relative_bias(table, index, heads):
    """Gather the ``[heads, T, T]`` bias from a ``[(2G-1)^2+3, heads]`` table."""
    t = index.shape[0]
    g = ops.take(table, index.reshape(-1))
    return ops.transpose(ops.reshape(g, (t, t, heads)), (2, 0, 1))


def encoder_block(z, params, prefix, cfg, rel_index=None):
    """``y = (MSA(LN(z)) + z) + MLP(LN(MSA(LN(z)) + z))``."""
    if z.shape[-1] != cfg.embed_dim:
        raise ShapeMismatch(f"block input width {z.shape[-1]} != embed_dim {cfg.embed_dim}")
    p = lambda name: params[prefix + name]  # noqa: E731
    rel = None
    if cfg.variant == "beit":
        if rel_index is None:
            rel_index = relative_position_index(cfg.grid)
        rel = relative_bias(p("attn.rel_bias"), rel_index, cfg.heads)
    z_norm = ops.layer_norm(z, p("ln1.gain"), p("ln1.bias"))
    attn = multi_head_attention(z_norm, p("attn.qkv"), p("attn.proj.weight"), p("attn.proj.bias"),
                                cfg.heads, rel)
    r = ops.add(attn, z)
    h = ops.gelu(_linear(ops.layer_norm(r, p("ln2.gain"), p("ln2.bias")),
                         p("mlp.fc1.weight"), p("mlp.fc1.bias")))
    return ops.add(r, _linear(h, p("mlp.fc2.weight"), p("mlp.fc2.bias")))


def encode(images, params, cfg):
    """Final-normed CLS representation, ``[B, D]``."""
    z = patchify_and_embed(images, params, cfg)
    rel_index = relative_position_index(cfg.grid) if cfg.variant == "beit" else None
    for i in range(cfg.depth):
        z = encoder_block(z, params, f"blocks.{i}.", cfg, rel_index)
    z = ops.layer_norm(z, params["norm.gain"], params["norm.bias"])
    return ops.getitem(z, (slice(None), 0))


def forward_classify(images, params, cfg):
    """Logits ``[B, 4]`` for a batch of ``[B, H, W, C]`` images."""
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteValue(f"parameter {name} is not finite")
    cls = encode(images, params, cfg)
    return _linear(cls, params["head.weight"], params["head.bias"])


class VisionTransformer:
    """Config plus parameter set; call it on a batch of images for logits."""

    def __init__(self, config, params=None, seed=0, dtype=np.float32):
        self.config = config
        if params is None:
            params = init_params(config, np.random.default_rng(seed), dtype)
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ShapeMismatch("parameter names do not match the config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeMismatch(f"{name}: shape {params[name].shape} != {shape}")
        self.params = params

    def __call__(self, images):
        return forward_classify(images, self.params, self.config)

    @property
    def dtype(self):
        return self.params["patch_proj.weight"].dtype

    def logits(self, images, batch_size=32):
        """Inference-only logits as a numpy array."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = []
        with no_grad():
            for s in range(0, images.shape[0], batch_size):
                out.append(self(images[s:s + batch_size]).data)
        return np.concatenate(out, axis=0)

    def predict(self, images):
        return np.argmax(self.logits(images), axis=1)

    def cls_embeddings(self, images):
        with no_grad():
            return encode(images, self.params, self.config).data

    def astype(self, dtype):
        return VisionTransformer(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True)
                                               for k, v in self.params.items()})

    def copy(self):
        return self.astype(self.dtype)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state(self):
        return {k: v.data for k, v in self.params.items()}

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def flops(self, mode="parametric_mac"):
        return count_flops(self.config, mode)


FLOP_MODES = ("parametric_mac", "total_mac")


def count_macs(cfg, mode="parametric_mac"):
    """Multiply-accumulates for one forward pass of one image.

    ``parametric_mac`` counts every learned linear map (patch projection,
    qkv, attention output, both MLP layers, head). ``total_mac`` also counts
    the two activation-activation products ``q k^T`` and ``weights @ v``.
    """
    if mode not in FLOP_MODES:
        raise ValueError(f"mode must be one of {FLOP_MODES}")
    n, t, d = cfg.n_patches, cfg.seq_len, cfg.embed_dim
    inner = cfg.heads * cfg.head_dim
    per_block = t * d * 3 * inner + t * inner * d + 2 * t * d * cfg.mlp_dim
    if mode == "total_mac":
        per_block += 2 * t * t * inner
    return n * cfg.patch_dim * d + cfg.depth * per_block + d * cfg.n_classes


def count_flops(cfg, mode="parametric_mac"):
    """Forward cost in GMac (``count_macs / 1e9``)."""
    return count_macs(cfg, mode) / 1e9


def with_variant(cfg, variant):
    return replace(cfg, variant=variant)
