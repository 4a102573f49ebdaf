"""Vision transformer: patch embedding, class token, pre-norm encoder, MLP head.

The same code path serves the DeiT variant: with
``use_distillation_token`` the sequence gets a second learned token (index 1)
whose final state feeds its own head.
"""

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class TransformerConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    num_heads: int = 2
    num_blocks: int = 2
    mlp_hidden_dim: int = 64
    num_classes: int = 8
    use_distillation_token: bool = False
    head_layers: int = 2
    head_hidden_dim: int = 0  # 0 means embed_dim
    gelu_approximate: bool = False

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim", "num_heads",
                     "num_blocks", "mlp_hidden_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.head_layers not in (1, 2):
            raise ConfigError("head_layers must be 1 or 2")
        if self.head_hidden_dim < 0:
            raise ConfigError("head_hidden_dim must be >= 0")

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid_size**2

    @property
    def num_prefix_tokens(self):
        return 2 if self.use_distillation_token else 1

    @property
    def num_tokens(self):
        return self.num_patches + self.num_prefix_tokens

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_width(self):
        return self.head_hidden_dim or self.embed_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        """Build from a mapping of strings or native values; unknown keys are rejected."""
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = _coerce(key, value, bool if known[key] in (bool, "bool") else int)
        return cls(**kwargs)

    def param_shapes(self):
        """Ordered mapping of parameter name to shape; a pure function of the config."""
        d, m = self.embed_dim, self.mlp_hidden_dim
        shapes = OrderedDict()
        shapes["patch.w"] = (self.patch_dim, d)
        shapes["patch.b"] = (d,)
        shapes["cls_token"] = (d,)
        if self.use_distillation_token:
            shapes["dist_token"] = (d,)
        # the distillation token sits at a fixed slot with its own learned
        # vector, so it gets no positional row
        shapes["pos_embed"] = (self.num_patches + 1, d)
        for i in range(self.num_blocks):
            p = f"blocks.{i}."
            shapes[p + "ln1.g"] = (d,)
            shapes[p + "ln1.b"] = (d,)
            for name in ("q", "k", "v", "o"):
                shapes[p + f"attn.w{name}"] = (d, d)
                shapes[p + f"attn.b{name}"] = (d,)
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)
            shapes[p + "ffn.w1"] = (d, m)
            shapes[p + "ffn.b1"] = (m,)
            shapes[p + "ffn.w2"] = (m, d)
            shapes[p + "ffn.b2"] = (d,)
        shapes["norm.g"] = (d,)
        shapes["norm.b"] = (d,)
        heads = ("head", "dist_head") if self.use_distillation_token else ("head",)
        for head in heads:
            shapes.update(self.head_shapes(head))
        return shapes

    def head_shapes(self, prefix="head"):
        d, c, h = self.embed_dim, self.num_classes, self.head_width
        if self.head_layers == 1:
            return OrderedDict([(f"{prefix}.w", (d, c)), (f"{prefix}.b", (c,))])
        return OrderedDict([
            (f"{prefix}.w1", (d, h)), (f"{prefix}.b1", (h,)),
            (f"{prefix}.w2", (h, c)), (f"{prefix}.b2", (c,)),
        ])

    def parameter_count(self):
        return sum(math.prod(s) for s in self.param_shapes().values())


def _coerce(key, value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def _is_gain(name):
    return name.endswith((".g",))


def _is_bias(name):
    return name.endswith((".b", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo"))


class ModelWeights:
    """Learned parameters of a transformer, keyed by name, shapes fixed by config."""

    def __init__(self, config, params):
        self.config = config
        self.params = OrderedDict(params)
        self.validate()

    def validate(self):
        expected = self.config.param_shapes()
        if list(self.params) != list(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ShapeError(f"weights do not match config (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, shape in expected.items():
            arr = self.params[name] = np.asarray(self.params[name], dtype=T.DTYPE)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def copy(self):
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def parameter_count(self):
        return sum(v.size for v in self.params.values())

    def equals(self, other):
        return (self.config == other.config
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


def truncated_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_weights(config, seed=0, std=0.02):
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in config.param_shapes().items():
        params[name] = _init_param(rng, name, shape, std)
    return ModelWeights(config, params)


def _init_param(rng, name, shape, std):
    if _is_gain(name):
        return np.ones(shape)
    if _is_bias(name):
        return np.zeros(shape)
    return truncated_normal(rng, shape, std)


def reinit_heads(weights, num_classes, seed=0, std=0.02):
    """Keep the backbone of ``weights``; fresh head(s) sized for ``num_classes``."""
    config = replace(weights.config, num_classes=num_classes)
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in config.param_shapes().items():
        if name.startswith(("head.", "dist_head.")):
            params[name] = _init_param(rng, name, shape, std)
        else:
            params[name] = weights.params[name].copy()
    return ModelWeights(config, params)


# -- forward pass -----------------------------------------------------------


@dataclass
class ForwardOutput:
    logits: T.Tensor
    dist_logits: object  # Tensor or None
    attention: list  # per block: array (batch, heads, tokens, tokens)


def _params(weights):
    src = weights.params if isinstance(weights, ModelWeights) else weights
    return {k: T.as_tensor(v) for k, v in src.items()}


def extract_patches(images, config):
    """(B, H, W, C) -> (B, num_patches, patch_dim), patches row-major, each flattened (row, col, channel)."""
    images = np.asarray(images, dtype=T.DTYPE)
    if images.ndim != 4:
        raise ShapeError(f"expected a batch of images (B, H, W, C), got shape {images.shape}")
    b, h, w, c = images.shape
    if h != config.image_size or w != config.image_size or c != config.channels:
        raise ConfigError(
            f"image shape {(h, w, c)} does not match config "
            f"({config.image_size}, {config.image_size}, {config.channels})")
    p, g = config.patch_size, config.grid_size
    x = images.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, p * p * c)


def patch_embed(image, config, weights):
    """Linear projection of every non-overlapping patch.

    Accepts one image (H, W, C) or a batch (B, H, W, C).
    """
    p = _params(weights)
    single = np.ndim(image) == 3
    patches = extract_patches(image[None] if single else image, config)
    out = T.matmul(T.Tensor(patches), p["patch.w"]) + p["patch.b"]
    return out[0] if single else out


def assemble_sequence(patches, config, weights):
    """Prepend class (and distillation) token(s) and add positional embeddings.

    Row 0 of the positional table belongs to the class token, rows 1.. to the
    patches.
    """
    p = _params(weights)
    patches = T.as_tensor(patches)
    single = patches.ndim == 2
    if single:
        patches = T.reshape(patches, (1,) + patches.shape)
    b, n, d = patches.shape
    if n != config.num_patches or d != config.embed_dim:
        raise ShapeError(f"patch embeddings {patches.shape[1:]} do not match config "
                         f"({config.num_patches}, {config.embed_dim})")
    pos = p["pos_embed"]
    cls = T.reshape(p["cls_token"] + pos[0], (1, 1, d))
    parts = [T.broadcast_to(cls, (b, 1, d))]
    if config.use_distillation_token:
        parts.append(T.broadcast_to(T.reshape(p["dist_token"], (1, 1, d)), (b, 1, d)))
    parts.append(patches + pos[1:])
    seq = T.concat(parts, axis=1)
    return seq[0] if single else seq


def encoder_block(x, block, config):
    """One pre-norm block: x + MSA(LN1(x)), then + FFN(LN2(x)).

    ``block`` maps the short names (``ln1.g``, ``attn.wq``, ...) to tensors.
    Returns the new sequence and the attention probabilities
    (batch, heads, tokens, tokens) as a plain array.
    """
    x = T.as_tensor(x)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    if d != config.embed_dim:
        raise ShapeError(f"sequence width {d} != embed_dim {config.embed_dim}")
    h, dh = config.num_heads, config.head_dim
    w = {k: T.as_tensor(v) for k, v in block.items()}

    y = T.layer_norm(x, w["ln1.g"], w["ln1.b"])

    def heads(name):
        proj = T.matmul(y, w[f"attn.w{name}"]) + w[f"attn.b{name}"]
        return T.transpose(T.reshape(proj, (b, t, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    x = x + (T.matmul(ctx, w["attn.wo"]) + w["attn.bo"])

    y = T.layer_norm(x, w["ln2.g"], w["ln2.b"])
    hidden = T.gelu(T.matmul(y, w["ffn.w1"]) + w["ffn.b1"], approximate=config.gelu_approximate)
    x = x + (T.matmul(hidden, w["ffn.w2"]) + w["ffn.b2"])
    attn_probs = attn.data
    if single:
        return x[0], attn_probs[0]
    return x, attn_probs


def block_params(params, index):
    prefix = f"blocks.{index}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _head(state, params, prefix, config):
    if config.head_layers == 1:
        return T.matmul(state, params[f"{prefix}.w"]) + params[f"{prefix}.b"]
    hidden = T.gelu(T.matmul(state, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"],
                    approximate=config.gelu_approximate)
    return T.matmul(hidden, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def forward(images, config, weights):
    """Run the model on one image (H, W, C) or a batch (B, H, W, C).

    ``weights`` is a :class:`ModelWeights` or a name -> Tensor mapping (the
    trainer passes requires_grad tensors). Pure: nothing is mutated.
    """
    params = _params(weights)
    single = np.ndim(images) == 3
    batch = np.asarray(images, dtype=T.DTYPE)
    if single:
        batch = batch[None]
    x = assemble_sequence(patch_embed(batch, config, params), config, params)
    attention = []
    for i in range(config.num_blocks):
        x, attn = encoder_block(x, block_params(params, i), config)
        attention.append(attn)
    x = T.layer_norm(x, params["norm.g"], params["norm.b"])
    logits = _head(x[:, 0, :], params, "head", config)
    dist_logits = None
    if config.use_distillation_token:
        dist_logits = _head(x[:, 1, :], params, "dist_head", config)
    if single:
        logits = logits[0]
        dist_logits = dist_logits[0] if dist_logits is not None else None
        attention = [a[0] for a in attention]
    return ForwardOutput(logits, dist_logits, attention)


def predict_proba(images, config, weights, batch_size=256):
    """Class probabilities without recording gradients.

    ViT: softmax of the class head. DeiT: mean of the two heads' softmaxes.
    """
    from .deit import deit_inference_probs

    images = np.asarray(images, dtype=T.DTYPE)
    single = images.ndim == 3
    if single:
        images = images[None]
    chunks = []
    for start in range(0, len(images), batch_size):
        out = forward(images[start:start + batch_size], config, weights)
        if out.dist_logits is None:
            chunks.append(T.softmax(out.logits.data, axis=-1).data)
        else:
            chunks.append(deit_inference_probs(out.logits.data, out.dist_logits.data))
    probs = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, config.num_classes))
    return probs[0] if single else probs
