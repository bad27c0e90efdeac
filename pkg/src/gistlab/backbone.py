"""Micro vision transformer: patch embed, class token, positional embedding,
pre-norm encoder layers, linear head, per-parameter freeze control, and a
binary checkpoint format.

The residual order inside a layer is fixed: attention and FFN each read a
LayerNorm of the running stream and add their output back onto it. PEFT
attachments hang off the model as per-layer adapter branches, per-point
scale-shift modulations, and an optional prompt block; the encoder applies
them at those points and nowhere else.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import FormatError, LayoutError, ShapeError

CLS = "CLS"
PATCH = "PATCH"
PROMPT = "PROMPT"
GIST = "GIST"

CHECKPOINT_MAGIC = b"GSTCKPT1"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.float64}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

# scale-shift insertion points inside one encoder layer
SSF_LAYER_POINTS = ("ln1", "attn.q", "attn.k", "attn.v", "attn.o", "ln2", "fc1", "fc2")


@dataclass(frozen=True)
class BackboneConfig:
    image_side: int
    patch_side: int
    channels: int
    embed_dim: int
    num_layers: int
    num_heads: int
    ffn_hidden: int
    num_classes: int

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ShapeError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ShapeError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def num_patches(self):
        return (self.image_side // self.patch_side) ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_side * self.patch_side

    def to_dict(self):
        return {
            "image_side": self.image_side,
            "patch_side": self.patch_side,
            "channels": self.channels,
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_hidden": self.ffn_hidden,
            "num_classes": self.num_classes,
        }


@dataclass
class SequenceState:
    """Token stream plus the role of each position."""

    tokens: T.Tensor                 # (B, S, D)
    layout: tuple                    # role per position

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.layout) != self.tokens.shape[1]:
            raise LayoutError(
                f"layout length {len(self.layout)} != sequence length {self.tokens.shape[1]}"
            )
        if self.layout.count(CLS) != 1:
            raise LayoutError(f"expected exactly one {CLS} position, got {self.layout.count(CLS)}")
        n_gist = self.layout.count(GIST)
        if n_gist and any(r != GIST for r in self.layout[-n_gist:]):
            raise LayoutError("GIST positions must be the trailing block")

    def positions(self, role):
        return [i for i, r in enumerate(self.layout) if r == role]


class ModelGraph:
    """Named parameter store with freeze flags and PEFT attachment slots."""

    def __init__(self, config, params, gelu_variant=T.GELU_VARIANT, pretrain_seed=None):
        self.config = config
        self.params = params                      # name -> Tensor, insertion-ordered
        self.freeze_map = {name: not p.requires_grad for name, p in params.items()}
        self.gelu_variant = gelu_variant
        self.pretrain_seed = pretrain_seed
        self.attached = []                        # PeftParams, in attachment order
        self.adapter_branches = {i: [] for i in range(config.num_layers)}
        self.ssf_points = {}                      # (layer, point) -> [(gamma, beta), ...]
        self.head_modulations = []                # [(gamma, beta), ...] applied before head
        self.prompt_tokens = None                 # Tensor (prompt_len, D) or None

    def param(self, name):
        return self.params[name]

    def set_frozen(self, name, frozen):
        self.freeze_map[name] = frozen
        self.params[name].requires_grad = not frozen

    def named_trainable(self):
        for name, p in self.params.items():
            if p.requires_grad:
                yield name, p


def init_model(config, seed, dtype=np.float32):
    """Fresh trainable model; weights truncated-normal(0.02), biases zero."""
    rng = np.random.default_rng(seed)
    d, h = config.embed_dim, config.ffn_hidden
    params = {}

    def weight(name, shape):
        params[name] = T.Tensor(T.trunc_normal(rng, shape, 0.02, dtype), requires_grad=True)

    def zeros(name, shape):
        params[name] = T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(name, shape):
        params[name] = T.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    weight("patch_proj.weight", (config.patch_dim, d))
    zeros("patch_proj.bias", (d,))
    weight("cls_token", (1, d))
    weight("pos_embed", (config.num_patches + 1, d))
    for i in range(config.num_layers):
        ones(f"layers.{i}.ln1.gamma", (d,))
        zeros(f"layers.{i}.ln1.beta", (d,))
        # no bias on the key projection: a shared shift of every key adds a
        # row-constant to the attention scores, which softmax cancels exactly
        for proj in ("q", "k", "v", "o"):
            weight(f"layers.{i}.attn.{proj}.weight", (d, d))
            if proj != "k":
                zeros(f"layers.{i}.attn.{proj}.bias", (d,))
        ones(f"layers.{i}.ln2.gamma", (d,))
        zeros(f"layers.{i}.ln2.beta", (d,))
        weight(f"layers.{i}.ffn.fc1.weight", (d, h))
        zeros(f"layers.{i}.ffn.fc1.bias", (h,))
        weight(f"layers.{i}.ffn.fc2.weight", (h, d))
        zeros(f"layers.{i}.ffn.fc2.bias", (d,))
    weight("head.weight", (d, config.num_classes))
    zeros("head.bias", (config.num_classes,))
    return ModelGraph(config, params)


def reinit_head(model, seed, num_classes=None, dtype=None):
    """Per-task head reset: truncated normal 0.02 weights, zero bias.

    ``seed`` may be an int or a list of ints (entropy sequence). Passing
    ``num_classes`` re-shapes the head for a downstream task with a
    different label set."""
    entropy = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    rng = np.random.default_rng(entropy + [104])
    w = model.params["head.weight"]
    b = model.params["head.bias"]
    dtype = dtype or w.data.dtype
    k = num_classes or model.config.num_classes
    if k != model.config.num_classes:
        from dataclasses import replace
        model.config = replace(model.config, num_classes=k)
    w.data = T.trunc_normal(rng, (model.config.embed_dim, k), 0.02, dtype)
    b.data = np.zeros(k, dtype=dtype)
    T.zero_grad([w, b])


def patchify(images, patch_side):
    """(B, C, H, W) -> (B, L, C*patch*patch), row-major patch order."""
    b, c, hh, ww = images.shape
    g = hh // patch_side
    x = images.reshape(b, c, g, patch_side, g, patch_side)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * patch_side * patch_side)


def build_input(images, model):
    """Patch-embed, prepend the class token, add positional embeddings."""
    cfg = model.config
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != cfg.channels or images.shape[2] != cfg.image_side \
            or images.shape[3] != cfg.image_side:
        raise ShapeError(
            f"expected images (B, {cfg.channels}, {cfg.image_side}, {cfg.image_side}), "
            f"got {images.shape}"
        )
    dtype = model.params["patch_proj.weight"].data.dtype
    patches = T.Tensor(patchify(images.astype(dtype), cfg.patch_side))
    b = images.shape[0]

    embedded = T.add(T.matmul(patches, model.param("patch_proj.weight")),
                     model.param("patch_proj.bias"))
    cls = T.broadcast_to(T.reshape(model.param("cls_token"), (1, 1, cfg.embed_dim)),
                         (b, 1, cfg.embed_dim))
    tokens = T.concat([cls, embedded], axis=1)
    tokens = T.add(tokens, model.param("pos_embed"))
    return SequenceState(tokens, (CLS,) + (PATCH,) * cfg.num_patches)


def insert_tokens(state, position, block, role):
    """Insert a (n, D) block for every batch element at a sequence position."""
    b = state.tokens.shape[0]
    n, d = block.shape
    tiled = T.broadcast_to(T.reshape(block, (1, n, d)), (b, n, d))
    pieces = []
    if position > 0:
        pieces.append(T.narrow(state.tokens, 1, 0, position))
    pieces.append(tiled)
    rest = state.tokens.shape[1] - position
    if rest > 0:
        pieces.append(T.narrow(state.tokens, 1, position, rest))
    layout = state.layout[:position] + (role,) * n + state.layout[position:]
    return SequenceState(T.concat(pieces, axis=1), layout)


def _modulate(x, pairs):
    for gamma, beta in pairs:
        x = T.add(T.mul(x, gamma), beta)
    return x


def _point(model, layer, point, x):
    pairs = model.ssf_points.get((layer, point))
    return _modulate(x, pairs) if pairs else x


def _linear(x, w, b):
    return T.add(T.matmul(x, w), b)


def encoder_layer(state, model, layer, attn_sink=None):
    """One pre-norm block: x' = x + MHSA(LN(x)); out = x' + FFN(LN(x'))."""
    cfg = model.config
    p = lambda suffix: model.param(f"layers.{layer}.{suffix}")
    x = state.tokens
    b, s, d = x.shape
    nh = cfg.num_heads
    dh = d // nh

    h = _point(model, layer, "ln1", T.layer_norm(x, p("ln1.gamma"), p("ln1.beta")))
    q = _point(model, layer, "attn.q", _linear(h, p("attn.q.weight"), p("attn.q.bias")))
    k = _point(model, layer, "attn.k", T.matmul(h, p("attn.k.weight")))
    v = _point(model, layer, "attn.v", _linear(h, p("attn.v.weight"), p("attn.v.bias")))

    def heads(t):  # (B,S,D) -> (B*nh, S, dh)
        t = T.reshape(t, (b, s, nh, dh))
        t = T.transpose(t, (0, 2, 1, 3))
        return T.reshape(t, (b * nh, s, dh))

    scores = T.scale(T.matmul(heads(q), T.transpose(heads(k), (0, 2, 1))), 1.0 / np.sqrt(dh))
    probs = T.softmax_t(scores, 1.0)
    if attn_sink is not None:
        attn_sink.append(probs.data.reshape(b, nh, s, s).copy())
    ctx = T.matmul(probs, heads(v))
    ctx = T.reshape(T.transpose(T.reshape(ctx, (b, nh, s, dh)), (0, 2, 1, 3)), (b, s, d))
    attn_out = _point(model, layer, "attn.o", _linear(ctx, p("attn.o.weight"), p("attn.o.bias")))

    x1 = T.add(x, attn_out)

    h2 = _point(model, layer, "ln2", T.layer_norm(x1, p("ln2.gamma"), p("ln2.beta")))
    f1 = _point(model, layer, "fc1", _linear(h2, p("ffn.fc1.weight"), p("ffn.fc1.bias")))
    f2 = _point(model, layer, "fc2", _linear(T.gelu(f1), p("ffn.fc2.weight"), p("ffn.fc2.bias")))

    out = T.add(x1, f2)
    for down_w, down_b, up_w, up_b, s_factor in model.adapter_branches[layer]:
        branch = _linear(T.gelu(_linear(h2, down_w, down_b)), up_w, up_b)
        out = T.add(out, T.scale(branch, s_factor))
    return SequenceState(out, state.layout)


def run_encoder(state, model, attn_sink=None):
    for i in range(model.config.num_layers):
        state = encoder_layer(state, model, i, attn_sink=attn_sink)
    return state


def classify(state, model, role=CLS):
    """Apply the shared linear head to one role's token (pooled by mean when
    the role spans several positions, e.g. prompts or a long gist block)."""
    idx = state.positions(role)
    if not idx:
        raise LayoutError(f"role {role} absent from layout")
    lo, n = idx[0], len(idx)
    if idx != list(range(lo, lo + n)):
        raise LayoutError(f"role {role} positions are not contiguous")
    block = T.narrow(state.tokens, 1, lo, n)
    d = state.tokens.shape[2]
    pooled = T.reshape(block, (-1, d)) if n == 1 else T.mean(block, axis=1)
    pooled = _modulate(pooled, model.head_modulations)
    return _linear(pooled, model.param("head.weight"), model.param("head.bias"))


def set_finetune_freeze(model):
    """Backbone frozen (class token included), head trainable. PEFT and gist
    parameters are created trainable and are unaffected. Idempotent."""
    for name in model.params:
        model.set_frozen(name, not name.startswith("head."))


def set_all_trainable(model):
    for name in model.params:
        model.set_frozen(name, False)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(model, extra_params=None, metadata=None):
    """Serialize parameters + freeze flags; round trips are bit-exact."""
    meta = {
        "config": model.config.to_dict(),
        "gelu": model.gelu_variant,
        "pretrain_seed": model.pretrain_seed,
    }
    if metadata:
        meta.update(metadata)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    records = list(model.params.items())
    for name, p in (extra_params or {}).items():
        records.append((name, p))

    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", len(records))
    for name, p in records:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<BB", _CODE_FOR_DTYPE[p.data.dtype], p.data.ndim)
        for dim in p.data.shape:
            out += struct.pack("<Q", dim)
        arr = p.data.astype(p.data.dtype.newbyteorder("<"), copy=False)
        out += arr.tobytes()
        out += struct.pack("<B", 0 if p.requires_grad else 1)
    return bytes(out)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated reading {what} at offset {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]


def read_checkpoint_raw(blob):
    """Parse a checkpoint into (metadata dict, {name: (array, frozen)})."""
    r = _Reader(blob)
    magic = r.take(8, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 8")
    meta_len = r.u32("metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    count = r.u32("parameter count")
    entries = {}
    for _ in range(count):
        name = r.take(r.u16("name length"), "name").decode("utf-8")
        code = r.u8("dtype code")
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} at offset {r.pos - 1}")
        dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
        rank = r.u8("rank")
        dims = tuple(r.u64("dim") for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        raw = r.take(n * dtype.itemsize, f"parameter {name}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(_DTYPE_CODES[code])
        frozen = r.u8("frozen flag") != 0
        entries[name] = (arr, frozen)
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes at offset {r.pos}")
    return meta, entries


def load_checkpoint(blob):
    """Rebuild (model, extras) from bytes; extras keep their frozen flags."""
    meta, entries = read_checkpoint_raw(blob)
    config = BackboneConfig(**meta["config"])
    model = init_model(config, seed=0)
    model.gelu_variant = meta["gelu"]
    model.pretrain_seed = meta.get("pretrain_seed")
    extras = {}
    for name, (arr, frozen) in entries.items():
        if name in model.params:
            p = model.params[name]
            if p.data.shape != arr.shape:
                raise FormatError(f"parameter {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.copy()
            model.set_frozen(name, frozen)
        else:
            extras[name] = T.Tensor(arr.copy(), requires_grad=not frozen)
    missing = set(model.params) - set(entries)
    if missing:
        raise FormatError(f"checkpoint is missing parameters: {sorted(missing)[:3]}...")
    return model, extras, meta
