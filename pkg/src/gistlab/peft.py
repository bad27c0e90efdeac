"""Pluggable parameter-efficient fine-tuning methods.

Three kinds: a bottleneck adapter running in parallel with each FFN
sub-block (sharing its LayerNorm input, output scaled then added onto the
residual sum), shallow prompt tokens inserted after the class token at the
first layer only, and per-feature scale-shift modulation after every
linear projection and LayerNorm inside each layer plus the head input.

Attachment mutates the model graph and must happen before training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import tensor as T
from .errors import ConfigError

ADAPTER = "adapter"
PROMPT = "prompt"
SCALE_SHIFT = "scale_shift"
KINDS = (ADAPTER, PROMPT, SCALE_SHIFT)


@dataclass(frozen=True)
class PeftSpec:
    kind: str
    adapter_hidden: int = 4
    adapter_scale: float = 0.1
    prompt_len: int = 20

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown peft kind {self.kind!r}, expected one of {KINDS}")
        if self.kind == ADAPTER and self.adapter_hidden < 1:
            raise ConfigError(f"adapter_hidden must be >= 1, got {self.adapter_hidden}")
        if self.kind == PROMPT and self.prompt_len < 1:
            raise ConfigError(f"prompt_len must be >= 1, got {self.prompt_len}")

    @property
    def attach(self):
        return "first-layer-only" if self.kind == PROMPT else "per-layer"

    def to_dict(self):
        return {
            "kind": self.kind,
            "adapter_hidden": self.adapter_hidden,
            "adapter_scale": self.adapter_scale,
            "prompt_len": self.prompt_len,
        }


@dataclass
class PeftParams:
    """Named trainable tensors created by one attachment."""

    kind: str
    spec: PeftSpec
    tensors: dict = field(default_factory=dict)

    def count(self):
        return sum(p.data.size for p in self.tensors.values())


def _model_dtype(model):
    return model.params["head.weight"].data.dtype


def attach_adapter(model, spec, seed=0):
    """Per layer: down(D->d) -> GELU -> up(d->D), in parallel with the FFN.

    Down projection is truncated-normal(0.02); up projection starts at zero
    so the attached model's forward equals the baseline at step 0.
    """
    if spec.kind != ADAPTER:
        raise ConfigError(f"attach_adapter got kind {spec.kind!r}")
    rng = np.random.default_rng([seed, 201])
    dtype = _model_dtype(model)
    d = model.config.embed_dim
    hidden = spec.adapter_hidden
    params = PeftParams(ADAPTER, spec)
    for i in range(model.config.num_layers):
        down_w = T.Tensor(T.trunc_normal(rng, (d, hidden), 0.02, dtype), requires_grad=True)
        down_b = T.Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        up_w = T.Tensor(np.zeros((hidden, d), dtype=dtype), requires_grad=True)
        up_b = T.Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        params.tensors[f"adapter.layers.{i}.down.weight"] = down_w
        params.tensors[f"adapter.layers.{i}.down.bias"] = down_b
        params.tensors[f"adapter.layers.{i}.up.weight"] = up_w
        params.tensors[f"adapter.layers.{i}.up.bias"] = up_b
        model.adapter_branches[i].append((down_w, down_b, up_w, up_b, spec.adapter_scale))
    model.attached.append(params)
    return params


def attach_prompt(model, spec, seed=0):
    """Shallow prompts: trainable tokens after CLS at the first layer's input
    only; they never receive positional embeddings."""
    if spec.kind != PROMPT:
        raise ConfigError(f"attach_prompt got kind {spec.kind!r}")
    if model.prompt_tokens is not None:
        raise ConfigError("prompt tokens already attached")
    rng = np.random.default_rng([seed, 202])
    dtype = _model_dtype(model)
    tok = T.Tensor(
        T.trunc_normal(rng, (spec.prompt_len, model.config.embed_dim), 0.02, dtype),
        requires_grad=True,
    )
    params = PeftParams(PROMPT, spec, {"prompt.tokens": tok})
    model.prompt_tokens = tok
    model.attached.append(params)
    return params


def attach_scale_shift(model, spec):
    """Identity-initialized gamma/beta after each linear projection and
    LayerNorm in every layer, plus the head input."""
    if spec.kind != SCALE_SHIFT:
        raise ConfigError(f"attach_scale_shift got kind {spec.kind!r}")
    dtype = _model_dtype(model)
    d = model.config.embed_dim
    params = PeftParams(SCALE_SHIFT, spec)

    def pair(name, dim):
        gamma = T.Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        beta = T.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        params.tensors[f"ssf.{name}.gamma"] = gamma
        params.tensors[f"ssf.{name}.beta"] = beta
        return gamma, beta

    for i in range(model.config.num_layers):
        for point in bb.SSF_LAYER_POINTS:
            dim = model.config.ffn_hidden if point == "fc1" else d
            model.ssf_points.setdefault((i, point), []).append(
                pair(f"layers.{i}.{point}", dim)
            )
    model.head_modulations.append(pair("head_in", d))
    model.attached.append(params)
    return params


_ATTACHERS = {ADAPTER: attach_adapter, PROMPT: attach_prompt, SCALE_SHIFT: attach_scale_shift}


def attach(model, spec, seed=0):
    if spec.kind == SCALE_SHIFT:
        return attach_scale_shift(model, spec)
    return _ATTACHERS[spec.kind](model, spec, seed)


@dataclass(frozen=True)
class TrainableCount:
    with_head: int
    without_head: int
    by_group: dict


def trainable_parameter_count(model, gist_token=None):
    """Exact count of requires_grad scalars, with and without the head."""
    groups = {"backbone": 0, "head": 0, "peft": 0, "gist": 0}
    for name, p in model.params.items():
        if not p.requires_grad:
            continue
        groups["head" if name.startswith("head.") else "backbone"] += p.data.size
    for att in model.attached:
        for p in att.tensors.values():
            if p.requires_grad:
                groups["peft"] += p.data.size
    if gist_token is not None and gist_token.requires_grad:
        groups["gist"] += gist_token.data.size
    total = sum(groups.values())
    return TrainableCount(total, total - groups["head"], groups)
