"""Gist-token injection, per-token cross-entropy terms, the bidirectional
temperature-softened KL interaction loss, its MSE/cosine substitutes, the
auxiliary prompt-logits loss, and the overall training objective.

The gist token is appended after the positional embedding has been added,
so it never receives one. Neither interaction branch detaches: both the
class-token logits and gist-token logits receive gradients, and no
temperature-squared compensation factor is applied. At inference only the
class-token logits are consulted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import tensor as T
from .errors import ConfigError, LayoutError

BKLD = "bkld"
MSE = "mse"
COSINE = "cosine"
NONE = "none"
INTERACTIONS = (BKLD, MSE, COSINE, NONE)


@dataclass(frozen=True)
class GistLossConfig:
    """Knobs of the gist objective; defaults follow the reference regime
    (temperature 3, mu 0.5, lambda searched over {0.25, 0.5, 0.75})."""

    enabled: bool = True
    gist_len: int = 1
    temperature: float = 3.0
    mu: float = 0.5
    lam: float = 0.75
    interaction: str = BKLD
    aux_vpt_loss: bool = False

    def __post_init__(self):
        if self.interaction not in INTERACTIONS:
            raise ConfigError(f"unknown interaction {self.interaction!r}")
        if self.enabled:
            if self.gist_len < 1:
                raise ConfigError(f"gist_len must be >= 1, got {self.gist_len}")
            if self.temperature <= 0:
                raise ConfigError(f"temperature must be positive, got {self.temperature}")
            if self.interaction == NONE and self.lam != 0.0:
                raise ConfigError("interaction 'none' requires lam == 0")

    def to_dict(self):
        return {
            "enabled": self.enabled,
            "gist_len": self.gist_len,
            "temperature": self.temperature,
            "mu": self.mu,
            "lam": self.lam,
            "interaction": self.interaction,
            "aux_vpt_loss": self.aux_vpt_loss,
        }


def new_gist_token(gist_len, embed_dim, seed, dtype=np.float32):
    """Trainable (gist_len, D) token block, truncated-normal(0.02) init."""
    rng = np.random.default_rng([seed, 303])
    return T.Tensor(T.trunc_normal(rng, (gist_len, embed_dim), 0.02, dtype), requires_grad=True)


def inject_gist(state, token):
    """Append the gist block after the positionally-embedded sequence."""
    if bb.GIST in state.layout:
        raise LayoutError("gist block already present in layout")
    if token.data.ndim != 2 or token.data.shape[1] != state.tokens.shape[2]:
        raise LayoutError(
            f"gist token shape {token.data.shape} incompatible with width {state.tokens.shape[2]}"
        )
    return bb.insert_tokens(state, len(state.layout), token, bb.GIST)


def token_losses(s_cls, s_gist, labels):
    return T.cross_entropy(s_cls, labels), T.cross_entropy(s_gist, labels)


def bkld(s_cls, s_gist, temperature):
    """Forward KL (class as reference), reverse KL, and their sum."""
    l_fkl = T.kl_divergence(s_cls, s_gist, temperature)
    l_rkl = T.kl_divergence(s_gist, s_cls, temperature)
    return l_fkl, l_rkl, T.add(l_fkl, l_rkl)


def interaction_substitute(s_cls, s_gist, kind):
    """MSE over all logit entries, or 1 - mean per-sample cosine similarity
    (all-zero rows count as similarity 0)."""
    if kind == MSE:
        diff = T.sub(s_cls, s_gist)
        return T.mean(T.mul(diff, diff))
    if kind == COSINE:
        one = T.Tensor(np.asarray(1.0, dtype=s_cls.data.dtype))
        return T.sub(one, T.mean(T.cosine_rows(s_cls, s_gist)))
    raise ConfigError(f"no interaction substitute named {kind!r}")


@dataclass
class LossBreakdown:
    """Scalar loss terms of one step; tensors while a tape is alive."""

    l_cls: T.Tensor
    l_gist: T.Tensor | None = None
    l_fkl: T.Tensor | None = None
    l_rkl: T.Tensor | None = None
    l_bkl: T.Tensor | None = None
    l_interaction: T.Tensor | None = None
    l_aux_vpt: T.Tensor | None = None
    l_all: T.Tensor | None = None

    def to_floats(self):
        def val(t):
            return float(t.data) if t is not None else 0.0

        return {
            "l_cls": val(self.l_cls),
            "l_gist": val(self.l_gist),
            "l_fkl": val(self.l_fkl),
            "l_rkl": val(self.l_rkl),
            "l_bkl": val(self.l_bkl),
            "l_interaction": val(self.l_interaction),
            "l_aux_vpt": val(self.l_aux_vpt),
            "l_all": val(self.l_all),
        }


def overall_loss(s_cls, labels, cfg, s_gist=None, s_vpt=None):
    """Assemble l_all = l_cls + mu*l_gist + lambda*l_interaction (+ aux).

    With the gist machinery disabled this reduces to the plain class-token
    cross entropy and touches nothing else, which is what the baseline
    equivalence contract relies on.
    """
    l_cls = T.cross_entropy(s_cls, labels)
    out = LossBreakdown(l_cls=l_cls)
    l_all = l_cls

    if cfg.enabled:
        if s_gist is None:
            raise ConfigError("gist loss enabled but no gist logits supplied")
        out.l_gist = T.cross_entropy(s_gist, labels)
        if cfg.mu != 0.0:
            l_all = T.add(l_all, T.scale(out.l_gist, cfg.mu))
        if cfg.interaction == BKLD:
            out.l_fkl, out.l_rkl, out.l_bkl = bkld(s_cls, s_gist, cfg.temperature)
            out.l_interaction = out.l_bkl
        elif cfg.interaction in (MSE, COSINE):
            out.l_interaction = interaction_substitute(s_cls, s_gist, cfg.interaction)
        if cfg.lam != 0.0:
            if out.l_interaction is None:
                raise ConfigError("lam != 0 with interaction 'none'")
            l_all = T.add(l_all, T.scale(out.l_interaction, cfg.lam))

    if cfg.aux_vpt_loss:
        if s_vpt is None:
            raise ConfigError("aux_vpt_loss enabled but no prompt logits supplied")
        out.l_aux_vpt = T.cross_entropy(s_vpt, labels)
        l_all = T.add(l_all, out.l_aux_vpt)

    out.l_all = l_all
    return out


def predict(state, model):
    """Argmax over the class-token logits; gist logits are never consulted.
    Ties break toward the lowest class index."""
    logits = bb.classify(state, model, bb.CLS)
    return np.argmax(logits.data, axis=1)
