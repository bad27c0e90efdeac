"""Deterministic fine-tuning engine: decoupled-weight-decay adaptive
optimizer, linear warmup into cosine annealing, an epoch loop that
enforces the freeze map bitwise, and per-step metric capture.

Epoch shuffles derive from ``default_rng([run_seed, epoch])`` so a run is
reproducible from its seed alone while staying well mixed. There is no
gradient clipping; a non-finite loss aborts the run naming the step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import losses
from . import tensor as T
from .errors import ConfigError, NumericError

DISABLED_GIST = losses.GistLossConfig(enabled=False)


@dataclass(frozen=True)
class OptimSpec:
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_epochs: int = 10
    warmup_lr: float = 1e-7
    total_epochs: int = 100
    batch_size: int = 32

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} exceeds total_epochs {self.total_epochs}"
            )
        if min(self.base_lr, self.warmup_lr, self.eps) <= 0 or self.weight_decay < 0:
            raise ConfigError("rates must be positive (weight decay may be zero)")
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ConfigError("batch_size and total_epochs must be >= 1")

    def to_dict(self):
        return {
            "base_lr": self.base_lr, "weight_decay": self.weight_decay,
            "betas": list(self.betas), "eps": self.eps,
            "warmup_epochs": self.warmup_epochs, "warmup_lr": self.warmup_lr,
            "total_epochs": self.total_epochs, "batch_size": self.batch_size,
        }


def lr_at(step, spec, steps_per_epoch=1):
    """Linear ramp warmup_lr -> base_lr over the warmup epochs, then cosine
    decay base_lr -> 0 over the remaining steps."""
    warm = spec.warmup_epochs * steps_per_epoch
    total = spec.total_epochs * steps_per_epoch
    if step < 0:
        raise ConfigError(f"negative step {step}")
    if step < warm:
        return spec.warmup_lr + (spec.base_lr - spec.warmup_lr) * step / warm
    if step >= total:
        return 0.0
    if total == warm:
        return spec.base_lr
    return 0.5 * spec.base_lr * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


def adamw_step(named_params, state, spec, lr_t):
    """Decoupled decay w *= (1 - lr*wd), then bias-corrected moment update.

    Only requires-grad parameters are visited; frozen ones never get
    moments. A missing gradient buffer counts as an all-zero gradient
    (decay still applies).
    """
    beta1, beta2 = spec.betas
    for name, p in named_params:
        if not p.requires_grad:
            continue
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if grad.shape != p.data.shape:
            raise ConfigError(f"gradient shape {grad.shape} != param shape {p.data.shape} for {name}")
        st = state.get(name)
        if st is None:
            st = state[name] = {"step": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        st["step"] += 1
        t = st["step"]
        if spec.weight_decay:
            p.data *= 1.0 - lr_t * spec.weight_decay
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * grad
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * grad * grad
        m_hat = st["m"] / (1.0 - beta1 ** t)
        v_hat = st["v"] / (1.0 - beta2 ** t)
        p.data -= lr_t * m_hat / (np.sqrt(v_hat) + spec.eps)


@dataclass
class TrainRecord:
    seed: int
    config_hash: str
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    final_train_acc: float = 0.0
    final_val_acc: float = 0.0
    final_test_acc: float = 0.0
    elapsed_seconds: float = 0.0

    def to_dict(self, include_timing=True):
        out = {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "steps": self.steps,
            "epochs": self.epochs,
            "final_train_acc": self.final_train_acc,
            "final_val_acc": self.final_val_acc,
            "final_test_acc": self.final_test_acc,
        }
        if include_timing:
            out["elapsed_seconds"] = self.elapsed_seconds
        return out


def forward_pass(model, images, gist_token=None, attn_sink=None):
    """build input -> shallow prompts -> gist injection -> encoder stack."""
    state = bb.build_input(images, model)
    if model.prompt_tokens is not None:
        state = bb.insert_tokens(state, 1, model.prompt_tokens, bb.PROMPT)
    if gist_token is not None:
        state = losses.inject_gist(state, gist_token)
    return bb.run_encoder(state, model, attn_sink=attn_sink)


def evaluate(model, dataset, gist_token=None, batch_size=256):
    """Fraction of correct class-token argmax predictions."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty split")
    return float(np.mean(predictions(model, dataset, gist_token, batch_size)
                         == dataset.labels))


def predictions(model, dataset, gist_token=None, batch_size=256):
    preds = []
    for lo in range(0, len(dataset), batch_size):
        state = forward_pass(model, dataset.images[lo:lo + batch_size], gist_token)
        preds.append(losses.predict(state, model))
    return np.concatenate(preds)


def trainable_entries(model, gist_token=None):
    entries = list(model.named_trainable())
    for att in model.attached:
        entries.extend((name, p) for name, p in att.tensors.items() if p.requires_grad)
    if gist_token is not None and gist_token.requires_grad:
        entries.append(("gist.token", gist_token))
    return entries


def finetune(model, train, val, test, optim, seed, gist_cfg=None,
             config_hash="", eval_every=1):
    """Run the fine-tuning loop; returns (record, gist_token).

    The freeze map must already be set. When the gist objective is enabled
    a fresh gist token is created from the run seed; with it disabled (or
    None) the loop is exactly the traditional one. Frozen parameters are
    verified bitwise against their pre-training bytes before returning.
    """
    cfg = gist_cfg or DISABLED_GIST
    t0 = time.monotonic()

    gist_token = None
    if cfg.enabled:
        gist_token = losses.new_gist_token(
            cfg.gist_len, model.config.embed_dim, seed,
            dtype=model.params["head.weight"].data.dtype)

    frozen_before = {name: p.data.copy() for name, p in model.params.items()
                     if not p.requires_grad}

    entries = trainable_entries(model, gist_token)
    tensors = [p for _, p in entries]
    adam_state = {}
    record = TrainRecord(seed=seed, config_hash=config_hash)

    n = len(train)
    steps_per_epoch = (n + optim.batch_size - 1) // optim.batch_size
    step = 0
    for epoch in range(optim.total_epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for lo in range(0, n, optim.batch_size):
            batch = order[lo:lo + optim.batch_size]
            images = train.images[batch]
            labels = train.labels[batch]
            lr_t = lr_at(step, optim, steps_per_epoch)
            try:
                with T.Tape():
                    state = forward_pass(model, images, gist_token)
                    s_cls = bb.classify(state, model, bb.CLS)
                    s_gist = bb.classify(state, model, bb.GIST) if cfg.enabled else None
                    s_vpt = bb.classify(state, model, bb.PROMPT) if cfg.aux_vpt_loss else None
                    breakdown = losses.overall_loss(s_cls, labels, cfg, s_gist=s_gist, s_vpt=s_vpt)
                    if not np.isfinite(breakdown.l_all.data):
                        raise NumericError("non-finite loss")
                    T.backward(breakdown.l_all)
            except NumericError as e:
                raise NumericError(f"aborted at step {step} (epoch {epoch}): {e}") from e
            adamw_step(entries, adam_state, optim, lr_t)
            T.zero_grad(tensors)
            record.steps.append({"step": step, "epoch": epoch, "lr": lr_t,
                                 **breakdown.to_floats()})
            step += 1
        if eval_every and (epoch + 1) % eval_every == 0:
            record.epochs.append({
                "epoch": epoch,
                "train_acc": evaluate(model, train, gist_token),
                "val_acc": evaluate(model, val, gist_token),
            })

    record.final_train_acc = evaluate(model, train, gist_token)
    record.final_val_acc = evaluate(model, val, gist_token)
    record.final_test_acc = evaluate(model, test, gist_token)
    record.elapsed_seconds = time.monotonic() - t0

    for name, before in frozen_before.items():
        after = model.params[name].data
        if before.tobytes() != after.tobytes():
            raise NumericError(f"frozen parameter {name} changed during fine-tuning")
    return record, gist_token
