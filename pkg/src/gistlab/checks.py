"""64-bit finite-difference verification suite.

Covers every differentiable primitive, a full encoder layer, and the
complete training objective through a two-layer width-16 model with an
adapter and gist token attached, checking the gradient of every parameter
tensor. Used by the gradcheck command and the acceptance suite.
"""

from __future__ import annotations

import numpy as np

from . import backbone as bb
from . import losses
from . import peft
from . import tensor as T

THRESHOLD = 1e-4


def _graded_identity(t, grad_factor):
    """Forward identity whose backward is deliberately off by grad_factor.
    Test fixture for verifying the suite detects a corrupted backward."""
    def bwd(g, accum):
        accum(t, g * grad_factor)
    return T._result(t.data.copy(), (t,), bwd)


def _op_cases(rng):
    x64 = lambda shape: T.Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)
    c64 = lambda shape: T.Tensor(rng.normal(size=shape), dtype=np.float64)

    x = x64((3, 5))
    other = c64((3, 5))
    w = c64((5, 4))
    gamma, beta = c64(5), c64(5)
    labels = list(rng.integers(0, 4, size=3))

    return x, {
        "add": lambda v: T.sum_(T.add(v, other)),
        "sub": lambda v: T.sum_(T.sub(other, v)),
        "mul": lambda v: T.sum_(T.mul(v, other)),
        "scale": lambda v: T.sum_(T.scale(v, 2.5)),
        "matmul": lambda v: T.sum_(T.matmul(v, w)),
        "reshape": lambda v: T.sum_(T.mul(T.reshape(v, (5, 3)), T.reshape(other, (5, 3)))),
        "transpose": lambda v: T.sum_(T.mul(T.transpose(v, (1, 0)), T.transpose(other, (1, 0)))),
        "broadcast_to": lambda v: T.sum_(T.mul(T.broadcast_to(T.narrow(v, 0, 0, 1), (3, 5)), other)),
        "concat": lambda v: T.sum_(T.mul(T.concat([v, v], 1), T.concat([other, other], 1))),
        "narrow": lambda v: T.sum_(T.mul(T.narrow(v, 1, 0, 2), T.narrow(other, 1, 0, 2))),
        "sum": lambda v: T.sum_(T.mul(v, other)),
        "mean": lambda v: T.mean(T.mul(v, v)),
        "gelu": lambda v: T.sum_(T.mul(T.gelu(v), other)),
        "softmax_t": lambda v: T.sum_(T.mul(T.softmax_t(v, 3.0), other)),
        "log_softmax_t": lambda v: T.sum_(T.mul(T.log_softmax_t(v, 0.5), other)),
        "layer_norm": lambda v: T.sum_(T.mul(T.layer_norm(v, gamma, beta), other)),
        "cross_entropy": lambda v: T.cross_entropy(T.matmul(v, w), labels),
        "kl_divergence": lambda v: T.add(T.kl_divergence(v, other, 3.0),
                                         T.kl_divergence(other, v, 3.0)),
        "cosine_rows": lambda v: T.mean(T.cosine_rows(v, other)),
    }


def _check_model_setup(seed):
    config = bb.BackboneConfig(image_side=8, patch_side=4, channels=1, embed_dim=16,
                               num_layers=2, num_heads=4, ffn_hidden=24, num_classes=3)
    model = bb.init_model(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 7])
    for p in model.params.values():  # spread beyond init scale so paths are active
        p.data = p.data + rng.normal(scale=0.2, size=p.data.shape)
    peft.attach_adapter(model, peft.PeftSpec(peft.ADAPTER, adapter_hidden=3), seed=seed)
    for att in model.attached:
        for q in att.tensors.values():
            q.data = q.data + rng.normal(scale=0.2, size=q.data.shape)
    token = losses.new_gist_token(1, config.embed_dim, seed, dtype=np.float64)
    images = rng.uniform(size=(2, 1, 8, 8))
    labels = [0, 2]
    return model, token, images, labels


def _full_loss(model, token, images, labels, cfg):
    state = bb.build_input(images, model)
    state = losses.inject_gist(state, token)
    state = bb.run_encoder(state, model)
    s_cls = bb.classify(state, model, bb.CLS)
    s_gist = bb.classify(state, model, bb.GIST)
    return losses.overall_loss(s_cls, labels, cfg, s_gist=s_gist).l_all


def encoder_layer_error(seed=0, h=1e-4):
    """Cross-entropy through one encoder layer, checked against every
    parameter tensor of that layer; returns the worst relative error."""
    model, token, images, labels = _check_model_setup(seed)

    def f(_v):
        state = bb.build_input(images, model)
        state = bb.run_encoder(state, model)
        return T.cross_entropy(bb.classify(state, model, bb.CLS), labels)

    worst = 0.0
    for name, p in model.params.items():
        if name.startswith("layers.0."):
            worst = max(worst, T.finite_diff_check(f, p, h=h))
    return worst


def full_loss_error(seed=0, h=1e-4, cfg=None):
    """Objective through the 2-layer check model; every parameter tensor,
    adapter tensor, and the gist token is perturbed. Worst relative error."""
    model, token, images, labels = _check_model_setup(seed)
    cfg = cfg or losses.GistLossConfig(mu=0.5, lam=0.75, temperature=3.0)

    def f(_v):
        return _full_loss(model, token, images, labels, cfg)

    tensors = list(model.params.items())
    for att in model.attached:
        tensors.extend(att.tensors.items())
    tensors.append(("gist.token", token))
    worst = 0.0
    for _name, p in tensors:
        was = p.requires_grad
        p.requires_grad = True
        worst = max(worst, T.finite_diff_check(f, p, h=h))
        p.requires_grad = was
    return worst


def gradcheck_report(h=1e-4, seed=0, corrupt_op=None):
    """One (name, max relative error) entry per checked op, plus composite
    encoder-layer and full-objective rows. ``corrupt_op`` swaps in a
    deliberately wrong backward for that op (mutation fixture)."""
    rng = np.random.default_rng(seed)
    x, cases = _op_cases(rng)
    if corrupt_op is not None:
        if corrupt_op not in cases:
            raise ValueError(f"unknown op {corrupt_op!r}")
        inner = cases[corrupt_op]
        cases[corrupt_op] = lambda v: _graded_identity(inner(v), 1.05)

    report = []
    for name, f in cases.items():
        report.append({"op": name, "max_rel_err": T.finite_diff_check(f, x, h=h)})
    report.append({"op": "encoder_layer", "max_rel_err": encoder_layer_error(seed, h)})
    report.append({"op": "full_objective", "max_rel_err": full_loss_error(seed, h)})
    for row in report:
        row["passed"] = bool(row["max_rel_err"] < THRESHOLD)
    return report
