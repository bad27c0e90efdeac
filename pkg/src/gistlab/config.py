"""Experiment configuration: strict JSON with no silently-inferred defaults.

Every section must spell out all of its fields and unknown keys are
rejected, so a config file plus a seed fully determines a run. The config
hash (sha256 over canonical JSON) keys every artifact a run writes;
loaders verify it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .backbone import BackboneConfig
from .data import SplitSpec, TaskSpec
from .errors import ConfigError
from .losses import GistLossConfig
from .peft import PeftSpec
from .trainer import OptimSpec

_BACKBONE_KEYS = ("image_side", "patch_side", "channels", "embed_dim",
                  "num_layers", "num_heads", "ffn_hidden", "num_classes")
_TASK_KEYS = ("generator", "image_side", "channels", "num_classes", "noise_std", "seed")
_SPLIT_KEYS = ("train_n", "val_n", "test_n", "few_shot_k")
_OPTIM_KEYS = ("base_lr", "weight_decay", "betas", "eps", "warmup_epochs",
               "warmup_lr", "total_epochs", "batch_size")
_PEFT_KEYS = ("kind", "adapter_hidden", "adapter_scale", "prompt_len")
_GIST_KEYS = ("enabled", "gist_len", "temperature", "mu", "lam", "interaction", "aux_vpt_loss")
_PRETRAIN_KEYS = ("task", "split", "optim", "seed")
_FINETUNE_KEYS = ("tasks", "split", "optim", "peft", "gist", "seeds", "eval_every")
_TOP_KEYS = ("backbone", "pretrain", "finetune", "output_dir")


def _section(raw, keys, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(raw) - set(keys)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = set(keys) - set(raw)
    if missing:
        raise ConfigError(f"{where}: missing field(s) {sorted(missing)}")
    return raw


def _optim(raw, where):
    d = dict(_section(raw, _OPTIM_KEYS, where))
    d["betas"] = tuple(d["betas"])
    return OptimSpec(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig
    pretrain_task: TaskSpec
    pretrain_split: SplitSpec
    pretrain_optim: OptimSpec
    pretrain_seed: int
    tasks: tuple
    split: SplitSpec
    optim: OptimSpec
    peft: tuple
    gist: GistLossConfig
    seeds: tuple
    eval_every: int
    output_dir: str

    def to_dict(self):
        return {
            "backbone": self.backbone.to_dict(),
            "pretrain": {
                "task": self.pretrain_task.to_dict(),
                "split": self.pretrain_split.to_dict(),
                "optim": self.pretrain_optim.to_dict(),
                "seed": self.pretrain_seed,
            },
            "finetune": {
                "tasks": [t.to_dict() for t in self.tasks],
                "split": self.split.to_dict(),
                "optim": self.optim.to_dict(),
                "peft": [p.to_dict() for p in self.peft],
                "gist": self.gist.to_dict(),
                "seeds": list(self.seeds),
                "eval_every": self.eval_every,
            },
            "output_dir": self.output_dir,
        }


def canonical_json(payload):
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(payload):
    """Stable key for on-disk artifacts."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def pretrain_hash(config):
    d = config.to_dict()
    return config_hash({"backbone": d["backbone"], "pretrain": d["pretrain"]})


def from_dict(raw):
    _section(raw, _TOP_KEYS, "config")
    bb_raw = _section(raw["backbone"], _BACKBONE_KEYS, "backbone")
    pre = _section(raw["pretrain"], _PRETRAIN_KEYS, "pretrain")
    fin = _section(raw["finetune"], _FINETUNE_KEYS, "finetune")
    if not isinstance(fin["tasks"], list) or not fin["tasks"]:
        raise ConfigError("finetune.tasks: expected a non-empty list")
    if not isinstance(fin["peft"], list):
        raise ConfigError("finetune.peft: expected a list")
    if not isinstance(fin["seeds"], list) or not fin["seeds"]:
        raise ConfigError("finetune.seeds: expected a non-empty list")
    if not isinstance(raw["output_dir"], str):
        raise ConfigError("output_dir: expected a string")

    return ExperimentConfig(
        backbone=BackboneConfig(**bb_raw),
        pretrain_task=TaskSpec(**_section(pre["task"], _TASK_KEYS, "pretrain.task")),
        pretrain_split=SplitSpec(**_section(pre["split"], _SPLIT_KEYS, "pretrain.split")),
        pretrain_optim=_optim(pre["optim"], "pretrain.optim"),
        pretrain_seed=int(pre["seed"]),
        tasks=tuple(TaskSpec(**_section(t, _TASK_KEYS, f"finetune.tasks[{i}]"))
                    for i, t in enumerate(fin["tasks"])),
        split=SplitSpec(**_section(fin["split"], _SPLIT_KEYS, "finetune.split")),
        optim=_optim(fin["optim"], "finetune.optim"),
        peft=tuple(PeftSpec(**_section(p, _PEFT_KEYS, f"finetune.peft[{i}]"))
                   for i, p in enumerate(fin["peft"])),
        gist=GistLossConfig(**_section(fin["gist"], _GIST_KEYS, "finetune.gist")),
        seeds=tuple(int(s) for s in fin["seeds"]),
        eval_every=int(fin["eval_every"]),
        output_dir=raw["output_dir"],
    )


def load(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}") from e
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from e
    return from_dict(raw)


def save(config, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
