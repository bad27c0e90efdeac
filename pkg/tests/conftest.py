import pytest


def tiny_config_dict(output_dir, **over):
    """Smallest run that exercises every command end to end."""
    cfg = {
        "backbone": {
            "image_side": 8, "patch_side": 4, "channels": 1, "embed_dim": 8,
            "num_layers": 1, "num_heads": 2, "ffn_hidden": 16, "num_classes": 2,
        },
        "pretrain": {
            "task": {"generator": "stripes", "image_side": 8, "channels": 1,
                     "num_classes": 2, "noise_std": 0.05, "seed": 11},
            "split": {"train_n": 48, "val_n": 8, "test_n": 16, "few_shot_k": None},
            "optim": {"base_lr": 0.03, "weight_decay": 1e-4, "betas": [0.9, 0.999],
                      "eps": 1e-8, "warmup_epochs": 1, "warmup_lr": 1e-7,
                      "total_epochs": 15, "batch_size": 16},
            "seed": 11,
        },
        "finetune": {
            "tasks": [{"generator": "blobs", "image_side": 8, "channels": 1,
                       "num_classes": 2, "noise_std": 0.05, "seed": 22}],
            "split": {"train_n": 24, "val_n": 8, "test_n": 16, "few_shot_k": None},
            "optim": {"base_lr": 0.01, "weight_decay": 1e-4, "betas": [0.9, 0.999],
                      "eps": 1e-8, "warmup_epochs": 1, "warmup_lr": 1e-7,
                      "total_epochs": 3, "batch_size": 12},
            "peft": [{"kind": "adapter", "adapter_hidden": 2, "adapter_scale": 0.1,
                      "prompt_len": 20}],
            "gist": {"enabled": True, "gist_len": 1, "temperature": 3.0, "mu": 0.5,
                     "lam": 0.75, "interaction": "bkld", "aux_vpt_loss": False},
            "seeds": [0, 1],
            "eval_every": 0,
        },
        "output_dir": str(output_dir),
    }
    cfg.update(over)
    return cfg


@pytest.fixture
def tiny_config(tmp_path):
    return tiny_config_dict(tmp_path / "runs")
