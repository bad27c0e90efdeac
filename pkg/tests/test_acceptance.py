"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6 and 7 share one benchmark: a D=32, 4-layer backbone pretrained
on a source task, then adapter fine-tuning on 4 downstream tasks x 5 seeds
under four loss modes. Run with ``pytest -s tests/test_acceptance.py`` to
see the per-criterion lines.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from gistlab import backbone as bb
from gistlab import checks
from gistlab import cli
from gistlab import config as cfgmod
from gistlab import data
from gistlab import losses
from gistlab import peft
from gistlab import tensor as T
from gistlab import trainer
from gistlab.errors import FormatError


def _report(criterion, ok, detail):
    print(f"\n[acceptance {criterion}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# --------------------------------------------------------------------------
# shared benchmark (criteria 6, 7, 9)
# --------------------------------------------------------------------------

BENCHMARK_SEEDS = [0, 1, 2, 3, 4]


def benchmark_config(output_dir):
    return cfgmod.from_dict({
        "backbone": {
            "image_side": 16, "patch_side": 4, "channels": 1, "embed_dim": 32,
            "num_layers": 4, "num_heads": 4, "ffn_hidden": 64, "num_classes": 8,
        },
        "pretrain": {
            "task": {"generator": "stripes", "image_side": 16, "channels": 1,
                     "num_classes": 8, "noise_std": 0.1, "seed": 1},
            "split": {"train_n": 2000, "val_n": 200, "test_n": 500, "few_shot_k": None},
            "optim": {"base_lr": 0.01, "weight_decay": 1e-4, "betas": [0.9, 0.999],
                      "eps": 1e-8, "warmup_epochs": 2, "warmup_lr": 1e-7,
                      "total_epochs": 25, "batch_size": 64},
            "seed": 7,
        },
        "finetune": {
            "tasks": [
                {"generator": "stripes", "image_side": 16, "channels": 1,
                 "num_classes": 4, "noise_std": 0.25, "seed": 50},
                {"generator": "blobs", "image_side": 16, "channels": 1,
                 "num_classes": 4, "noise_std": 0.15, "seed": 51},
                {"generator": "count", "image_side": 16, "channels": 1,
                 "num_classes": 4, "noise_std": 0.15, "seed": 52},
                {"generator": "xor_patch", "image_side": 16, "channels": 1,
                 "num_classes": 5, "noise_std": 0.10, "seed": 53},
            ],
            "split": {"train_n": 160, "val_n": 40, "test_n": 600, "few_shot_k": None},
            "optim": {"base_lr": 0.01, "weight_decay": 1e-4, "betas": [0.9, 0.999],
                      "eps": 1e-8, "warmup_epochs": 3, "warmup_lr": 1e-7,
                      "total_epochs": 30, "batch_size": 32},
            "peft": [{"kind": "adapter", "adapter_hidden": 4, "adapter_scale": 0.1,
                      "prompt_len": 20}],
            "gist": {"enabled": True, "gist_len": 1, "temperature": 3.0, "mu": 0.5,
                     "lam": 0.75, "interaction": "bkld", "aux_vpt_loss": False},
            "seeds": BENCHMARK_SEEDS,
            "eval_every": 0,
        },
        "output_dir": str(output_dir),
    })


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """Pretrain once, then run every (task, seed) cell under four modes."""
    out = tmp_path_factory.mktemp("bench")
    cfg = benchmark_config(out)

    t0 = time.monotonic()
    ckpt_path = cli.cmd_pretrain(cfg, out)
    pretrain_elapsed = time.monotonic() - t0
    blob = ckpt_path.read_bytes()

    modes = {
        "traditional": None,
        "full": cfg.gist,
        "cls+gist": replace(cfg.gist, lam=0.0),
        "cls+bkl": replace(cfg.gist, mu=0.0),
    }
    accs = {m: {} for m in modes}
    elapsed = {m: 0.0 for m in modes}
    final_runs = {}
    for idx, task in enumerate(cfg.tasks):
        for mode, gist_cfg in modes.items():
            for seed in BENCHMARK_SEEDS:
                t0 = time.monotonic()
                model, token, record = cli.run_single(blob, cfg, task, idx, seed, gist_cfg)
                elapsed[mode] += time.monotonic() - t0
                accs[mode][(idx, seed)] = record.final_test_acc
                if mode == "full" and seed == 0:
                    final_runs[idx] = (model, token)
    return {
        "config": cfg,
        "accs": accs,
        "pretrain_elapsed": pretrain_elapsed,
        "run_elapsed": elapsed,
        "full_runs": final_runs,
        "pretrain_blob": blob,
    }


# --------------------------------------------------------------------------
# criterion 1: gradient suite
# --------------------------------------------------------------------------

class TestCriterion1GradientSuite:
    def test_gradcheck_all_ops_and_full_loss(self):
        t0 = time.monotonic()
        report = checks.gradcheck_report(h=1e-4)
        elapsed = time.monotonic() - t0
        worst = max(report, key=lambda r: r["max_rel_err"])
        ops = [r["op"] for r in report]
        ok = (all(r["passed"] for r in report)
              and "full_objective" in ops and elapsed < 60.0)
        _report(1, ok,
                f"{len(report)} checks, worst {worst['op']}={worst['max_rel_err']:.2e} "
                f"(< 1e-4), {elapsed:.1f}s (< 60s)")


# --------------------------------------------------------------------------
# criterion 2: BKLD property suite
# --------------------------------------------------------------------------

class TestCriterion2BkldProperties:
    def test_thousand_pairs_all_temperatures(self):
        rng = np.random.default_rng(2024)
        temps = (0.5, 1.0, 3.0, 10.0)
        oracle_max_gap = 0.0
        for trial in range(1000):
            k = int(rng.integers(2, 9))
            a = rng.normal(scale=3.0, size=(1, k))
            # every 5th pair is a constant shift: identical softened distributions
            b = a + rng.normal() if trial % 5 == 0 else rng.normal(scale=3.0, size=(1, k))
            for temp in temps:
                ta, tb = T.Tensor(a, dtype=np.float64), T.Tensor(b, dtype=np.float64)
                f, r, s = losses.bkld(ta, tb, temp)
                f2, r2, s2 = losses.bkld(tb, ta, temp)
                assert s.item() >= 0.0
                assert s.item() == s2.item() and f.item() == r2.item() and r.item() == f2.item()

                def soft(z):
                    e = np.exp(z / temp - (z / temp).max())
                    return e / e.sum()
                pa, pb = soft(a[0]), soft(b[0])
                if np.abs(pa - pb).max() <= 1e-7:
                    assert s.item() <= 1e-7
                if s.item() <= 1e-12:
                    assert np.abs(pa - pb).max() <= 1e-5
                direct = float((pa * np.log(pa / pb)).sum() + (pb * np.log(pb / pa)).sum())
                oracle_max_gap = max(oracle_max_gap, abs(s.item() - direct))
        ok = oracle_max_gap < 1e-8
        _report(2, ok, f"1000 pairs x T in {temps}: nonneg, swap-exact, "
                       f"zero-iff-equal, oracle gap {oracle_max_gap:.1e} (< 1e-8)")


# --------------------------------------------------------------------------
# criterion 3: baseline equivalence over a 50-step trajectory
# --------------------------------------------------------------------------

class TestCriterion3BaselineEquivalence:
    def test_fifty_step_trajectory_bit_identical(self):
        outputs = []
        for gist_cfg in (None, losses.GistLossConfig(enabled=False)):
            config = bb.BackboneConfig(image_side=8, patch_side=4, channels=1,
                                       embed_dim=16, num_layers=2, num_heads=4,
                                       ffn_hidden=32, num_classes=2)
            model = bb.init_model(config, seed=31)
            peft.attach_adapter(model, peft.PeftSpec(peft.ADAPTER), seed=32)
            bb.set_finetune_freeze(model)
            spec = data.TaskSpec(data.STRIPES, image_side=8, num_classes=2,
                                 noise_std=0.1, seed=33)
            splits = data.make_splits(spec, data.SplitSpec(train_n=80, val_n=16, test_n=32))
            optim = trainer.OptimSpec(base_lr=1e-3, warmup_epochs=1, total_epochs=10,
                                      batch_size=16)
            record, token = trainer.finetune(model, *splits, optim, seed=34,
                                             gist_cfg=gist_cfg)
            assert token is None and len(record.steps) == 50
            extras = {}
            for att in model.attached:
                extras.update(att.tensors)
            outputs.append((json.dumps(record.to_dict(include_timing=False), sort_keys=True),
                            bb.save_checkpoint(model, extras)))
        ok = outputs[0][0] == outputs[1][0] and outputs[0][1] == outputs[1][1]
        _report(3, ok, "50-step run with gist disabled is bit-identical to a run "
                       "with no gist machinery (metrics and parameters)")


# --------------------------------------------------------------------------
# criterion 4: frozen-parameter audit
# --------------------------------------------------------------------------

class TestCriterion4FrozenAudit:
    def test_backbone_untouched_including_class_token(self, benchmark):
        cfg = benchmark["config"]
        model, _, _ = bb.load_checkpoint(benchmark["pretrain_blob"])
        bb.reinit_head(model, [0, 0], num_classes=cfg.tasks[0].num_classes)
        peft.attach(model, cfg.peft[0], seed=0)
        bb.set_finetune_freeze(model)
        before = {n: p.data.tobytes() for n, p in model.params.items()
                  if not p.requires_grad}
        splits = data.make_splits(cfg.tasks[0], replace(cfg.split, train_n=64, test_n=64))
        optim = replace(cfg.optim, total_epochs=5)
        trainer.finetune(model, *splits, optim, seed=0, gist_cfg=cfg.gist)
        changed = [n for n, blob in before.items()
                   if model.params[n].data.tobytes() != blob]
        ok = not changed and "cls_token" in before
        _report(4, ok, f"{len(before)} frozen tensors (class token included) "
                       f"bitwise unchanged after fine-tuning; changed={changed}")


# --------------------------------------------------------------------------
# criterion 5: parameter accounting at reference scale
# --------------------------------------------------------------------------

class TestCriterion5ParameterAccounting:
    def test_counts_at_vitb_width(self):
        config = bb.BackboneConfig(image_side=16, patch_side=16, channels=3,
                                   embed_dim=768, num_layers=12, num_heads=12,
                                   ffn_hidden=3072, num_classes=10)
        model = bb.init_model(config, seed=55)
        bb.set_finetune_freeze(model)

        token = losses.new_gist_token(1, 768, seed=56)
        gist_count = peft.trainable_parameter_count(model, token).by_group["gist"]

        adapter = peft.attach_adapter(model, peft.PeftSpec(peft.ADAPTER, adapter_hidden=4),
                                      seed=57)
        prompt = peft.attach_prompt(model, peft.PeftSpec(peft.PROMPT, prompt_len=20),
                                    seed=58)
        adapter_expected = 12 * ((768 * 4 + 4) + (4 * 768 + 768))
        ok = (gist_count == 768
              and adapter.count() == adapter_expected == 82992
              and prompt.count() == 20 * 768 == 15360)
        _report(5, ok, f"gist adds exactly D=768, adapter {adapter.count()} "
                       f"(closed form {adapter_expected}), prompt {prompt.count()} (20*768)")


# --------------------------------------------------------------------------
# criteria 6 and 7: direction-of-effect benchmark and ablation ordering
# --------------------------------------------------------------------------

class TestCriterion6DirectionOfEffect:
    def test_gist_vs_traditional(self, benchmark):
        accs = benchmark["accs"]
        cells = list(accs["traditional"])
        gist_mean = float(np.mean(list(accs["full"].values())))
        trad_mean = float(np.mean(list(accs["traditional"].values())))
        wins = sum(1 for c in cells if accs["full"][c] > accs["traditional"][c])
        runtime = (benchmark["pretrain_elapsed"] + benchmark["run_elapsed"]["traditional"]
                   + benchmark["run_elapsed"]["full"])
        ok = (gist_mean >= trad_mean - 0.005
              and wins / len(cells) >= 0.60
              and runtime < 900.0)
        _report(6, ok,
                f"gist {gist_mean:.4f} vs traditional {trad_mean:.4f} "
                f"({100 * (gist_mean - trad_mean):+.2f} pts, >= -0.5 required); "
                f"strict wins {wins}/{len(cells)} (>= 60% required); "
                f"runtime {runtime:.0f}s (< 900s)")


class TestCriterion7AblationOrdering:
    def test_full_loss_tops_single_ablations(self, benchmark):
        accs = benchmark["accs"]
        means = {m: float(np.mean(list(v.values()))) for m, v in accs.items()}
        ok = (means["full"] >= means["cls+gist"] - 0.005
              and means["full"] >= means["cls+bkl"] - 0.005
              and means["full"] >= means["traditional"] - 0.005)
        _report(7, ok,
                "mean accuracy full={full:.4f} >= cls+bkl={cls+bkl:.4f} - 0.5pts, "
                ">= cls+gist={cls+gist:.4f} - 0.5pts, "
                ">= traditional={traditional:.4f} - 0.5pts".format(**means))


# --------------------------------------------------------------------------
# criterion 8: determinism and persistence
# --------------------------------------------------------------------------

class TestCriterion8DeterminismPersistence:
    def _small_run(self):
        config = bb.BackboneConfig(image_side=8, patch_side=4, channels=1,
                                   embed_dim=16, num_layers=1, num_heads=4,
                                   ffn_hidden=16, num_classes=2)
        model = bb.init_model(config, seed=81)
        peft.attach_adapter(model, peft.PeftSpec(peft.ADAPTER), seed=82)
        bb.set_finetune_freeze(model)
        spec = data.TaskSpec(data.BLOBS, image_side=8, num_classes=2, noise_std=0.1, seed=83)
        splits = data.make_splits(spec, data.SplitSpec(train_n=32, val_n=8, test_n=16))
        optim = trainer.OptimSpec(base_lr=3e-3, warmup_epochs=1, total_epochs=4, batch_size=16)
        record, token = trainer.finetune(model, *splits, optim, seed=84,
                                         gist_cfg=losses.GistLossConfig())
        extras = {}
        for att in model.attached:
            extras.update(att.tensors)
        extras["gist.token"] = token
        return (json.dumps(record.to_dict(include_timing=False), sort_keys=True),
                bb.save_checkpoint(model, extras))

    def test_reruns_round_trips_and_corruption(self, tmp_path):
        rec1, ckpt1 = self._small_run()
        rec2, ckpt2 = self._small_run()
        same_run = rec1 == rec2 and ckpt1 == ckpt2

        model2, extras, _ = bb.load_checkpoint(ckpt1)
        ckpt_again = bb.save_checkpoint(model2, extras)
        ckpt_round_trip = ckpt_again == ckpt1

        spec = data.TaskSpec(data.COUNT, num_classes=4, noise_std=0.2, seed=85)
        ds = data.generate(spec, 40)
        path = tmp_path / "roundtrip.gstdata"
        data.write_dataset(ds, spec, path)
        loaded, _ = data.read_dataset(path)
        data_round_trip = (loaded.images.tobytes() == ds.images.tobytes()
                           and loaded.labels.tolist() == ds.labels.tolist())

        corrupt_positioned = False
        try:
            bb.load_checkpoint(ckpt1[:30])
        except FormatError as e:
            corrupt_positioned = "offset" in str(e)
        blob = bytearray(path.read_bytes())
        blob[2] ^= 0x40
        path.write_bytes(bytes(blob))
        try:
            data.read_dataset(path)
            data_corrupt = False
        except FormatError as e:
            data_corrupt = "offset 0" in str(e)

        ok = all([same_run, ckpt_round_trip, data_round_trip,
                  corrupt_positioned, data_corrupt])
        _report(8, ok,
                f"identical rerun={same_run}, checkpoint round trip={ckpt_round_trip}, "
                f"dataset round trip={data_round_trip}, corruption rejected with "
                f"offsets={corrupt_positioned and data_corrupt}")


# --------------------------------------------------------------------------
# criterion 9: prediction uses class-token logits exclusively
# --------------------------------------------------------------------------

class TestCriterion9InferenceRule:
    def test_gist_head_application_is_never_consulted(self, benchmark):
        cfg = benchmark["config"]
        checked = 0
        for idx, (model, token) in benchmark["full_runs"].items():
            _, _, test = data.make_splits(cfg.tasks[idx], cfg.split)
            images = test.images[:128]
            state = trainer.forward_pass(model, images, token)
            assert bb.GIST in state.layout  # token participates in attention
            with_gist_head = bb.classify(state, model, bb.GIST)  # the deletable branch
            preds = losses.predict(state, model)
            cls_only = np.argmax(bb.classify(state, model, bb.CLS).data, axis=1)
            assert with_gist_head.data.shape == (128, cfg.tasks[idx].num_classes)
            npt.assert_array_equal(preds, cls_only)
            # non-vacuous: the gist logits genuinely differ from the cls logits
            assert not np.allclose(with_gist_head.data,
                                   bb.classify(state, model, bb.CLS).data)
            checked += len(preds)
        _report(9, True, f"{checked} predictions identical with and without the "
                         f"gist head application; gist token present in attention")
