"""Batch command-line interface.

Commands: pretrain, finetune, ablate, gradcheck, export-attention. All
reads come from an explicit JSON config; every artifact embeds the config
hash and loaders verify it. Exit codes: 0 success, 1 validation failure,
2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import checks
from . import config as cfgmod
from . import data
from . import losses
from . import peft as peft_mod
from . import trainer
from .errors import ConfigError, FormatError

TRADITIONAL = "traditional"
GIST_MODE = "gist"

ABLATION_GRIDS = ("TOKEN_LEN", "LOSS_TERMS", "LAMBDA", "INTERACTION")


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_metrics(path, record):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in record.steps:
            f.write(json.dumps({"kind": "step", **row}, sort_keys=True) + "\n")
        for row in record.epochs:
            f.write(json.dumps({"kind": "epoch", **row}, sort_keys=True) + "\n")
        f.write(json.dumps({
            "kind": "final",
            "train_acc": record.final_train_acc,
            "val_acc": record.final_val_acc,
            "test_acc": record.final_test_acc,
        }, sort_keys=True) + "\n")


def _dtype(precision):
    return {"f32": np.float32, "f64": np.float64}[precision]


def _cast_model(model, dtype):
    for p in model.params.values():
        p.data = p.data.astype(dtype)


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg, out_dir, precision="f32"):
    """Supervised training of the backbone on the source task."""
    run_dir = Path(out_dir) / "pretrain"
    run_dir.mkdir(parents=True, exist_ok=True)
    phash = cfgmod.pretrain_hash(cfg)

    model = bb.init_model(cfg.backbone, seed=cfg.pretrain_seed, dtype=_dtype(precision))
    model.pretrain_seed = cfg.pretrain_seed
    train, val, test = data.make_splits(cfg.pretrain_task, cfg.pretrain_split)
    record, _ = trainer.finetune(model, train, val, test, cfg.pretrain_optim,
                                 seed=cfg.pretrain_seed, config_hash=phash)

    blob = bb.save_checkpoint(model, metadata={"config_hash": phash})
    ckpt_path = run_dir / "checkpoint.gstckpt"
    ckpt_path.write_bytes(blob)
    _write_metrics(run_dir / "metrics.jsonl", record)
    _write_json(run_dir / "summary.json", {
        "config_hash": phash,
        "final_train_acc": record.final_train_acc,
        "final_val_acc": record.final_val_acc,
        "final_test_acc": record.final_test_acc,
        "elapsed_seconds": record.elapsed_seconds,
    })
    print(f"pretrain: test_acc={record.final_test_acc:.4f} -> {ckpt_path}")
    return ckpt_path


def _load_verified_pretrain(cfg, out_dir):
    ckpt_path = Path(out_dir) / "pretrain" / "checkpoint.gstckpt"
    if not ckpt_path.exists():
        raise ConfigError(f"pretrain checkpoint not found at {ckpt_path}; run pretrain first")
    blob = ckpt_path.read_bytes()
    meta, _ = bb.read_checkpoint_raw(blob)
    expect = cfgmod.pretrain_hash(cfg)
    if meta.get("config_hash") != expect:
        raise FormatError(
            f"checkpoint config hash {meta.get('config_hash')} does not match {expect}"
        )
    return blob


# ---------------------------------------------------------------------------
# fine-tuning runs
# ---------------------------------------------------------------------------

def run_single(pretrain_blob, cfg, task, task_idx, seed, gist_cfg, precision="f32"):
    """One fine-tuning run: fresh model from the pretrain checkpoint, fresh
    head, PEFT attached, backbone frozen."""
    model, _, _ = bb.load_checkpoint(pretrain_blob)
    if precision != "f32":
        _cast_model(model, _dtype(precision))
    bb.reinit_head(model, [seed, task_idx], num_classes=task.num_classes)
    for spec in cfg.peft:
        peft_mod.attach(model, spec, seed=seed)
    bb.set_finetune_freeze(model)
    splits = data.make_splits(task, cfg.split)
    full_hash = cfgmod.config_hash(cfg.to_dict())
    record, token = trainer.finetune(model, *splits, cfg.optim, seed=seed,
                                     gist_cfg=gist_cfg, config_hash=full_hash,
                                     eval_every=cfg.eval_every)
    return model, token, record


def _save_run(run_dir, cfg, model, token, record, gist_cfg, mode):
    run_dir.mkdir(parents=True, exist_ok=True)
    extras = {}
    for att in model.attached:
        extras.update(att.tensors)
    if token is not None:
        extras["gist.token"] = token
    meta = {
        "config_hash": record.config_hash,
        "mode": mode,
        "attachments": [att.spec.to_dict() for att in model.attached],
        "gist": gist_cfg.to_dict() if gist_cfg else None,
    }
    (run_dir / "final.gstckpt").write_bytes(bb.save_checkpoint(model, extras, meta))
    _write_metrics(run_dir / "metrics.jsonl", record)
    _write_json(run_dir / "record.json", record.to_dict())


def _task_name(task, idx):
    return f"task{idx}-{task.generator}"


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def cmd_finetune(cfg, out_dir, seeds=None, precision="f32"):
    """Every seed x framework mode on every downstream task, plus a summary
    holding both modes' mean and spread."""
    seeds = list(seeds) if seeds else list(cfg.seeds)
    pretrain_blob = _load_verified_pretrain(cfg, out_dir)
    full_hash = cfgmod.config_hash(cfg.to_dict())
    base = Path(out_dir) / "finetune"
    accs = {TRADITIONAL: {}, GIST_MODE: {}}

    for idx, task in enumerate(cfg.tasks):
        for mode in (TRADITIONAL, GIST_MODE):
            gist_cfg = cfg.gist if mode == GIST_MODE else None
            for seed in seeds:
                model, token, record = run_single(
                    pretrain_blob, cfg, task, idx, seed, gist_cfg, precision)
                run_dir = base / _task_name(task, idx) / mode / f"seed{seed}"
                _save_run(run_dir, cfg, model, token, record, gist_cfg, mode)
                accs[mode][(idx, seed)] = record.final_test_acc
                print(f"finetune {_task_name(task, idx)} {mode} seed={seed}: "
                      f"test_acc={record.final_test_acc:.4f}")

    summary = {"config_hash": full_hash, "seeds": seeds, "tasks": [], "modes": {}}
    for idx, task in enumerate(cfg.tasks):
        entry = {"task": _task_name(task, idx)}
        for mode in (TRADITIONAL, GIST_MODE):
            mean, std = _mean_std([accs[mode][(idx, s)] for s in seeds])
            entry[mode] = {"mean_acc": mean, "std_acc": std}
        summary["tasks"].append(entry)
    for mode in (TRADITIONAL, GIST_MODE):
        mean, std = _mean_std(list(accs[mode].values()))
        summary["modes"][mode] = {"mean_acc": mean, "std_acc": std}
    _write_json(base / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def _grid_cells(cfg, grid):
    g = cfg.gist
    if grid == "LAMBDA":
        return [("baseline", None)] + [
            (f"lambda={lam}", replace(g, lam=lam)) for lam in (0.25, 0.5, 0.75)]
    if grid == "TOKEN_LEN":
        return [(f"len={n}", replace(g, gist_len=n)) for n in (1, 10, 50, 100)]
    if grid == "LOSS_TERMS":
        return [
            ("cls", None),
            ("cls+gist", replace(g, mu=g.mu, lam=0.0)),
            ("cls+bkl", replace(g, mu=0.0, lam=g.lam)),
            ("cls+gist+bkl", g),
        ]
    if grid == "INTERACTION":
        return [("baseline", None)] + [
            (kind, replace(g, interaction=kind))
            for kind in (losses.BKLD, losses.MSE, losses.COSINE)]
    raise ConfigError(f"unknown ablation grid {grid!r}, expected one of {ABLATION_GRIDS}")


def cmd_ablate(cfg, grid, out_dir, seeds=None, precision="f32"):
    """Sweep one grid, averaging test accuracy over tasks and seeds."""
    seeds = list(seeds) if seeds else list(cfg.seeds)
    pretrain_blob = _load_verified_pretrain(cfg, out_dir)
    base = Path(out_dir) / "ablate" / grid
    rows = []
    for cell_name, cell_gist in _grid_cells(cfg, grid):
        cell_cfg = cfg if cell_gist is None else replace(cfg, gist=cell_gist)
        cell_dir = base / cell_name.replace("=", "_").replace("+", "_")
        cell_dir.mkdir(parents=True, exist_ok=True)
        cfgmod.save(replace(cell_cfg, output_dir=str(cell_dir)), cell_dir / "config.json")
        cell_accs = []
        for idx, task in enumerate(cfg.tasks):
            for seed in seeds:
                model, token, record = run_single(
                    pretrain_blob, cell_cfg, task, idx, seed, cell_gist, precision)
                run_dir = cell_dir / _task_name(task, idx) / f"seed{seed}"
                _save_run(run_dir, cell_cfg, model, token, record, cell_gist,
                          GIST_MODE if cell_gist else TRADITIONAL)
                cell_accs.append(record.final_test_acc)
        mean, std = _mean_std(cell_accs)
        row = {"cell": cell_name, "mean_acc": mean, "std_acc": std, "runs": len(cell_accs)}
        if grid == "TOKEN_LEN" and cell_gist is not None:
            row["gist_params"] = cell_gist.gist_len * cfg.backbone.embed_dim
        rows.append(row)
        print(f"ablate {grid} {cell_name}: mean_acc={mean:.4f} (+-{std:.4f})")

    table = {"grid": grid, "config_hash": cfgmod.config_hash(cfg.to_dict()),
             "seeds": seeds, "rows": rows}
    _write_json(base / "table.json", table)
    with open(base / "table.txt", "w", encoding="utf-8") as f:
        f.write(f"{grid}\n")
        for row in rows:
            extra = f"  params={row['gist_params']}" if "gist_params" in row else ""
            f.write(f"  {row['cell']:<16} {row['mean_acc']:.4f} +-{row['std_acc']:.4f}{extra}\n")
    return table


# ---------------------------------------------------------------------------
# gradcheck / attention export
# ---------------------------------------------------------------------------

def cmd_gradcheck(h=1e-4, seed=0):
    report = checks.gradcheck_report(h=h, seed=seed)
    failed = [r for r in report if not r["passed"]]
    for row in report:
        mark = "pass" if row["passed"] else "FAIL"
        print(f"{row['op']:<18} {row['max_rel_err']:.3e}  {mark}")
    if failed:
        print(f"{len(failed)} op(s) at or above {checks.THRESHOLD:g}")
    return report


def _reattach_from_checkpoint(blob):
    model, extras, meta = bb.load_checkpoint(blob)
    for spec_dict in meta.get("attachments") or []:
        peft_mod.attach(model, peft_mod.PeftSpec(**spec_dict), seed=0)
    for att in model.attached:
        for name, p in att.tensors.items():
            if name in extras:
                p.data = extras[name].data.copy()
    gist_cfg = losses.GistLossConfig(**meta["gist"]) if meta.get("gist") else None
    token = extras.get("gist.token")
    return model, token if (gist_cfg and gist_cfg.enabled) else None, meta


def cmd_export_attention(checkpoint_path, cfg, out_dir, count=4):
    """Row-normalized attention matrices per layer and head, as JSON."""
    blob = Path(checkpoint_path).read_bytes()
    model, token, meta = _reattach_from_checkpoint(blob)
    task = cfg.tasks[0]
    _, _, test = data.make_splits(task, cfg.split)
    images = test.images[:count]

    sink = []
    state = trainer.forward_pass(model, images, token, attn_sink=sink)
    out = Path(out_dir) / "attention"
    out.mkdir(parents=True, exist_ok=True)
    layout = list(state.layout)
    for layer, probs in enumerate(sink):
        for head in range(probs.shape[1]):
            _write_json(out / f"layer{layer}_head{head}.json", {
                "layer": layer,
                "head": head,
                "layout": layout,
                "attention": probs[:, head].astype(np.float64).tolist(),
            })
    _write_json(out / "index.json", {
        "config_hash": meta.get("config_hash"),
        "layers": len(sink),
        "heads": int(sink[0].shape[1]) if sink else 0,
        "images": int(images.shape[0]),
        "layout": layout,
        "gist_present": bb.GIST in layout,
    })
    print(f"exported {len(sink)} layers x {sink[0].shape[1]} heads -> {out}")
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parse_seeds(text):
    return [int(s) for s in text.split(",") if s.strip() != ""]


def build_parser():
    parser = argparse.ArgumentParser(prog="gistlab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
        p.add_argument("--precision", choices=("f32", "f64"), default="f32")

    p = sub.add_parser("pretrain", help="train the backbone on the source task")
    common(p)
    p = sub.add_parser("finetune", help="run traditional and gist modes over all seeds")
    common(p)
    p.add_argument("--seeds", type=_parse_seeds, default=None, help="comma-separated override")
    p = sub.add_parser("ablate", help="sweep one ablation grid")
    common(p)
    p.add_argument("--grid", required=True, choices=ABLATION_GRIDS)
    p.add_argument("--seeds", type=_parse_seeds, default=None)
    p = sub.add_parser("gradcheck", help="finite-difference suite over all ops")
    p.add_argument("--precision", choices=("f64",), default="f64")
    p = sub.add_parser("export-attention", help="dump attention maps for plotting")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=4)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code else 0
    try:
        if args.command == "gradcheck":
            report = cmd_gradcheck()
            return 0 if all(r["passed"] for r in report) else 1
        cfg = cfgmod.load(args.config)
        out_dir = args.out or cfg.output_dir
        if args.command == "pretrain":
            cmd_pretrain(cfg, out_dir, args.precision)
        elif args.command == "finetune":
            cmd_finetune(cfg, out_dir, args.seeds, args.precision)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.grid, out_dir, args.seeds, args.precision)
        elif args.command == "export-attention":
            cmd_export_attention(args.checkpoint, cfg, out_dir, args.count)
        return 0
    except (ConfigError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
