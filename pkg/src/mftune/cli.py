"""Command-line surface: datagen, pack-stats, gradcheck, train, eval, compare.

Experiment structure lives in a JSON config file (schema-validated, unknown
keys rejected); flags only select files and seeds. Schema violations exit 2,
runtime failures exit 1 with a structured error on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import batching, dataset, datagen
from .gradchecks import TOLERANCE, full_suite
from .losses import LOSS_KINDS
from .model import ModelConfig, load_model
from .trainer import ExperimentSpec, FamoParams, TrainConfig, compare, evaluate, train
from .tokenizer import tokenize_sample

logger = logging.getLogger(__name__)


class SchemaError(ValueError):
    pass


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise SchemaError(f"{where}: unknown keys {unknown}")


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing required key {key!r}")
    return obj[key]


def _load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise SchemaError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON ({e.msg})") from None


def _build_data(cfg: dict, seed_override: int | None) -> tuple[dataset.DatasetManifest, dataset.DatasetManifest]:
    where = "data"
    _check_keys(cfg, {"jsonl", "synth", "val_fraction", "split_seed"}, where)
    val_fraction = cfg.get("val_fraction", 0.1)
    split_seed = cfg.get("split_seed", 0)
    if "jsonl" in cfg and "synth" in cfg:
        raise SchemaError(f"{where}: give either 'jsonl' or 'synth', not both")
    if "jsonl" in cfg:
        manifest = dataset.load_jsonl(cfg["jsonl"])
    elif "synth" in cfg:
        s = cfg["synth"]
        _check_keys(s, {"kinds", "counts", "seed"}, f"{where}.synth")
        seed = seed_override if seed_override is not None else s.get("seed", 0)
        manifest = dataset.synth_tasks(_require(s, "kinds", where), _require(s, "counts", where), seed)
    else:
        raise SchemaError(f"{where}: needs 'jsonl' or 'synth'")
    return dataset.split(manifest, val_fraction, split_seed)


def _build_model_config(cfg: dict) -> ModelConfig:
    _check_keys(cfg, {"d_model", "n_layers", "n_heads", "seq_len", "vocab_size", "tie_embeddings"}, "model")
    return ModelConfig(**cfg)


def _build_train_config(cfg: dict, model: ModelConfig, seed_override: int | None) -> TrainConfig:
    allowed = {
        "mode", "task", "loss", "tokenization", "seq_len", "micro_batch", "global_batch",
        "lr_init", "lr_min", "schedule", "max_epochs", "seed", "famo", "eval_max_samples",
    }
    _check_keys(cfg, allowed, "train")
    if cfg.get("loss", "token_balanced") not in LOSS_KINDS:
        raise SchemaError(f"train.loss must be one of {LOSS_KINDS}")
    famo_cfg = cfg.get("famo", {})
    _check_keys(famo_cfg, {"weight_lr", "decay", "eps"}, "train.famo")
    kwargs = {k: v for k, v in cfg.items() if k != "famo"}
    kwargs["famo"] = FamoParams(**famo_cfg)
    kwargs.setdefault("seq_len", model.seq_len)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    try:
        return TrainConfig(model=model, **kwargs)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"train: {e}") from None


def cmd_datagen(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"datagen"}, "config")
    d = _require(cfg, "datagen", "config")
    _check_keys(
        d,
        {"seeds", "templates", "provider", "k_per_prompt", "task_id", "task_name", "output"},
        "datagen",
    )
    provider_cfg = d.get("provider", {"type": "mock"})
    _check_keys(provider_cfg, {"type", "endpoint", "model", "budget", "seed", "items_per_list"}, "datagen.provider")
    ptype = provider_cfg.get("type", "mock")
    budget = provider_cfg.get("budget", 1_000_000)
    if ptype == "mock":
        provider = datagen.MockProvider(
            budget=budget,
            seed=provider_cfg.get("seed", args.seed or 0),
            items_per_list=provider_cfg.get("items_per_list", 3),
        )
    elif ptype == "http":
        provider = datagen.HttpChatProvider(
            endpoint=_require(provider_cfg, "endpoint", "datagen.provider"),
            model=provider_cfg.get("model", "gpt-3.5-turbo"),
            budget=budget,
        )
    else:
        raise SchemaError(f"datagen.provider.type must be 'mock' or 'http', got {ptype!r}")

    manifest, records, rejects = datagen.run_pipeline(
        seeds=_require(d, "seeds", "datagen"),
        templates=_require(d, "templates", "datagen"),
        provider=provider,
        k_per_prompt=d.get("k_per_prompt", 3),
        task_id=d.get("task_id", 0),
        task_name=d.get("task_name", "generated"),
    )
    out_path = d.get("output") or os.path.join(args.out_dir, "generated.jsonl")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    dataset.save_jsonl(manifest, out_path)
    print(json.dumps({
        "output": out_path,
        "provider_calls": provider.calls,
        "rejects": len(rejects),
        "records": len(records),
        **dataset.manifest_summary(manifest),
    }, indent=2, sort_keys=True))
    return 0


def cmd_pack_stats(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"data", "pack"}, "config")
    train_m, _val = _build_data(_require(cfg, "data", "config"), args.seed)
    p = _require(cfg, "pack", "config")
    _check_keys(p, {"mode", "seq_len", "micro_batch"}, "pack")
    mode = p.get("mode", batching.PACK)
    if mode not in batching.MODES:
        raise SchemaError(f"pack.mode must be one of {batching.MODES}")
    seq_len = p.get("seq_len", 128)
    micro = p.get("micro_batch", 4)
    tokenized = [tokenize_sample(s) for s in train_m.samples]
    plan = batching.plan_for_mode(mode, tokenized, seq_len, micro)
    print(json.dumps(batching.stats_report(plan), indent=2, sort_keys=True))
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "window_fill.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["window", "width", "used", "segments"])
        w.writerows(batching.window_fill_rows(plan))
    return 0


def cmd_gradcheck(args) -> int:
    results = full_suite()
    failing = []
    for name in sorted(results):
        err = results[name]
        status = "PASS" if err < TOLERANCE else "FAIL"
        print(f"{name:28s} max_rel_err={err:.3e} {status}")
        if status == "FAIL":
            failing.append(name)
    if failing:
        print(f"FAILING: {', '.join(failing)}", file=sys.stderr)
        return 1
    return 0


def _parse_train_config(args) -> tuple[TrainConfig, dataset.DatasetManifest, dataset.DatasetManifest, dict]:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"model", "train", "data", "experiment"}, "config")
    model = _build_model_config(cfg.get("model", {}))
    train_cfg = _build_train_config(cfg.get("train", {}), model, args.seed)
    train_m, val_m = _build_data(_require(cfg, "data", "config"), args.seed)
    return train_cfg, train_m, val_m, cfg


def cmd_train(args) -> int:
    train_cfg, train_m, val_m, _cfg = _parse_train_config(args)
    result = train(train_cfg, train_m, val_m, run_dir=args.out_dir)
    print(json.dumps({
        "chosen_epoch": result.chosen_epoch,
        "stopped_early": result.stopped_early,
        "diverged": result.diverged,
        "epochs": len(result.epoch_reports),
        "val_total": result.epoch_reports[result.chosen_epoch].val_total,
        "accuracy": {str(k): v for k, v in result.accuracy.items()},
        "run_dir": args.out_dir,
    }, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"eval", "data"}, "config")
    e = _require(cfg, "eval", "config")
    _check_keys(e, {"checkpoint", "task", "max_samples", "split"}, "eval")
    _train_m, val_m = _build_data(_require(cfg, "data", "config"), args.seed)
    manifest = _train_m if e.get("split") == "train" else val_m
    model = load_model(_require(e, "checkpoint", "eval"))
    acc = evaluate(model, manifest, _require(e, "task", "eval"), e.get("max_samples"))
    print(json.dumps({"task": e["task"], "exact_match": acc}, indent=2, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    train_cfg, train_m, val_m, cfg = _parse_train_config(args)
    exp = cfg.get("experiment", {})
    _check_keys(exp, {"seeds", "eval_max_samples", "held_out"}, "experiment")
    if args.seeds is not None:
        seeds = [train_cfg.seed + i for i in range(args.seeds)]
    else:
        seeds = exp.get("seeds", [train_cfg.seed])
    held_out = None
    if exp.get("held_out"):
        h = exp["held_out"]
        _check_keys(h, {"kind", "count", "seed"}, "experiment.held_out")
        held_out = dataset.synth_tasks(
            [_require(h, "kind", "experiment.held_out")], [h.get("count", 100)], h.get("seed", 0)
        )
    spec = ExperimentSpec(
        base=train_cfg,
        seeds=seeds,
        eval_max_samples=exp.get("eval_max_samples", 100),
        held_out_manifest=held_out,
    )
    table = compare(spec, train_m, val_m, args.out_dir)
    print(json.dumps(table, indent=2, sort_keys=True, default=str))
    return 0


COMMANDS = {
    "datagen": cmd_datagen,
    "pack-stats": cmd_pack_stats,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mftune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default="runs/out", help="output directory")
        if name == "compare":
            p.add_argument("--seeds", type=int, default=None, help="number of seeds (base seed + i)")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    needs_config = args.command != "gradcheck"
    try:
        if needs_config and not args.config:
            raise SchemaError(f"{args.command} requires --config")
        return COMMANDS[args.command](args)
    except SchemaError as e:
        print(json.dumps({"error": str(e), "kind": "schema"}), file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure contract: structured stderr, exit 1
        print(json.dumps({"error": str(e), "kind": type(e).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
