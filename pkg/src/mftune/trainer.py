"""Training loop, early stopping, greedy evaluation, and the
single-task / mixed / multitask comparison harness.

One optimizer step consumes a full accumulation window of micro-batches and
computes the configured balancing loss once over everything in it, so the
per-task normalizations see the whole step.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import batching, tensor as T
from .dataset import DatasetManifest, InstructionSample
from .losses import FamoState, FocalParams, TaskBatchView, compute_loss, famo_update, famo_weights, loss_plain_ce
from .model import ModelConfig, TinyTransformer, save_model
from .tokenizer import BOT, EOS, ROLE_END, ROLE_START, TokenizedSample, decode, tokenize_sample

logger = logging.getLogger(__name__)

SFT_SINGLE = "sft_single"
SFT_MIXED = "sft_mixed"
MFT = "mft"
MODES = (SFT_SINGLE, SFT_MIXED, MFT)

EARLY_STOP_WINDOW = 2  # epochs that must both regress before stopping


class TrainError(ValueError):
    pass


@dataclass
class FamoParams:
    weight_lr: float = 0.025
    decay: float = 1e-3
    eps: float = 1e-8


@dataclass
class TrainConfig:
    mode: str = MFT
    task: int | None = None  # required for sft_single
    loss: str = "token_balanced"
    tokenization: str = batching.PACK
    seq_len: int = 128
    micro_batch: int = 4
    global_batch: int = 16
    lr_init: float = 2e-4
    lr_min: float = 1e-5
    schedule: str = "cosine"
    max_epochs: int = 10
    seed: int = 0
    famo: FamoParams = field(default_factory=FamoParams)
    focal: FocalParams = field(default_factory=FocalParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_max_samples: int | None = None  # cap greedy-decode accuracy passes

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainError(f"unknown mode {self.mode!r}")
        if self.mode == SFT_SINGLE and self.task is None:
            raise TrainError("sft_single requires a task id")
        if self.global_batch % self.micro_batch:
            raise TrainError(
                f"global_batch {self.global_batch} must be a multiple of micro_batch {self.micro_batch}"
            )
        if self.tokenization not in batching.MODES:
            raise TrainError(f"unknown tokenization mode {self.tokenization!r}")
        if self.schedule != "cosine":
            raise TrainError(f"unknown schedule {self.schedule!r}")
        if self.seq_len != self.model.seq_len:
            raise TrainError("train seq_len must match model seq_len")


@dataclass
class EpochReport:
    epoch: int
    train_loss: dict[int, float]  # per task, manifest order
    val_loss: dict[int, float]
    val_total: float
    lr: float
    famo_weights: dict[int, float] | None = None
    wall_time: float = 0.0


@dataclass
class RunResult:
    epoch_reports: list[EpochReport]
    chosen_epoch: int
    accuracy: dict[int, float]  # per-task exact match at the chosen checkpoint
    stopped_early: bool
    diverged: bool = False


def cosine_lr(progress: float, lr_init: float, lr_min: float) -> float:
    p = min(max(progress, 0.0), 1.0)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * p))


def early_stop_decision(val_history: list[float]) -> tuple[bool, int]:
    """Apply the stopping rule to a validation-loss history.

    Stop at epoch e once the two following epochs both exceed e's loss; the
    chosen checkpoint is e. If never triggered, choose the argmin epoch.
    Returns (stop_now, chosen_epoch_so_far).
    """
    n = len(val_history)
    if n >= EARLY_STOP_WINDOW + 1:
        e = n - 1 - EARLY_STOP_WINDOW
        base = val_history[e]
        if all(val_history[e + k] > base for k in range(1, EARLY_STOP_WINDOW + 1)):
            return True, e
    return False, int(np.argmin(val_history))


def filter_oversized(
    tokenized: list[TokenizedSample], seq_len: int
) -> tuple[list[TokenizedSample], list[int]]:
    """Drop samples longer than the window; never truncate."""
    kept, dropped = [], []
    for i, ts in enumerate(tokenized):
        if len(ts) <= seq_len:
            kept.append(ts)
        else:
            dropped.append(i)
    if dropped:
        logger.warning("dropped %d oversized samples (> %d tokens)", len(dropped), seq_len)
    return kept, dropped


def _epoch_order(samples: list[TokenizedSample], mode: str, seed: int, epoch: int) -> list[int]:
    """Seeded shuffle; multitask training then interleaves the per-task queues
    proportionally (largest remaining fraction first) so every accumulation
    window sees every task for as long as that task has samples left."""
    rng = np.random.default_rng([seed, epoch, 101])
    order = list(rng.permutation(len(samples)))
    if mode != MFT:
        return order
    queues: dict[int, list[int]] = {}
    for idx in order:
        queues.setdefault(samples[idx].task_id, []).append(idx)
    task_ids = sorted(queues)
    cursors = {tid: 0 for tid in task_ids}
    interleaved: list[int] = []
    for _ in range(len(order)):
        tid = max(
            (t for t in task_ids if cursors[t] < len(queues[t])),
            key=lambda t: (len(queues[t]) - cursors[t]) / len(queues[t]),
        )
        interleaved.append(queues[tid][cursors[tid]])
        cursors[tid] += 1
    return interleaved


def _window_logprob_vectors(
    model: TinyTransformer, window: batching.Window, samples: list[TokenizedSample]
) -> list[tuple[int, T.Tensor]]:
    """(task_id, per-token logprob tensor) per sample in the window.

    Labels at position k are predicted from logits at k-1; the window's valid
    positions are contiguous per segment, so the single masked gather is split
    by cumulative counts.
    """
    ids = window.ids
    t_len = ids.shape[0]
    logits = model.forward(ids)
    shifted = T.gather_rows(logits, np.arange(t_len - 1))
    targets = ids[1:]
    mask = window.loss_mask[1:].copy()
    lp_all = T.masked_token_logprobs(shifted, targets, mask)

    out = []
    offset = 0
    for sample_idx, start, end in window.segments:
        lo = max(start, 1) - 1
        hi = end - 1
        count = int(mask[lo:hi].sum())
        if count == 0:
            continue
        lp = T.gather_rows(lp_all, np.arange(offset, offset + count))
        out.append((samples[sample_idx].task_id, lp))
        offset += count
    return out


def _step_loss(config: TrainConfig, entries: list[tuple[int, T.Tensor]], weights) -> T.Tensor:
    per_task: dict[int, list[T.Tensor]] = {}
    for tid, lp in entries:
        per_task.setdefault(tid, []).append(lp)
    view = TaskBatchView(per_task)
    if config.mode in (SFT_SINGLE, SFT_MIXED):
        return loss_plain_ce(view)
    return compute_loss(config.loss, view, focal=config.focal, famo_task_weights=weights)


def validate(model: TinyTransformer, tokenized_val: list[TokenizedSample], task_ids: list[int]) -> dict[int, float]:
    """Per-task mean CE over valid tokens, computed sample by sample."""
    neg_sum = {tid: 0.0 for tid in task_ids}
    tokens = {tid: 0 for tid in task_ids}
    for ts in tokenized_val:
        logits = model.forward(ts.ids)
        shifted = T.gather_rows(logits, np.arange(len(ts) - 1))
        lp = T.masked_token_logprobs(shifted, ts.ids[1:], ts.loss_mask[1:])
        neg_sum[ts.task_id] -= float(lp.data.sum())
        tokens[ts.task_id] += lp.data.shape[0]
    return {tid: neg_sum[tid] / tokens[tid] for tid in task_ids if tokens[tid]}


def train(
    config: TrainConfig,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    run_dir: str | None = None,
) -> RunResult:
    if not train_manifest.samples or not val_manifest.samples:
        raise TrainError("manifests must be non-empty")

    if config.mode == SFT_SINGLE:
        train_manifest = _restrict(train_manifest, config.task)
        val_manifest = _restrict(val_manifest, config.task)

    task_ids = train_manifest.task_ids()
    train_tok, _ = filter_oversized([tokenize_sample(s) for s in train_manifest.samples], config.seq_len)
    val_tok, _ = filter_oversized([tokenize_sample(s) for s in val_manifest.samples], config.seq_len)
    if not train_tok or not val_tok:
        raise TrainError("no samples fit the sequence length")

    model = TinyTransformer(config.model, seed=config.seed)
    adam = T.AdamState()
    famo_state = FamoState(
        task_ids=tuple(task_ids),
        weight_lr=config.famo.weight_lr,
        decay=config.famo.decay,
        eps=config.famo.eps,
    )
    use_famo = config.mode == MFT and config.loss == "famo"

    if run_dir:
        os.makedirs(run_dir, exist_ok=True)

    reports: list[EpochReport] = []
    param_history: list[dict[str, np.ndarray]] = []
    prev_val: dict[int, float] | None = None
    stopped_early = False
    diverged = False
    chosen = 0
    micro_per_step = config.global_batch // config.micro_batch

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        weights = famo_weights(famo_state) if use_famo else None
        order = _epoch_order(train_tok, config.mode, config.seed, epoch)
        epoch_samples = [train_tok[i] for i in order]
        plan = batching.plan_for_mode(config.tokenization, epoch_samples, config.seq_len, config.micro_batch)
        assert plan.sample_refs() == {i: 1 for i in range(len(epoch_samples))}, "epoch must cover each sample once"

        micro = list(plan.micro_batches(config.micro_batch))
        n_steps = max(1, math.ceil(len(micro) / micro_per_step))
        train_neg = {tid: 0.0 for tid in task_ids}
        train_tokens = {tid: 0 for tid in task_ids}
        lr = cosine_lr(epoch / config.max_epochs, config.lr_init, config.lr_min)

        for step in range(n_steps):
            lr = cosine_lr((epoch + step / n_steps) / config.max_epochs, config.lr_init, config.lr_min)
            entries: list[tuple[int, T.Tensor]] = []
            for mb in micro[step * micro_per_step : (step + 1) * micro_per_step]:
                for window in mb:
                    entries.extend(_window_logprob_vectors(model, window, epoch_samples))
            if not entries:
                continue
            loss = _step_loss(config, entries, weights)
            if not np.isfinite(loss.data):
                diverged = True
                break
            model.zero_grad()
            loss.backward()
            for tid, lp in entries:
                train_neg[tid] -= float(lp.data.sum())
                train_tokens[tid] += lp.data.shape[0]
            params = model.trainable()
            try:
                T.adam_step(params, {n: p.grad for n, p in params.items()}, adam, lr)
            except FloatingPointError as e:
                logger.warning("aborting run: %s", e)
                diverged = True
                break
        if diverged:
            logger.warning("non-finite loss at epoch %d; aborting with last good checkpoint", epoch)
            break

        val_loss = validate(model, val_tok, task_ids)
        val_total = sum(val_loss.values()) / len(val_loss)
        report = EpochReport(
            epoch=epoch,
            train_loss={tid: (train_neg[tid] / train_tokens[tid]) if train_tokens[tid] else float("nan") for tid in task_ids},
            val_loss=val_loss,
            val_total=val_total,
            lr=lr,
            famo_weights=dict(weights) if weights is not None else None,
            wall_time=time.perf_counter() - t0,
        )
        reports.append(report)
        param_history.append(model.state_arrays())
        if run_dir:
            save_model(model, os.path.join(run_dir, f"checkpoint_epoch{epoch}.bin"))

        if use_famo:
            if prev_val is not None:
                famo_state = famo_update(famo_state, prev_val, val_loss)
            prev_val = val_loss

        stop, chosen = early_stop_decision([r.val_total for r in reports])
        if stop:
            stopped_early = True
            break

    if not reports:
        raise TrainError("training produced no epochs")

    model.load_state_arrays(param_history[chosen])
    if run_dir:
        save_model(model, os.path.join(run_dir, "checkpoint_chosen.bin"))
        _write_run_files(run_dir, config, reports, chosen, task_ids)

    accuracy = {
        tid: evaluate(model, val_manifest, tid, config.eval_max_samples) for tid in task_ids
    }
    result = RunResult(
        epoch_reports=reports,
        chosen_epoch=chosen,
        accuracy=accuracy,
        stopped_early=stopped_early,
        diverged=diverged,
    )
    if run_dir:
        _write_report_md(run_dir, train_manifest, result)
    return result


def _restrict(manifest: DatasetManifest, task_id: int) -> DatasetManifest:
    tasks = [t for t in manifest.tasks if t.task_id == task_id]
    if not tasks:
        raise TrainError(f"task {task_id} not in manifest")
    return DatasetManifest(
        tasks=tasks,
        samples=[s for s in manifest.samples if s.task_id == task_id],
        split_seed=manifest.split_seed,
        val_fraction=manifest.val_fraction,
    )


def prompt_ids(sample: InstructionSample) -> tuple[np.ndarray, str]:
    """Token ids up to and including the final bot header, plus the reference."""
    ts = tokenize_sample(sample)
    # final bot turn starts at the last ROLE_START/BOT/ROLE_END triple
    ids = ts.ids
    starts = np.flatnonzero((ids[:-2] == ROLE_START) & (ids[1:-1] == BOT) & (ids[2:] == ROLE_END))
    cut = int(starts[-1]) + 3
    return ids[:cut], sample.turns[-1].content


def greedy_generate(model: TinyTransformer, prefix: np.ndarray, max_total: int) -> list[int]:
    ids = list(prefix)
    out: list[int] = []
    while len(ids) < max_total:
        logits = model.forward(np.asarray(ids, dtype=np.int64))
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == EOS:
            break
        out.append(nxt)
        ids.append(nxt)
    return out


def evaluate(
    model: TinyTransformer,
    manifest: DatasetManifest,
    task_id: int,
    max_samples: int | None = None,
) -> float:
    """Exact-match accuracy of greedy decoding against reference bot content."""
    samples = manifest.samples_for(task_id)
    if max_samples is not None:
        samples = samples[:max_samples]
    if not samples:
        return 0.0
    hits = 0
    for s in samples:
        prefix, reference = prompt_ids(s)
        if prefix.shape[0] >= model.config.seq_len:
            continue
        generated = greedy_generate(model, prefix, model.config.seq_len)
        if decode(generated) == reference:
            hits += 1
    return hits / len(samples)


# --- run directory artifacts ------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def _write_run_files(run_dir, config, reports, chosen, task_ids):
    with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(_config_to_dict(config), f, indent=2, sort_keys=True)
        f.write("\n")
    # wall times go to a separate file so epochs.csv is byte-stable across runs
    with open(os.path.join(run_dir, "epochs.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        cols = ["epoch", "lr"]
        cols += [f"train_ce_task{tid}" for tid in task_ids]
        cols += [f"val_ce_task{tid}" for tid in task_ids]
        cols += ["val_total", "chosen"]
        w.writerow(cols)
        for r in reports:
            row = [r.epoch, _fmt(r.lr)]
            row += [_fmt(r.train_loss[tid]) for tid in task_ids]
            row += [_fmt(r.val_loss[tid]) for tid in task_ids]
            row += [_fmt(r.val_total), int(r.epoch == chosen)]
            w.writerow(row)
    with open(os.path.join(run_dir, "timings.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "wall_time_s"])
        for r in reports:
            w.writerow([r.epoch, f"{r.wall_time:.3f}"])
    if any(r.famo_weights for r in reports):
        with open(os.path.join(run_dir, "weights.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["epoch"] + [f"w_task{tid}" for tid in task_ids])
            for r in reports:
                if r.famo_weights:
                    w.writerow([r.epoch] + [_fmt(r.famo_weights[tid]) for tid in task_ids])


def _write_report_md(run_dir, manifest, result: RunResult):
    lines = ["# Run report", ""]
    lines.append(f"- chosen epoch: {result.chosen_epoch}")
    lines.append(f"- early stop triggered: {result.stopped_early}")
    lines.append(f"- diverged: {result.diverged}")
    lines.append("")
    lines.append("| task | val CE (chosen) | exact match |")
    lines.append("|---|---|---|")
    chosen = result.epoch_reports[result.chosen_epoch]
    for t in manifest.tasks:
        lines.append(
            f"| {t.name} ({t.task_id}) | {_fmt(chosen.val_loss[t.task_id])} | {_fmt(result.accuracy[t.task_id])} |"
        )
    with open(os.path.join(run_dir, "report.md"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _config_to_dict(config: TrainConfig) -> dict:
    return {
        "mode": config.mode,
        "task": config.task,
        "loss": config.loss,
        "tokenization": config.tokenization,
        "seq_len": config.seq_len,
        "micro_batch": config.micro_batch,
        "global_batch": config.global_batch,
        "lr_init": config.lr_init,
        "lr_min": config.lr_min,
        "schedule": config.schedule,
        "max_epochs": config.max_epochs,
        "seed": config.seed,
        "famo": {"weight_lr": config.famo.weight_lr, "decay": config.famo.decay, "eps": config.famo.eps},
        "focal": {"alpha": config.focal.alpha, "gamma": config.focal.gamma, "prob_floor": config.focal.prob_floor},
        "eval_max_samples": config.eval_max_samples,
        "model": config.model.to_dict(),
        "blas_threads": os.environ.get("OPENBLAS_NUM_THREADS") or os.environ.get("OMP_NUM_THREADS") or "default",
    }


# --- experiment harness -----------------------------------------------------


@dataclass
class ExperimentSpec:
    base: TrainConfig
    seeds: list[int]
    eval_max_samples: int | None = 100
    held_out_manifest: DatasetManifest | None = None


@dataclass
class ArmResult:
    arm: str
    seed: int
    result: RunResult
    val_ce: dict[int, float]  # per task at chosen epoch
    held_out_accuracy: float | None = None


def _arm_configs(base: TrainConfig, manifest: DatasetManifest, seed: int) -> list[tuple[str, TrainConfig]]:
    arms: list[tuple[str, TrainConfig]] = []
    for t in manifest.tasks:
        arms.append(
            (f"sft_single[{t.name}]", replace(base, mode=SFT_SINGLE, task=t.task_id, seed=seed))
        )
    arms.append(("sft_mixed", replace(base, mode=SFT_MIXED, task=None, seed=seed)))
    arms.append(("mft", replace(base, mode=MFT, task=None, seed=seed)))
    return arms


def compare(
    spec: ExperimentSpec,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    out_dir: str,
) -> dict:
    """Run every arm for every seed and emit the comparison report."""
    os.makedirs(out_dir, exist_ok=True)
    budget = (spec.base.seq_len, spec.base.max_epochs, spec.base.global_batch)
    results: list[ArmResult] = []
    for seed in spec.seeds:
        for arm_name, cfg in _arm_configs(spec.base, train_manifest, seed):
            if (cfg.seq_len, cfg.max_epochs, cfg.global_batch) != budget:
                raise TrainError(f"budget mismatch in arm {arm_name}")
            run_dir = os.path.join(out_dir, f"{arm_name}_seed{seed}".replace("[", "_").replace("]", ""))
            result = train(cfg, train_manifest, val_manifest, run_dir=run_dir)
            chosen = result.epoch_reports[result.chosen_epoch]
            held_out = None
            if spec.held_out_manifest is not None and cfg.mode in (SFT_MIXED, MFT):
                model = _load_chosen(run_dir)
                held_tid = spec.held_out_manifest.tasks[0].task_id
                held_out = evaluate(model, spec.held_out_manifest, held_tid, spec.eval_max_samples)
            results.append(
                ArmResult(arm=arm_name, seed=seed, result=result, val_ce=dict(chosen.val_loss), held_out_accuracy=held_out)
            )
    table = _comparison_table(spec, train_manifest, results)
    _write_compare_report(out_dir, train_manifest, spec, results, table)
    return table


def _load_chosen(run_dir: str) -> TinyTransformer:
    from .model import load_model

    return load_model(os.path.join(run_dir, "checkpoint_chosen.bin"))


def _comparison_table(spec, manifest, results: list[ArmResult]) -> dict:
    counts = manifest.counts()
    smallest_task = min(counts, key=lambda tid: (counts[tid], tid))
    arms = sorted({r.arm for r in results})
    table: dict = {"arms": {}, "smallest_task": smallest_task, "seeds": spec.seeds}
    for arm in arms:
        rows = [r for r in results if r.arm == arm]
        per_task_ce = {}
        per_task_acc = {}
        for t in manifest.tasks:
            ces = [r.val_ce[t.task_id] for r in rows if t.task_id in r.val_ce]
            accs = [r.result.accuracy[t.task_id] for r in rows if t.task_id in r.result.accuracy]
            if ces:
                per_task_ce[t.task_id] = statistics.median(ces)
            if accs:
                per_task_acc[t.task_id] = statistics.median(accs)
        held = [r.held_out_accuracy for r in rows if r.held_out_accuracy is not None]
        table["arms"][arm] = {
            "median_val_ce": per_task_ce,
            "median_accuracy": per_task_acc,
            "median_held_out_accuracy": statistics.median(held) if held else None,
            "stopped_early": [r.result.stopped_early for r in rows],
            "chosen_epochs": [r.result.chosen_epoch for r in rows],
        }
        if smallest_task in per_task_ce:
            table["arms"][arm]["smallest_task_val_ce"] = per_task_ce[smallest_task]
    return table


def _write_compare_report(out_dir, manifest, spec, results, table):
    name_of = {t.task_id: t.name for t in manifest.tasks}
    lines = ["# Comparison report", ""]
    lines.append(f"- seeds: {spec.seeds}")
    lines.append(f"- smallest task: {name_of[table['smallest_task']]} ({table['smallest_task']})")
    lines.append("")
    lines.append("## Median validation CE per task")
    lines.append("")
    header = "| arm | " + " | ".join(name_of[t.task_id] for t in manifest.tasks) + " |"
    lines.append(header)
    lines.append("|" + "---|" * (len(manifest.tasks) + 1))
    for arm, info in table["arms"].items():
        cells = [
            _fmt(info["median_val_ce"][t.task_id]) if t.task_id in info["median_val_ce"] else "-"
            for t in manifest.tasks
        ]
        lines.append(f"| {arm} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("## Median exact-match accuracy per task")
    lines.append("")
    lines.append(header)
    lines.append("|" + "---|" * (len(manifest.tasks) + 1))
    for arm, info in table["arms"].items():
        cells = [
            _fmt(info["median_accuracy"][t.task_id]) if t.task_id in info["median_accuracy"] else "-"
            for t in manifest.tasks
        ]
        lines.append(f"| {arm} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("## Unseen-task probe (exact match on held-out task)")
    lines.append("")
    lines.append("| arm | held-out accuracy |")
    lines.append("|---|---|")
    for arm, info in table["arms"].items():
        if info["median_held_out_accuracy"] is not None:
            lines.append(f"| {arm} | {_fmt(info['median_held_out_accuracy'])} |")
    lines.append("")
    lines.append("## Early stopping")
    lines.append("")
    lines.append("| arm | stopped early per seed | chosen epochs |")
    lines.append("|---|---|---|")
    for arm, info in table["arms"].items():
        lines.append(f"| {arm} | {info['stopped_early']} | {info['chosen_epochs']} |")
    with open(os.path.join(out_dir, "report.md"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "comparison.json"), "w", encoding="utf-8") as f:
        json.dump(table, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
