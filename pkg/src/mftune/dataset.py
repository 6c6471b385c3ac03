"""Multi-task instruction datasets: JSONL ingestion, ChatML rendering, splits,
and deterministic synthetic task generators.

Wire format is one JSON object per line:
    {"task": int, "turns": [{"role": "human|bot|system", "content": str}]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

MARK_START = "<|role_start|>"
MARK_END = "<|role_end|>"


class Role(str, Enum):
    SYSTEM = "system"
    HUMAN = "human"
    BOT = "bot"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ChatTurn:
    role: Role
    content: str


@dataclass(frozen=True)
class InstructionSample:
    task_id: int
    turns: tuple[ChatTurn, ...]


@dataclass
class TaskSpec:
    task_id: int
    name: str
    desired_ability: str = ""


@dataclass
class DatasetManifest:
    tasks: list[TaskSpec]
    samples: list[InstructionSample]
    split_seed: int = 0
    val_fraction: float = 0.1

    def task_ids(self) -> list[int]:
        return [t.task_id for t in self.tasks]

    def samples_for(self, task_id: int) -> list[InstructionSample]:
        return [s for s in self.samples if s.task_id == task_id]

    def counts(self) -> dict[int, int]:
        c = {t.task_id: 0 for t in self.tasks}
        for s in self.samples:
            c[s.task_id] += 1
        return c


def validate_sample(sample: InstructionSample, where: str = "sample", allow_empty_bot: bool = False) -> None:
    if not sample.turns:
        raise DatasetError(f"{where}: no turns")
    for turn in sample.turns:
        if not isinstance(turn.role, Role):
            raise DatasetError(f"{where}: unknown role {turn.role!r}")
        if turn.content == "" and turn.role is not Role.SYSTEM:
            if not (allow_empty_bot and turn.role is Role.BOT):
                raise DatasetError(f"{where}: empty content only allowed for system turns")
    if sample.turns[-1].role is not Role.BOT:
        raise DatasetError(f"{where}: sample must end with a bot turn")
    if not any(t.role is Role.HUMAN for t in sample.turns[:-1]):
        raise DatasetError(f"{where}: no human turn before the final bot turn")


def validate_manifest(manifest: DatasetManifest) -> None:
    ids = manifest.task_ids()
    if len(ids) != len(set(ids)):
        raise DatasetError("duplicate task ids in manifest")
    for t in manifest.tasks:
        if not t.name:
            raise DatasetError(f"task {t.task_id} has an empty name")
    known = set(ids)
    for i, s in enumerate(manifest.samples):
        if s.task_id not in known:
            raise DatasetError(f"sample {i}: unresolved task id {s.task_id}")
        validate_sample(s, where=f"sample {i}")


def render_chatml(sample: InstructionSample) -> str:
    """`<|role_start|>ROLE<|role_end|>CONTENT` per turn, concatenated."""
    return "".join(f"{MARK_START}{t.role.value}{MARK_END}{t.content}" for t in sample.turns)


def parse_chatml(text: str, task_id: int = 0) -> InstructionSample:
    """Reference parser for render_chatml output (marker-free contents only)."""
    if not text.startswith(MARK_START):
        raise DatasetError("chatml text must start with a role marker")
    turns = []
    for chunk in text.split(MARK_START)[1:]:
        name, sep, content = chunk.partition(MARK_END)
        if not sep:
            raise DatasetError("unterminated role marker")
        try:
            role = Role(name)
        except ValueError:
            raise DatasetError(f"unknown role {name!r}") from None
        turns.append(ChatTurn(role=role, content=content))
    return InstructionSample(task_id=task_id, turns=tuple(turns))


def _sample_to_obj(sample: InstructionSample) -> dict:
    return {
        "task": sample.task_id,
        "turns": [{"role": t.role.value, "content": t.content} for t in sample.turns],
    }


def _sample_from_obj(obj: dict, where: str) -> InstructionSample:
    if not isinstance(obj, dict) or "task" not in obj or "turns" not in obj:
        raise DatasetError(f"{where}: expected object with 'task' and 'turns'")
    task = obj["task"]
    if not isinstance(task, int) or isinstance(task, bool):
        raise DatasetError(f"{where}: 'task' must be an integer")
    turns = []
    for t in obj["turns"]:
        if not isinstance(t, dict) or "role" not in t or "content" not in t:
            raise DatasetError(f"{where}: turn must have 'role' and 'content'")
        try:
            role = Role(t["role"])
        except ValueError:
            raise DatasetError(f"{where}: unknown role {t['role']!r}") from None
        if not isinstance(t["content"], str):
            raise DatasetError(f"{where}: content must be a string")
        turns.append(ChatTurn(role=role, content=t["content"]))
    sample = InstructionSample(task_id=task, turns=tuple(turns))
    validate_sample(sample, where=where)
    return sample


def load_jsonl(path: str) -> DatasetManifest:
    """Parse and validate a JSONL dataset; task specs are derived from the data."""
    samples: list[InstructionSample] = []
    seen_tasks: dict[int, TaskSpec] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{where}: malformed JSON ({e.msg})") from None
            sample = _sample_from_obj(obj, where)
            if sample.task_id not in seen_tasks:
                seen_tasks[sample.task_id] = TaskSpec(task_id=sample.task_id, name=f"task-{sample.task_id}")
            samples.append(sample)
    if not samples:
        raise DatasetError(f"{path}: no samples")
    tasks = [seen_tasks[tid] for tid in sorted(seen_tasks)]
    manifest = DatasetManifest(tasks=tasks, samples=samples)
    validate_manifest(manifest)
    return manifest


def save_jsonl(manifest: DatasetManifest, path: str) -> None:
    """Canonical serialization: fixed key order, compact separators."""
    with open(path, "w", encoding="utf-8") as f:
        for s in manifest.samples:
            f.write(json.dumps(_sample_to_obj(s), ensure_ascii=False, separators=(",", ":")) + "\n")


def manifest_summary(manifest: DatasetManifest) -> dict:
    counts = manifest.counts()
    return {
        "n_tasks": len(manifest.tasks),
        "n_samples": len(manifest.samples),
        "tasks": [
            {"task_id": t.task_id, "name": t.name, "n_samples": counts[t.task_id]}
            for t in manifest.tasks
        ],
    }


def split(
    manifest: DatasetManifest, val_fraction: float, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Stratified per-task split; floor(fraction * M) to validation, at least 1 each side."""
    if not 0 < val_fraction < 1:
        raise DatasetError(f"val_fraction must be in (0,1), got {val_fraction}")
    counts = manifest.counts()
    for t in manifest.tasks:
        if counts[t.task_id] < 2:
            raise DatasetError(f"task {t.task_id} has {counts[t.task_id]} sample(s); need >= 2 to split")

    rng = np.random.default_rng(seed)
    val_idx: set[int] = set()
    by_task: dict[int, list[int]] = {t.task_id: [] for t in manifest.tasks}
    for i, s in enumerate(manifest.samples):
        by_task[s.task_id].append(i)
    for tid in sorted(by_task):
        idx = by_task[tid]
        n_val = min(max(1, int(len(idx) * val_fraction)), len(idx) - 1)
        perm = rng.permutation(len(idx))
        val_idx.update(idx[p] for p in perm[:n_val])

    train_samples = [s for i, s in enumerate(manifest.samples) if i not in val_idx]
    val_samples = [s for i, s in enumerate(manifest.samples) if i in val_idx]
    tasks = [TaskSpec(t.task_id, t.name, t.desired_ability) for t in manifest.tasks]

    def mk(samples):
        return DatasetManifest(tasks=tasks, samples=samples, split_seed=seed, val_fraction=val_fraction)

    return mk(train_samples), mk(val_samples)


# --- synthetic tasks -------------------------------------------------------
#
# Generators are pure in (kind, index, seed): each sample draws from its own
# generator seeded by that triple, so counts can change without reshuffling
# existing samples. held_out_dedup exists only for the unseen-task probe and
# is excluded from training manifests by the harness.

_LETTERS = "abcdefghijklmnopqrstuvwxyz"

SYNTH_KINDS = ("copy", "reverse", "uppercase", "add2digit", "sort_digits", "held_out_dedup")
HELD_OUT_KIND = "held_out_dedup"

_ABILITIES = {
    "copy": "verbatim repetition",
    "reverse": "string reversal",
    "uppercase": "case transformation",
    "add2digit": "two-digit addition",
    "sort_digits": "digit sorting",
    "held_out_dedup": "character deduplication (held out)",
}


# payload lengths are fixed per kind so a sample's label sits at a stable
# offset from the window start; a positionally-addressed solution is then
# within reach of a tiny model

_PAYLOAD_LEN = 6


def _gen_copy(rng) -> tuple[str, str]:
    s = "".join(rng.choice(list(_LETTERS), size=_PAYLOAD_LEN))
    return s, s


def _gen_reverse(rng) -> tuple[str, str]:
    s = "".join(rng.choice(list(_LETTERS), size=_PAYLOAD_LEN))
    return f"reverse: {s}", s[::-1]


def _gen_uppercase(rng) -> tuple[str, str]:
    s = "".join(rng.choice(list(_LETTERS), size=_PAYLOAD_LEN))
    return f"upper: {s}", s.upper()


def _gen_add2digit(rng) -> tuple[str, str]:
    a = int(rng.integers(10, 100))
    b = int(rng.integers(10, 100))
    return f"{a}+{b}=", str(a + b)


def _gen_sort_digits(rng) -> tuple[str, str]:
    digits = rng.integers(0, 10, size=_PAYLOAD_LEN)
    s = "".join(str(d) for d in digits)
    return f"sort: {s}", "".join(sorted(s))


def _gen_dedup(rng) -> tuple[str, str]:
    s = "".join(rng.choice(list("abcde"), size=8))
    out = "".join(dict.fromkeys(s))
    return f"dedup: {s}", out


_GENERATORS = {
    "copy": _gen_copy,
    "reverse": _gen_reverse,
    "uppercase": _gen_uppercase,
    "add2digit": _gen_add2digit,
    "sort_digits": _gen_sort_digits,
    "held_out_dedup": _gen_dedup,
}


def synth_sample(kind: str, index: int, seed: int, task_id: int) -> InstructionSample:
    if kind not in _GENERATORS:
        raise DatasetError(f"unknown synthetic task kind {kind!r}")
    rng = np.random.default_rng([seed, SYNTH_KINDS.index(kind), index])
    human, bot = _GENERATORS[kind](rng)
    return InstructionSample(
        task_id=task_id,
        turns=(ChatTurn(Role.HUMAN, human), ChatTurn(Role.BOT, bot)),
    )


def synth_tasks(kinds: list[str], counts: list[int], seed: int) -> DatasetManifest:
    if len(kinds) != len(counts):
        raise DatasetError("kinds and counts must have equal length")
    for kind in kinds:
        if kind not in _GENERATORS:
            raise DatasetError(f"unknown synthetic task kind {kind!r}")
    if any(c <= 0 for c in counts):
        raise DatasetError("counts must be positive")
    tasks = [
        TaskSpec(task_id=i, name=kind, desired_ability=_ABILITIES[kind])
        for i, kind in enumerate(kinds)
    ]
    samples = [
        synth_sample(kind, j, seed, task_id=i)
        for i, (kind, count) in enumerate(zip(kinds, counts))
        for j in range(count)
    ]
    manifest = DatasetManifest(tasks=tasks, samples=samples)
    validate_manifest(manifest)
    return manifest
