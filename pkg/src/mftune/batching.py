"""Batch organization modes and their padding statistics.

Three modes:
  normal  - one sample per window, right-padded to seq_len
  dynamic - consecutive groups of micro_bs samples, each group padded to its own max
  pack    - greedy first-fit concatenation of whole samples into seq_len windows

All modes preserve input order and place every sample in exactly one segment.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .tokenizer import PAD, TokenizedSample

NORMAL = "normal"
DYNAMIC = "dynamic"
PACK = "pack"
MODES = (NORMAL, DYNAMIC, PACK)


class BatchingError(ValueError):
    pass


@dataclass
class Window:
    ids: np.ndarray
    loss_mask: np.ndarray
    segments: list[tuple[int, int, int]] = field(default_factory=list)  # (sample_idx, start, end)

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def pad_slots(self) -> int:
        return int((self.ids == PAD).sum())


@dataclass
class BatchPlan:
    mode: str
    windows: list[Window]
    seq_len: int | None = None
    micro_batch_size: int | None = None

    def sample_refs(self) -> Counter:
        return Counter(seg[0] for w in self.windows for seg in w.segments)

    def micro_batches(self, micro_bs: int | None = None):
        """Consecutive chunks of windows; pack plans take the size from the caller."""
        size = micro_bs if micro_bs is not None else self.micro_batch_size
        if size is None or size < 1:
            raise BatchingError("micro batch size required")
        for i in range(0, len(self.windows), size):
            yield self.windows[i : i + size]


@dataclass
class PackStats:
    total_slots: int
    padding_slots: int

    @property
    def ratio(self) -> float:
        return self.padding_slots / self.total_slots if self.total_slots else 0.0


def _padded_window(sample_idx: int, sample: TokenizedSample, width: int) -> Window:
    n = len(sample)
    ids = np.full(width, PAD, dtype=np.int64)
    mask = np.zeros(width, dtype=np.int64)
    ids[:n] = sample.ids
    mask[:n] = sample.loss_mask
    return Window(ids=ids, loss_mask=mask, segments=[(sample_idx, 0, n)])


def plan_normal(samples: list[TokenizedSample], seq_len: int, micro_bs: int) -> BatchPlan:
    for i, s in enumerate(samples):
        if len(s) > seq_len:
            raise BatchingError(f"sample {i} has {len(s)} tokens > seq_len {seq_len}")
    windows = [_padded_window(i, s, seq_len) for i, s in enumerate(samples)]
    return BatchPlan(mode=NORMAL, windows=windows, seq_len=seq_len, micro_batch_size=micro_bs)


def plan_dynamic(samples: list[TokenizedSample], micro_bs: int) -> BatchPlan:
    if micro_bs < 1:
        raise BatchingError("micro_bs must be >= 1")
    windows: list[Window] = []
    for g in range(0, len(samples), micro_bs):
        group = samples[g : g + micro_bs]
        width = max(len(s) for s in group)
        windows.extend(_padded_window(g + j, s, width) for j, s in enumerate(group))
    return BatchPlan(mode=DYNAMIC, windows=windows, seq_len=None, micro_batch_size=micro_bs)


def plan_pack(samples: list[TokenizedSample], seq_len: int) -> BatchPlan:
    """Greedy first-fit in input order; a sample that does not fit the remaining
    space closes the current window (padding fills the rest) and opens the next.
    Samples already end in EOS (tokenizer contract), which acts as the separator."""
    windows: list[Window] = []
    cur_ids: list[np.ndarray] = []
    cur_mask: list[np.ndarray] = []
    cur_segments: list[tuple[int, int, int]] = []
    cur_len = 0

    def flush():
        nonlocal cur_ids, cur_mask, cur_segments, cur_len
        if not cur_segments:
            return
        ids = np.full(seq_len, PAD, dtype=np.int64)
        mask = np.zeros(seq_len, dtype=np.int64)
        body_ids = np.concatenate(cur_ids)
        ids[: body_ids.shape[0]] = body_ids
        mask[: body_ids.shape[0]] = np.concatenate(cur_mask)
        windows.append(Window(ids=ids, loss_mask=mask, segments=cur_segments))
        cur_ids, cur_mask, cur_segments, cur_len = [], [], [], 0

    for i, s in enumerate(samples):
        n = len(s)
        if n > seq_len:
            raise BatchingError(f"sample {i} has {n} tokens > seq_len {seq_len}")
        if cur_len + n > seq_len:
            flush()
        cur_segments.append((i, cur_len, cur_len + n))
        cur_ids.append(s.ids)
        cur_mask.append(s.loss_mask)
        cur_len += n
    flush()
    return BatchPlan(mode=PACK, windows=windows, seq_len=seq_len, micro_batch_size=None)


def plan_for_mode(mode: str, samples: list[TokenizedSample], seq_len: int, micro_bs: int) -> BatchPlan:
    if mode == NORMAL:
        return plan_normal(samples, seq_len, micro_bs)
    if mode == DYNAMIC:
        return plan_dynamic(samples, micro_bs)
    if mode == PACK:
        return plan_pack(samples, seq_len)
    raise BatchingError(f"unknown batching mode {mode!r}")


def padding_ratio(plan: BatchPlan) -> PackStats:
    total = sum(len(w) for w in plan.windows)
    padding = sum(w.pad_slots for w in plan.windows)
    return PackStats(total_slots=total, padding_slots=padding)


def stats_report(plan: BatchPlan) -> dict:
    stats = padding_ratio(plan)
    return {
        "mode": plan.mode,
        "seq_len": plan.seq_len,
        "windows": len(plan.windows),
        "total_slots": stats.total_slots,
        "padding_slots": stats.padding_slots,
        "ratio": round(stats.ratio, 4),
    }


def window_fill_rows(plan: BatchPlan) -> list[tuple[int, int, int, int]]:
    """(window index, width, used slots, segment count) per window, CSV-ready."""
    rows = []
    for i, w in enumerate(plan.windows):
        rows.append((i, len(w), len(w) - w.pad_slots, len(w.segments)))
    return rows
