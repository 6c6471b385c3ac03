"""Byte-level tokenizer with chat specials and loss-mask construction.

Ids 0-255 are raw UTF-8 bytes; specials sit above. Role markers inside turn
content are byte-encoded (escaped), never turned into specials, so a sample's
loss mask cannot be corrupted by content that mimics the chat format.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass

import numpy as np

from .dataset import InstructionSample, Role, validate_sample

logger = logging.getLogger(__name__)

PAD = 256
EOS = 257
ROLE_START = 258
ROLE_END = 259
HUMAN = 260
BOT = 261
SYSTEM = 262
VOCAB_SIZE = 263

MARK_START = "<|role_start|>"
MARK_END = "<|role_end|>"

ROLE_TO_TOKEN = {Role.HUMAN: HUMAN, Role.BOT: BOT, Role.SYSTEM: SYSTEM}
_SPECIAL_TEXT = {
    ROLE_START: MARK_START,
    ROLE_END: MARK_END,
    HUMAN: "human",
    BOT: "bot",
    SYSTEM: "system",
}

_MARKER_RE = re.compile(re.escape(MARK_START) + "(human|bot|system)" + re.escape(MARK_END))
_NAME_TO_ROLE_TOKEN = {"human": HUMAN, "bot": BOT, "system": SYSTEM}


def byte_encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def encode(text: str) -> list[int]:
    """Map role-marker sequences to specials, everything else to bytes."""
    ids: list[int] = []
    pos = 0
    for m in _MARKER_RE.finditer(text):
        ids.extend(byte_encode(text[pos : m.start()]))
        ids.extend((ROLE_START, _NAME_TO_ROLE_TOKEN[m.group(1)], ROLE_END))
        pos = m.end()
    ids.extend(byte_encode(text[pos:]))
    return ids


def decode(ids) -> str:
    """Inverse of encode for marker-free content; PAD/EOS render as nothing."""
    parts: list[str] = []
    buf = bytearray()
    for i in ids:
        i = int(i)
        if i < 256:
            buf.append(i)
            continue
        if buf:
            parts.append(buf.decode("utf-8", errors="replace"))
            buf = bytearray()
        if i in _SPECIAL_TEXT:
            parts.append(_SPECIAL_TEXT[i])
        elif i not in (PAD, EOS):
            raise ValueError(f"decode: unknown token id {i}")
    if buf:
        parts.append(buf.decode("utf-8", errors="replace"))
    return "".join(parts)


@dataclass
class TokenizedSample:
    ids: np.ndarray
    loss_mask: np.ndarray
    task_id: int

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def valid_tokens(self) -> int:
        """Number of label positions (the T count of this sample)."""
        return int(self.loss_mask.sum())


def tokenize_sample(sample: InstructionSample) -> TokenizedSample:
    """Token ids plus 0/1 loss mask; labels are bot content bytes + their EOS.

    An empty bot turn is tolerated (its label is the EOS alone) but flagged.
    """
    validate_sample(sample, allow_empty_bot=True)
    ids: list[int] = []
    mask: list[int] = []
    for turn in sample.turns:
        ids.extend((ROLE_START, ROLE_TO_TOKEN[turn.role], ROLE_END))
        mask.extend((0, 0, 0))
        content = byte_encode(turn.content)
        is_bot = turn.role is Role.BOT
        ids.extend(content)
        mask.extend([1 if is_bot else 0] * len(content))
        if is_bot:
            if not content:
                logger.warning("bot turn with empty content in task %d sample; label is EOS only", sample.task_id)
            ids.append(EOS)
            mask.append(1)
    return TokenizedSample(
        ids=np.asarray(ids, dtype=np.int64),
        loss_mask=np.asarray(mask, dtype=np.int64),
        task_id=sample.task_id,
    )


def vocab_table() -> dict[str, int]:
    """Full id table, dumpable as JSON for debugging."""
    table = {f"byte_{b}": b for b in range(256)}
    table.update(
        {"PAD": PAD, "EOS": EOS, "ROLE_START": ROLE_START, "ROLE_END": ROLE_END,
         "HUMAN": HUMAN, "BOT": BOT, "SYSTEM": SYSTEM}
    )
    return table


def dump_vocab(path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(vocab_table(), f, indent=2, sort_keys=True)
