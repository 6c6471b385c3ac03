"""Single-turn synthetic instruction pipeline:

seeds -> templated task prompts -> refined prompts -> numbered instruction
lists -> one solution call per instruction -> deduplicated samples.

Providers are pluggable; the deterministic mock makes the whole pipeline
reproducible byte-for-byte, and the HTTP provider speaks the standard
chat-completions JSON shape.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import urllib.request
from dataclasses import dataclass, field

from .dataset import ChatTurn, DatasetManifest, InstructionSample, Role, TaskSpec

logger = logging.getLogger(__name__)

TOKEN_ENV_VAR = "MFTUNE_PROVIDER_TOKEN"


class DatagenError(ValueError):
    pass


class BudgetExhausted(DatagenError):
    pass


def check_template(template: str) -> None:
    if template.count("{seed}") != 1:
        raise DatagenError(f"template must contain exactly one {{seed}} placeholder: {template!r}")


def expand_seeds(seeds: list[str], templates: list[str]) -> list[str]:
    """Seeds-major cartesian product of seed x template substitutions."""
    if not seeds or not templates:
        raise DatagenError("seeds and templates must both be non-empty")
    if len(set(seeds)) != len(seeds):
        raise DatagenError("duplicate seed topics")
    for s in seeds:
        if not s:
            raise DatagenError("empty seed topic")
    for t in templates:
        check_template(t)
    return [t.replace("{seed}", s) for s in seeds for t in templates]


class CompletionProvider:
    """Text-completion interface with a hard call budget."""

    def __init__(self, budget: int):
        self.budget = budget
        self.calls = 0

    def complete(self, prompt: str) -> str:
        if self.calls >= self.budget:
            raise BudgetExhausted(f"provider budget of {self.budget} calls exhausted")
        self.calls += 1
        return self._complete(prompt)

    def _complete(self, prompt: str) -> str:
        raise NotImplementedError


class MockProvider(CompletionProvider):
    """Deterministic provider: responses are a pure function of (seed, prompt).

    Refinement echoes the prompt with a marker; instruction requests produce a
    numbered list derived from the prompt hash; solution requests answer with
    a stable transform of the instruction.
    """

    def __init__(self, budget: int = 1_000_000, seed: int = 0, items_per_list: int = 3):
        super().__init__(budget)
        self.seed = seed
        self.items_per_list = items_per_list

    def _digest(self, text: str) -> str:
        return hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).hexdigest()[:8]

    def _complete(self, prompt: str) -> str:
        if prompt.startswith("Refine:"):
            return f"refined[{self._digest(prompt)}] {prompt[len('Refine:'):].strip()}"
        if prompt.startswith("List instructions:"):
            d = self._digest(prompt)
            return "\n".join(
                f"{i+1}. exercise {d}-{i+1}" for i in range(self.items_per_list)
            )
        if prompt.startswith("Solve:"):
            return f"solution[{self._digest(prompt)}]"
        return f"echo[{self._digest(prompt)}] {prompt}"


class HttpChatProvider(CompletionProvider):
    """Chat-completions client; auth token read from MFTUNE_PROVIDER_TOKEN."""

    def __init__(self, endpoint: str, model: str = "gpt-3.5-turbo", budget: int = 100, timeout: float = 60.0):
        super().__init__(budget)
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout

    def _complete(self, prompt: str) -> str:
        body = json.dumps(
            {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise DatagenError(f"unexpected response shape from {self.endpoint}") from None


def refine_prompt(provider: CompletionProvider, task_prompt: str) -> str:
    out = provider.complete(f"Refine: {task_prompt}").strip()
    if not out:
        raise DatagenError("provider returned an empty refinement")
    return out


_NUMBERED_ITEM = re.compile(r"^\s*(\d+)[.)]\s*(.+?)\s*$")


def parse_numbered_list(text: str) -> list[str]:
    items = []
    for line in text.splitlines():
        m = _NUMBERED_ITEM.match(line)
        if m and m.group(2):
            items.append(m.group(2))
    return items


def generate_pairs(
    provider: CompletionProvider, refined_prompt: str, k: int
) -> tuple[list[tuple[str, str]], list[str]]:
    """Up to k (instruction, solution) pairs plus a reject log of unparseable output."""
    if k < 1:
        raise DatagenError("k must be >= 1")
    raw = provider.complete(f"List instructions: ({k} items) {refined_prompt}")
    instructions = parse_numbered_list(raw)[:k]
    rejects: list[str] = []
    if not instructions:
        rejects.append(raw)
        return [], rejects
    if len(instructions) < k:
        logger.info("provider produced %d/%d instructions", len(instructions), k)
    pairs = []
    for ins in instructions:
        sol = provider.complete(f"Solve: {ins}").strip()
        if not sol:
            rejects.append(ins)
            continue
        pairs.append((ins, sol))
    return pairs, rejects


def _norm_key(text: str) -> str:
    return " ".join(text.lower().split())


def dedup(samples: list[InstructionSample]) -> list[InstructionSample]:
    """Drop later samples whose normalized instruction text repeats an earlier one."""
    seen: set[str] = set()
    out = []
    for s in samples:
        key = _norm_key(" ".join(t.content for t in s.turns if t.role is Role.HUMAN))
        if key in seen:
            continue
        seen.add(key)
        out.append(s)
    return out


@dataclass
class GenerationRecord:
    seed: str
    task_prompt: str
    refined_prompt: str
    instructions: list[str] = field(default_factory=list)
    solutions: list[str] = field(default_factory=list)
    provider_calls: int = 0


def run_pipeline(
    seeds: list[str],
    templates: list[str],
    provider: CompletionProvider,
    k_per_prompt: int,
    task_id: int = 0,
    task_name: str = "generated",
) -> tuple[DatasetManifest, list[GenerationRecord], list[str]]:
    """Full figure-style pipeline against one provider; returns the manifest,
    per-prompt records, and the reject log."""
    task_prompts = expand_seeds(seeds, templates)
    records: list[GenerationRecord] = []
    rejects: list[str] = []
    samples: list[InstructionSample] = []
    prompts_per_seed = len(templates)
    for i, task_prompt in enumerate(task_prompts):
        seed_text = seeds[i // prompts_per_seed]
        calls_before = provider.calls
        refined = refine_prompt(provider, task_prompt)
        pairs, prompt_rejects = generate_pairs(provider, refined, k_per_prompt)
        rejects.extend(prompt_rejects)
        records.append(
            GenerationRecord(
                seed=seed_text,
                task_prompt=task_prompt,
                refined_prompt=refined,
                instructions=[p[0] for p in pairs],
                solutions=[p[1] for p in pairs],
                provider_calls=provider.calls - calls_before,
            )
        )
        for ins, sol in pairs:
            samples.append(
                InstructionSample(
                    task_id=task_id,
                    turns=(ChatTurn(Role.HUMAN, ins), ChatTurn(Role.BOT, sol)),
                )
            )
    samples = dedup(samples)
    manifest = DatasetManifest(
        tasks=[TaskSpec(task_id=task_id, name=task_name)], samples=samples
    )
    return manifest, records, rejects
