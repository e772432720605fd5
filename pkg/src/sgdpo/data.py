"""Preference datasets: JSONL ingestion, synthetic generators, tokenisation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .model import ByteTokenizer
from .subsequence import ConfigError

REQUIRED_FIELDS = ("prompt", "chosen", "rejected")


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class PreferenceExample:
    prompt: str
    chosen: str
    rejected: str
    line: int | None = None

    def __post_init__(self):
        if not self.chosen or not self.rejected:
            raise DatasetError("chosen and rejected must be non-empty", self.line)

    def tokenize(self, tokenizer: ByteTokenizer | None = None) -> "TokenizedPair":
        tok = tokenizer or ByteTokenizer()
        return TokenizedPair(
            tuple(tok.encode(self.prompt)),
            tuple(tok.encode_response(self.chosen)),
            tuple(tok.encode_response(self.rejected)),
        )

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "chosen": self.chosen, "rejected": self.rejected}


class TokenizedPair(NamedTuple):
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]


def as_token_pairs(examples: Iterable["PreferenceExample | TokenizedPair"]) -> list[TokenizedPair]:
    tok = ByteTokenizer()
    out = []
    for ex in examples:
        out.append(ex.tokenize(tok) if isinstance(ex, PreferenceExample) else TokenizedPair(*map(tuple, ex)))
    return out


def sft_corpus(examples: Iterable["PreferenceExample | TokenizedPair"]) -> list[tuple[int, ...]]:
    """Prompt followed by the chosen response, for next-token fine-tuning."""
    return [p.prompt + p.chosen for p in as_token_pairs(examples)]


def load_jsonl(path: str | os.PathLike) -> list[PreferenceExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise DatasetError("expected a JSON object", lineno)
            for name in REQUIRED_FIELDS:
                if name not in obj:
                    raise DatasetError(f"missing field '{name}'", lineno, name)
                if not isinstance(obj[name], str):
                    raise DatasetError(f"field '{name}' must be a string", lineno, name)
            examples.append(PreferenceExample(obj["prompt"], obj["chosen"], obj["rejected"], line=lineno))
    return examples


def save_jsonl(examples: Iterable[PreferenceExample], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    rule: str = "repeat_vs_noise"
    n_examples: int = 500
    symbols: str = "abcdefgh"
    prompt_len: tuple[int, int] = (4, 8)
    response_len: tuple[int, int] = (6, 10)
    suffix_k: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("prompt_len", "response_len"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if len(set(self.symbols)) < 2:
            raise ConfigError("need at least two distinct symbols")
        object.__setattr__(self, "rule", RULE_ALIASES.get(self.rule, self.rule))
        if self.rule not in RULES:
            raise ConfigError(f"unknown synthetic rule {self.rule!r}; known: {sorted(RULES)}")


def _repeat_vs_noise(spec: SynthSpec, rng: np.random.Generator) -> PreferenceExample:
    sym = spec.symbols
    prompt = "".join(rng.choice(list(sym), size=rng.integers(spec.prompt_len[0], spec.prompt_len[1] + 1)))
    lc = int(rng.integers(spec.response_len[0], spec.response_len[1] + 1))
    lr = int(rng.integers(spec.response_len[0], spec.response_len[1] + 1))
    chosen = prompt[-1] * lc
    rejected = "".join(rng.choice(list(sym), size=lr))
    return PreferenceExample(prompt, chosen, rejected)


def _suffix(spec: SynthSpec, rng: np.random.Generator) -> PreferenceExample:
    sym = spec.symbols
    k = spec.suffix_k
    prompt = "".join(rng.choice(list(sym), size=rng.integers(spec.prompt_len[0], spec.prompt_len[1] + 1)))
    length = max(k, int(rng.integers(spec.response_len[0], spec.response_len[1] + 1)))
    body = "".join(rng.choice(list(sym), size=length - k))
    last = prompt[-1]
    others = [c for c in sym if c != last]
    chosen = body + last * k
    rejected = body + "".join(rng.choice(others, size=k))
    return PreferenceExample(prompt, chosen, rejected)


RULES: dict[str, Callable[[SynthSpec, np.random.Generator], PreferenceExample]] = {
    # (a) chosen repeats the prompt's final token, rejected is uniform noise
    "repeat_vs_noise": _repeat_vs_noise,
    # (b) chosen and rejected share a body and differ in a k-token suffix
    "suffix": _suffix,
}
RULE_ALIASES = {"a": "repeat_vs_noise", "b": "suffix"}


def synth_dataset(spec: SynthSpec) -> list[PreferenceExample]:
    rng = np.random.default_rng(spec.seed)
    make = RULES[spec.rule]
    return [make(spec, rng) for _ in range(spec.n_examples)]


def resolve_rule(name: str) -> str:
    name = RULE_ALIASES.get(name, name)
    if name not in RULES:
        raise ConfigError(f"unknown synthetic rule {name!r}; known: {sorted(RULES)} or a/b")
    return name
