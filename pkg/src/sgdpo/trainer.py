"""Two-phase training: next-token SFT, then DPO or SGDPO preference optimisation."""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import PreferenceExample, TokenizedPair, as_token_pairs
from .losses import ExampleTraces, TrainingError, dpo_loss, sgdpo_loss
from .model import ModelParams, SequenceTrace, batch_traces, clone_frozen
from .subsequence import ConfigError, SpanMode, _check_ratio, build_spans, span_seed

log = logging.getLogger(__name__)

HISTORY_HEADER = ("step", "loss", "chosen_reward", "rejected_reward", "margin", "lr")


class Method(str, enum.Enum):
    DPO = "dpo"
    SGDPO = "sgdpo"


@dataclass
class TrainConfig:
    beta: float = 0.1
    method: Method = Method.SGDPO
    r1: float = 0.9
    r2: float = 0.9
    span_mode: SpanMode = SpanMode.DIFFERENT_INDEX
    sft_lr: float = 3e-3
    po_lr: float = 1e-3
    batch_size: int = 16
    sft_epochs: int = 3
    sft_steps: int | None = None
    po_steps: int = 500
    schedule: str = "cosine"
    warmup_ratio: float = 0.1
    optimizer: str = "adamw"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    ccr_window: int = 80
    seed: int = 0

    def __post_init__(self):
        self.method = Method(str(self.method).lower()) if not isinstance(self.method, Method) else self.method
        self.span_mode = SpanMode.parse(self.span_mode)
        _check_ratio("r1", self.r1)
        _check_ratio("r2", self.r2)
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.ccr_window < 1:
            raise ConfigError("ccr_window must be >= 1")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        """Build from string-valued settings (config files, CLI flags)."""
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(kinds[key], raw)
        return cls(**kwargs)


def _coerce(kind: str, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if kind.startswith("int"):
        return None if text.lower() == "none" else int(text)
    if kind == "float":
        return float(text)
    return text


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value.strip("\"'")
    return out


# ---------------------------------------------------------------------------
# schedule and optimisers
# ---------------------------------------------------------------------------


def lr_at(step: int, total_steps: int, peak: float, warmup_ratio: float = 0.1, schedule: str = "cosine") -> float:
    """Linear warmup from 0, then cosine decay towards 0 at ``total_steps``."""
    if schedule == "constant":
        return peak
    warmup = int(math.floor(warmup_ratio * total_steps))
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


class SGD:
    def step(self, arrays: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            arrays[k] = arrays[k] - lr * g


class AdamW:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * arrays[k]
            arrays[k] = arrays[k] - lr * update


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD()
    return AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)


def _apply(params: ModelParams, tensors: dict[str, ad.Tensor], optimizer, lr: float) -> None:
    if params.frozen:
        raise RuntimeError("refusing to update frozen parameters")
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    optimizer.step(params.arrays, grads, lr)


# ---------------------------------------------------------------------------
# SFT
# ---------------------------------------------------------------------------


def sequence_nll(tensors: dict[str, ad.Tensor], params: ModelParams, seqs: Sequence[Sequence[int]]) -> ad.Tensor:
    """Mean next-token cross-entropy over every token after bos."""
    cfg = params.config
    traces = batch_traces(tensors, cfg, [()] * len(seqs), seqs)
    total = ad.stack([tr.total() for tr in traces]).sum()
    return total * (-1.0 / sum(len(s) for s in seqs))


def sft_train(params: ModelParams, corpus: Sequence[Sequence[int]], cfg: TrainConfig) -> ModelParams:
    """Return a fine-tuned copy of ``params``; the input is not modified."""
    if not corpus:
        raise ValueError("empty SFT corpus")
    params = params.copy()
    params.frozen = False
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    total = cfg.sft_steps if cfg.sft_steps is not None else cfg.sft_epochs * per_epoch
    optimizer = make_optimizer(cfg)
    order: list[int] = []
    for step in range(total):
        if not order:
            order = list(rng.permutation(len(corpus)))
        batch = [corpus[order.pop()] for _ in range(min(cfg.batch_size, len(order)))]
        tensors = params.tensors(requires_grad=True)
        loss = sequence_nll(tensors, params, batch)
        if not np.isfinite(loss.data):
            raise TrainingError(f"SFT diverged at step {step}")
        ad.backward(loss)
        _apply(params, tensors, optimizer, lr_at(step, total, cfg.sft_lr, cfg.warmup_ratio, cfg.schedule))
    return params


# ---------------------------------------------------------------------------
# preference optimisation
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    loss: float
    chosen_reward: float
    rejected_reward: float
    margin: float
    lr: float


@dataclass
class TrainHistory:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def append(self, record: StepRecord) -> None:
        for name in HISTORY_HEADER[1:]:
            if not math.isfinite(getattr(record, name)):
                raise TrainingError(f"non-finite {name} at step {record.step}")
        self.records.append(record)


def write_history_csv(history: TrainHistory, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in history.records:
            w.writerow([r.step, *(repr(float(getattr(r, k))) for k in HISTORY_HEADER[1:])])
    return path


def read_history_csv(path: str | os.PathLike) -> TrainHistory:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return TrainHistory(
        [StepRecord(int(r["step"]), *(float(r[k]) for k in HISTORY_HEADER[1:])) for r in rows]
    )


def reference_traces(ref: ModelParams, pairs: Sequence[TokenizedPair], chunk: int = 64) -> list[tuple[SequenceTrace, SequenceTrace]]:
    """Frozen-reference traces for every pair, computed once."""
    out = []
    tensors = ref.tensors()
    with ad.no_grad():
        for i in range(0, len(pairs), chunk):
            part = pairs[i : i + chunk]
            prompts = [p.prompt for p in part] * 2
            responses = [p.chosen for p in part] + [p.rejected for p in part]
            traces = batch_traces(tensors, ref.config, prompts, responses)
            out.extend(zip(traces[: len(part)], traces[len(part) :]))
    return out


def build_examples(
    tensors: dict[str, ad.Tensor],
    params: ModelParams,
    pairs: Sequence[TokenizedPair],
    ref: Sequence[tuple[SequenceTrace, SequenceTrace]],
    spans: Sequence | None = None,
) -> list[ExampleTraces]:
    prompts = [p.prompt for p in pairs] * 2
    responses = [p.chosen for p in pairs] + [p.rejected for p in pairs]
    traces = batch_traces(tensors, params.config, prompts, responses)
    n = len(pairs)
    return [
        ExampleTraces(traces[i], traces[n + i], ref[i][0], ref[i][1], spans[i] if spans is not None else None)
        for i in range(n)
    ]


def po_loss(cfg: TrainConfig, examples: list[ExampleTraces]):
    if cfg.method is Method.DPO:
        return dpo_loss(examples, cfg.beta)
    return sgdpo_loss(examples, cfg.beta)


def po_train(
    sft_params: ModelParams,
    dataset: Sequence[PreferenceExample | TokenizedPair],
    cfg: TrainConfig,
    *,
    ref_params: ModelParams | None = None,
    steps: int | None = None,
    on_step: Callable[[int, ModelParams], None] | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Preference optimisation against a frozen copy of ``sft_params``.

    Batches are drawn epoch by epoch from a seeded permutation; pilot spans are
    redrawn per example per epoch. Rewards in the history come from the
    training batch of each step.
    """
    pairs = as_token_pairs(dataset)
    if not pairs:
        raise ValueError("empty preference dataset")
    ref = ref_params if ref_params is not None else clone_frozen(sft_params)
    ref_tr = reference_traces(ref, pairs)
    params = sft_params.copy()
    params.frozen = False
    total = cfg.po_steps if steps is None else steps
    optimizer = make_optimizer(cfg)
    history = TrainHistory()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    order: list[int] = []
    epoch = -1
    for step in range(total):
        if not order:
            order = list(rng.permutation(len(pairs)))[::-1]
            epoch += 1
        idx = [order.pop() for _ in range(min(cfg.batch_size, len(order)))]
        batch = [pairs[i] for i in idx]
        spans = None
        if cfg.method is Method.SGDPO:
            spans = []
            for i in idx:
                try:
                    spans.append(
                        build_spans(
                            len(pairs[i].chosen), len(pairs[i].rejected), cfg.r1, cfg.r2, cfg.span_mode,
                            span_seed(cfg.seed, i, epoch),
                        )
                    )
                except ValueError as exc:
                    raise TrainingError(f"span construction failed for example {i}: {exc}") from exc
        tensors = params.tensors(requires_grad=True)
        examples = build_examples(tensors, params, batch, [ref_tr[i] for i in idx], spans)
        out = po_loss(cfg, examples)
        if not np.isfinite(out.loss.data):
            raise TrainingError(f"preference loss diverged at step {step}")
        ad.backward(out.loss)
        lr = lr_at(step, total, cfg.po_lr, cfg.warmup_ratio, cfg.schedule)
        _apply(params, tensors, optimizer, lr)
        history.append(
            StepRecord(
                step,
                out.value,
                float(out.chosen_rewards.mean()),
                float(out.rejected_rewards.mean()),
                float(out.margins.mean()),
                lr,
            )
        )
        if on_step is not None:
            on_step(step, params)
    return params, history


def ccr_crr(history: TrainHistory, window: int = 80) -> tuple[float, float]:
    """Mean chosen and rejected reward over the last ``window`` steps."""
    if len(history) == 0:
        raise ValueError("empty history")
    tail = history.records[-min(window, len(history)) :]
    return (
        float(np.mean([r.chosen_reward for r in tail])),
        float(np.mean([r.rejected_reward for r in tail])),
    )


def implicit_rewards(
    params: ModelParams,
    ref_params: ModelParams,
    examples: Iterable[PreferenceExample | TokenizedPair],
    beta: float,
) -> tuple[np.ndarray, np.ndarray]:
    pairs = as_token_pairs(examples)
    ref_tr = reference_traces(ref_params, pairs)
    pol_tr = reference_traces(params, pairs)
    chosen = np.array([beta * (p[0].total_logprob - r[0].total_logprob) for p, r in zip(pol_tr, ref_tr)])
    rejected = np.array([beta * (p[1].total_logprob - r[1].total_logprob) for p, r in zip(pol_tr, ref_tr)])
    return chosen, rejected


def evaluate_margin_accuracy(
    params: ModelParams,
    ref_params: ModelParams,
    heldout: Sequence[PreferenceExample | TokenizedPair],
    beta: float = 0.1,
) -> float:
    """Fraction of pairs whose implicit chosen reward strictly beats the rejected one."""
    if not heldout:
        raise ValueError("empty held-out set")
    chosen, rejected = implicit_rewards(params, ref_params, heldout, beta)
    return float(np.mean(chosen > rejected))
