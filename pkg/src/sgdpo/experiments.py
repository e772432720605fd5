"""Desk-scale training experiments: the CCR/CRR trend over pilot ratios and
an end-to-end accuracy and reproducibility run."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SynthSpec, sft_corpus, synth_dataset
from .model import ModelConfig, ModelParams, init_params
from .trainer import TrainConfig, TrainHistory, ccr_crr, evaluate_margin_accuracy, po_train, sft_train

TREND_RATIOS = (0.6, 0.7, 0.8, 0.9)
TREND_SEEDS = (0, 1, 2, 3, 4)

# Smaller than the default model so five seeds fit comfortably in the time budget.
TREND_MODEL = ModelConfig(d_model=32, n_layers=1, n_heads=4, d_ff=128)
TREND_DATA = dict(rule="suffix", n_examples=500, response_len=(14, 18), suffix_k=3)
TREND_TRAIN = dict(po_lr=2e-4, batch_size=32, po_steps=300, sft_steps=150, ccr_window=80)


@dataclass
class TrendSeed:
    seed: int
    dpo_ccr: float
    dpo_crr: float
    ccr: list[float]
    crr: list[float]
    seconds: float

    @property
    def ccr_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.ccr) < 0))

    @property
    def crr_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.crr) < 0))

    @property
    def rejected_held_up(self) -> bool:
        """SGDPO at the smallest ratio keeps the rejected reward above DPO's."""
        return self.crr[0] > self.dpo_crr


@dataclass
class TrendReport:
    ratios: tuple[float, ...]
    seeds: list[TrendSeed] = field(default_factory=list)

    def count(self, attr: str) -> int:
        return sum(bool(getattr(s, attr)) for s in self.seeds)

    @property
    def monotone_seeds(self) -> int:
        return sum(s.ccr_decreasing and s.crr_decreasing for s in self.seeds)


def sft_model(spec: SynthSpec, model_cfg: ModelConfig, cfg: TrainConfig, seed: int) -> tuple[ModelParams, list]:
    data = synth_dataset(spec)
    params = init_params(model_cfg, seed)
    return sft_train(params, sft_corpus(data), cfg), data


def trend_seed(seed: int, ratios=TREND_RATIOS, model_cfg: ModelConfig = TREND_MODEL,
               data_kw: dict | None = None, train_kw: dict | None = None) -> TrendSeed:
    t0 = time.perf_counter()
    data_kw = dict(TREND_DATA if data_kw is None else data_kw)
    cfg = TrainConfig(seed=seed, **(TREND_TRAIN if train_kw is None else train_kw))
    sft, data = sft_model(SynthSpec(seed=seed, **data_kw), model_cfg, cfg, seed)
    _, h = po_train(sft, data, cfg.replace(method="dpo"))
    dpo_ccr, dpo_crr = ccr_crr(h, cfg.ccr_window)
    ccr, crr = [], []
    for r in ratios:
        _, h = po_train(sft, data, cfg.replace(method="sgdpo", r1=r, r2=r))
        c, rr = ccr_crr(h, cfg.ccr_window)
        ccr.append(c)
        crr.append(rr)
    return TrendSeed(seed, dpo_ccr, dpo_crr, ccr, crr, time.perf_counter() - t0)


def trend_experiment(seeds=TREND_SEEDS, ratios=TREND_RATIOS, **kw) -> TrendReport:
    report = TrendReport(tuple(ratios))
    for s in seeds:
        report.seeds.append(trend_seed(s, ratios, **kw))
    return report


# ---------------------------------------------------------------------------

E2E_MODEL = ModelConfig(d_model=32, n_layers=1, n_heads=4, d_ff=128)


@dataclass
class EndToEndResult:
    seed: int
    accuracy: float
    final_loss: float
    params: ModelParams
    history: TrainHistory


def end_to_end(seed: int, steps: int = 200, model_cfg: ModelConfig = E2E_MODEL, n_examples: int = 500,
               holdout: int = 100) -> EndToEndResult:
    """Rule (a) data, SFT then SGDPO, margin accuracy on held-out pairs."""
    data = synth_dataset(SynthSpec(rule="repeat_vs_noise", n_examples=n_examples + holdout, seed=seed))
    train, test = data[:n_examples], data[n_examples:]
    cfg = TrainConfig(seed=seed, po_steps=steps, sft_steps=150)
    sft = sft_train(init_params(model_cfg, seed), sft_corpus(train), cfg)
    policy, hist = po_train(sft, train, cfg)
    acc = evaluate_margin_accuracy(policy, sft, test, cfg.beta)
    return EndToEndResult(seed, acc, float(hist.column("loss")[-1]), policy, hist)


def same_params(a: ModelParams, b: ModelParams) -> bool:
    return a.arrays.keys() == b.arrays.keys() and all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
