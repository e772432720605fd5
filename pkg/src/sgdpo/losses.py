"""DPO and SGDPO (pilot) objectives over batches of sequence traces.

Rewards are beta-scaled log policy/reference ratios with the partition
term dropped; it cancels in every pairwise comparison.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core_math import sigmoid
from .model import InputError, SequenceTrace
from .subsequence import SpanSpec


class TrainingError(RuntimeError):
    pass


class PilotSource(str, enum.Enum):
    CURRENT_POLICY = "current_policy"


@dataclass
class ExampleTraces:
    policy_chosen: SequenceTrace
    policy_rejected: SequenceTrace
    ref_chosen: SequenceTrace
    ref_rejected: SequenceTrace
    span: SpanSpec | None = None
    # Pilot scores; when None the (detached) policy traces are used.
    pilot_chosen: SequenceTrace | None = None
    pilot_rejected: SequenceTrace | None = None

    def __post_init__(self):
        if self.policy_chosen.token_ids != self.ref_chosen.token_ids:
            raise InputError("policy and reference chosen traces cover different tokens")
        if self.policy_rejected.token_ids != self.ref_rejected.token_ids:
            raise InputError("policy and reference rejected traces cover different tokens")

    def log_x1(self) -> Tensor:
        return self.policy_chosen.total() - self.ref_chosen.total_logprob

    def log_x2(self) -> Tensor:
        return self.policy_rejected.total() - self.ref_rejected.total_logprob

    def _pilot_log_ratio(self, pilot: SequenceTrace, ref: SequenceTrace, start: int, length: int) -> float:
        # numpy views only: this is where the stop-gradient happens
        return float(
            pilot.per_token_logprob[start : start + length].sum()
            - ref.per_token_logprob[start : start + length].sum()
        )

    def log_y1(self) -> float:
        if self.span is None:
            raise InputError("pilot ratio requested without a span")
        pilot = self.pilot_chosen or self.policy_chosen
        return self._pilot_log_ratio(pilot, self.ref_chosen, *self.span.chosen)

    def log_y2(self) -> float:
        if self.span is None:
            raise InputError("pilot ratio requested without a span")
        pilot = self.pilot_rejected or self.policy_rejected
        return self._pilot_log_ratio(pilot, self.ref_rejected, *self.span.rejected)


@dataclass(frozen=True)
class RewardQuad:
    log_x1: float
    log_x2: float
    log_y1: float
    log_y2: float

    @property
    def log_p1(self) -> float:
        return self.log_x1 - self.log_y1

    @property
    def log_p2(self) -> float:
        return self.log_x2 - self.log_y2

    @property
    def log_z(self) -> float:
        return self.log_y1 - self.log_y2


@dataclass
class LossOutput:
    loss: Tensor
    chosen_rewards: np.ndarray
    rejected_rewards: np.ndarray

    @property
    def margins(self) -> np.ndarray:
        return self.chosen_rewards - self.rejected_rewards

    @property
    def value(self) -> float:
        return float(self.loss.data)


def bt_preference_prob(reward_w: float, reward_l: float) -> float:
    """Bradley-Terry probability that the first response is preferred."""
    return sigmoid(reward_w - reward_l)


def reward_quad(traces: ExampleTraces) -> RewardQuad:
    return RewardQuad(
        log_x1=float(traces.log_x1().data),
        log_x2=float(traces.log_x2().data),
        log_y1=traces.log_y1(),
        log_y2=traces.log_y2(),
    )


def _ratios(batch: list[ExampleTraces]) -> tuple[Tensor, Tensor]:
    if not batch:
        raise InputError("empty batch")
    lx1 = ad.stack([ex.log_x1() for ex in batch])
    lx2 = ad.stack([ex.log_x2() for ex in batch])
    bad = ~(np.isfinite(lx1.data) & np.isfinite(lx2.data))
    if bad.any():
        raise TrainingError(f"non-finite log-ratio at example {int(np.argmax(bad))}")
    return lx1, lx2


def dpo_loss(batch: list[ExampleTraces], beta: float) -> LossOutput:
    """-mean log sigma(beta * (log X1 - log X2))."""
    lx1, lx2 = _ratios(batch)
    margin = (lx1 - lx2) * beta
    loss = -ad.log_sigmoid(margin).mean()
    return LossOutput(loss, beta * lx1.data.copy(), beta * lx2.data.copy())


def sgdpo_loss(
    batch: list[ExampleTraces],
    beta: float,
    pilot_source: PilotSource = PilotSource.CURRENT_POLICY,
) -> LossOutput:
    """Pilot objective: each full-sequence ratio is compared against the
    opposite response's pilot span ratio, which is held constant.

    ``-1/2 * mean[log sigma(b*logX1 - b*logY2) + log sigma(b*logY1 - b*logX2)]``
    """
    if PilotSource(pilot_source) is not PilotSource.CURRENT_POLICY:
        raise ValueError(f"unsupported pilot source {pilot_source}")
    lx1, lx2 = _ratios(batch)
    ly1 = np.array([ex.log_y1() for ex in batch])
    ly2 = np.array([ex.log_y2() for ex in batch])
    first = ad.log_sigmoid((lx1 - ly2) * beta)
    second = ad.log_sigmoid((ly1 - lx2) * beta)
    loss = (first + second).mean() * -0.5
    return LossOutput(loss, beta * lx1.data.copy(), beta * lx2.data.copy())
