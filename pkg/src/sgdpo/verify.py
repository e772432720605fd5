"""Oracle suite: closed forms against finite differences, property sweeps,
model-level gradient checks and the DPO/SGDPO equivalence limit.

Each check returns a :class:`CheckResult`; :func:`run_all` drives the CLI's
``verify`` subcommand.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import core_math as cm
from . import gradflow as gf
from .data import TokenizedPair
from .losses import ExampleTraces, dpo_loss, sgdpo_loss
from .model import ModelConfig, ModelParams, Vocab, batch_traces, init_params
from .subsequence import SpanMode, build_spans
from .trainer import Method, TrainConfig, po_train, reference_traces

BETAS = (0.05, 0.1, 0.5)
SWEEP = np.round(np.arange(1, 31) * 0.05, 12)  # 0.05, 0.10, ..., 1.50
PILOT_SWEEP = SWEEP[::3]  # 0.05, 0.20, ..., 1.40 for the (y1, y2) axes

TINY_MODEL = ModelConfig(vocab=Vocab.small(8), d_model=8, n_layers=1, n_heads=2, d_ff=16, max_context=32)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.abs(a), np.abs(b))


# ---------------------------------------------------------------------------
# closed-form calculus
# ---------------------------------------------------------------------------


def closed_form_gradients(tol: float = 1e-6) -> CheckResult:
    def run():
        worst = 0.0
        x1, x2 = np.meshgrid(SWEEP, SWEEP, indexing="ij")
        a1, a2, b1, b2 = np.meshgrid(SWEEP, SWEEP, PILOT_SWEEP, PILOT_SWEEP, indexing="ij")
        for beta in BETAS:
            fd1 = cm.central_difference(lambda v: cm.l_dpo_surrogate(v, x2, beta), x1)
            fd2 = cm.central_difference(lambda v: cm.l_dpo_surrogate(x1, v, beta), x2)
            worst = max(worst, _rel(cm.dpo_partial_x1(x1, x2, beta), fd1).max())
            worst = max(worst, _rel(cm.dpo_partial_x2(x1, x2, beta), fd2).max())
            fd1 = cm.central_difference(lambda v: cm.l_pilot_surrogate(v, a2, b1, b2, beta), a1)
            fd2 = cm.central_difference(lambda v: cm.l_pilot_surrogate(a1, v, b1, b2, beta), a2)
            worst = max(worst, _rel(cm.pilot_partial_x1(a1, b2, beta), fd1).max())
            worst = max(worst, _rel(cm.pilot_partial_x2(a2, b1, beta), fd2).max())
        return worst < tol, f"max rel err {worst:.2e} (tol {tol:g})"

    return _timed("closed-form partials vs finite differences", run)


def ratio_identities(tol: float = 1e-10) -> CheckResult:
    def run():
        worst = 0.0
        x1, x2 = np.meshgrid(SWEEP, SWEEP, indexing="ij")
        a1, a2, b1, b2 = np.meshgrid(SWEEP, SWEEP, PILOT_SWEEP, PILOT_SWEEP, indexing="ij")
        for beta in BETAS:
            direct = np.abs(cm.dpo_partial_x1(x1, x2, beta) / cm.dpo_partial_x2(x1, x2, beta))
            worst = max(worst, _rel(direct, x2 / x1).max())
            worst = max(worst, _rel(direct, cm.dpo_grad_ratio(x1, x2)).max())
            direct = np.abs(cm.pilot_partial_x1(a1, b2, beta) / cm.pilot_partial_x2(a2, b1, beta))
            via_f = (a2 / a1) * cm.f_z(b1 / b2, a1 / b1, a2 / b2, beta)
            worst = max(worst, _rel(direct, via_f).max())
            worst = max(worst, _rel(direct, cm.pilot_grad_ratio(a1, a2, b1, b2, beta)).max())
        return worst < tol, f"max rel err {worst:.2e} (tol {tol:g})"

    return _timed("gradient-ratio identities", run)


def pilot_monotonicity(n: int = 100) -> CheckResult:
    def run():
        violations = 0
        ys = np.linspace(0.1, 1.5, n)
        for beta in BETAS:
            for fixed in SWEEP[::5]:
                violations += int(np.sum(np.diff(cm.pilot_partial_x1(fixed, ys, beta)) <= 0))
                violations += int(np.sum(np.diff(np.abs(cm.pilot_partial_x2(fixed, ys, beta))) >= 0))
        return violations == 0, f"{violations} violations over {n}-point sweeps"

    return _timed("pilot partial monotonicity in Y2 / Y1", run)


F_INCREASING = ((0.5, 0.5), (0.3, 1.2), (0.9, 0.9), (0.2, 3.0), (1.5, 0.4))
F_DECREASING = ((2.0, 2.0), (1.5, 0.9), (3.0, 0.5), (1.1, 1.1), (0.8, 2.5))


def f_z_laws(n: int = 200) -> CheckResult:
    def run():
        zs = np.logspace(-1, 1, n)
        problems = []
        for beta in BETAS:
            if np.abs(cm.f_z(zs, 1.0, 1.0, beta) - 1.0).max() > 1e-12:
                problems.append(f"f != 1 at p1=p2=1, beta={beta}")
            for p1, p2 in F_INCREASING:
                f = cm.f_z(zs, p1, p2, beta)
                if not np.all(np.diff(f) > 0):
                    problems.append(f"not increasing at p=({p1},{p2}), beta={beta}")
            for p1, p2 in F_DECREASING:
                f = cm.f_z(zs, p1, p2, beta)
                if not np.all(np.diff(f) < 0):
                    problems.append(f"not decreasing at p=({p1},{p2}), beta={beta}")
            ps = np.linspace(0.05, 3.0, 60)
            p1, p2, z = np.meshgrid(ps, ps, zs[::10], indexing="ij")
            below = p1 * p2 < 1
            if not np.all(cm.f_z(z[below], p1[below], p2[below], beta) > 1):
                problems.append(f"f <= 1 inside p1*p2 < 1, beta={beta}")
        return not problems, "; ".join(problems) or f"identity, monotonicity over {n}-point sweeps, f > 1 region"

    return _timed("f(z) identity, monotonicity and f > 1 region", run)


def chosen_gradient_enlarged(n: int = 20000, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        x1 = np.exp(rng.uniform(-4, 1, n))
        x2 = np.exp(rng.uniform(-4, 1, n))
        y2 = x2 * np.exp(rng.uniform(1e-3, 3, n))
        ok = 0
        for beta in BETAS:
            ok += int(np.sum(cm.pilot_partial_x1(x1, y2, beta) > cm.dpo_partial_x1(x1, x2, beta)))
        total = n * len(BETAS)
        return ok == total, f"{ok}/{total} sampled states with Y2 > X2 enlarge dl/dX1"

    return _timed("chosen-reward partial enlarged when Y2 > X2", run)


def dpo_field_csv(out_dir: str | Path, beta: float = 0.1) -> CheckResult:
    def run():
        out_dir_ = Path(out_dir)
        path = gf.write_field_csv(gf.field_grid("dpo", beta), out_dir_ / "dpo_field.csv")
        points = gf.read_field_csv(path)
        problems = []
        x1 = np.array([p.x1 for p in points])
        x2 = np.array([p.x2 for p in points])
        dx1 = np.array([p.dx1 for p in points])
        dx2 = np.array([p.dx2 for p in points])
        if _rel(np.abs(dx1 / dx2), x2 / x1).max() >= 1e-10:
            problems.append("ratio identity broken")
        unit = [p for p in points if p.x1 == 1.0 and p.x2 == 1.0]
        if len(unit) != 1 or abs(unit[0].dx1 - 0.05) > 1e-12 or abs(unit[0].dx2 + 0.05) > 1e-12:
            problems.append("(1, 1) row does not hold (0.05, -0.05)")
        if np.hypot(dx1, dx2).max() > gf.DEFAULT_TRUNCATION + 1e-12:
            problems.append("vector longer than truncation")
        # a wider grid where truncation actually bites
        wide = gf.FieldGrid(x1_range=(0.01, 1.5), x2_range=(0.01, 1.5), resolution=30)
        raw = gf.field_grid("dpo", beta, wide, truncated=False)
        cut = gf.field_grid("dpo", beta, wide)
        clipped = 0
        for r, c in zip(raw, cut):
            m_raw, m_cut = np.hypot(r.dx1, r.dx2), np.hypot(c.dx1, c.dx2)
            if m_raw > gf.DEFAULT_TRUNCATION:
                clipped += 1
                if abs(m_cut - gf.DEFAULT_TRUNCATION) > 1e-12:
                    problems.append("clipped magnitude differs from 1.5")
                    break
            if abs(r.dx1 * c.dx2 - r.dx2 * c.dx1) > 1e-12 * max(1.0, m_raw) or r.dx1 * c.dx1 < 0:
                problems.append("truncation changed direction")
                break
        if clipped == 0:
            problems.append("truncation never exercised")
        return not problems, "; ".join(problems) or (
            f"{len(points)} rows satisfy X2/X1 ratio, (1,1) -> (0.05,-0.05), {clipped} vectors clipped at 1.5"
        )

    return _timed("DPO gradient-flow field CSV", run)


# ---------------------------------------------------------------------------
# model level
# ---------------------------------------------------------------------------


def tiny_pairs(n: int, seed: int, cfg: ModelConfig = TINY_MODEL, equal_lengths: bool = False) -> list[TokenizedPair]:
    rng = np.random.default_rng(seed)
    n_sym = cfg.vocab.pad_id
    out = []
    for _ in range(n):
        lp = int(rng.integers(1, 5))
        lc = int(rng.integers(3, 8))
        lr = lc if equal_lengths else int(rng.integers(3, 8))
        out.append(
            TokenizedPair(
                tuple(int(v) for v in rng.integers(0, n_sym, lp)),
                tuple(int(v) for v in rng.integers(0, n_sym, lc)),
                tuple(int(v) for v in rng.integers(0, n_sym, lr)),
            )
        )
    return out


def tiny_models(seed: int = 0, cfg: ModelConfig = TINY_MODEL) -> tuple[ModelParams, ModelParams]:
    """A policy and a distinct reference with non-trivial output distributions."""
    return init_params(cfg, seed, init_std=0.5), init_params(cfg, seed + 1000, init_std=0.5)


def _loss_closure(method: Method, policy: ModelParams, ref: ModelParams, pairs, beta: float, spans=None):
    ref_tr = reference_traces(ref, pairs)
    # pilot scores frozen at the unperturbed policy: the stop-gradient semantics
    pilot_tr = reference_traces(policy, pairs)

    def loss_fn(tensors):
        prompts = [p.prompt for p in pairs] * 2
        responses = [p.chosen for p in pairs] + [p.rejected for p in pairs]
        tr = batch_traces(tensors, policy.config, prompts, responses)
        n = len(pairs)
        exs = [
            ExampleTraces(tr[i], tr[n + i], ref_tr[i][0], ref_tr[i][1], spans[i] if spans else None,
                          pilot_tr[i][0], pilot_tr[i][1])
            for i in range(n)
        ]
        return (dpo_loss if method is Method.DPO else sgdpo_loss)(exs, beta).loss

    return loss_fn


def model_gradient_check(tol: float = 1e-6, batch: int = 4, seed: int = 0) -> CheckResult:
    def run():
        policy, ref = tiny_models(seed)
        pairs = tiny_pairs(batch, seed)
        spans = [build_spans(len(p.chosen), len(p.rejected), 0.6, 0.6, SpanMode.DIFFERENT_INDEX, seed + i)
                 for i, p in enumerate(pairs)]
        parts = []
        ok = policy.n_params <= 5000
        for method in (Method.DPO, Method.SGDPO):
            fn = _loss_closure(method, policy, ref, pairs, 0.1, spans)
            rep = ad.grad_check(fn, policy.arrays, tol, max_coords=None)
            ok = ok and rep.passed
            parts.append(f"{method.value} max rel err {rep.max_rel_err:.2e} over {rep.n_checked} coords")
        return ok, f"{policy.n_params} params; " + "; ".join(parts)

    return _timed("model-level gradient check (DPO and SGDPO)", run)


def equivalence_limit(seed: int = 0, steps: int = 10) -> CheckResult:
    def run():
        policy, _ = tiny_models(seed)
        ref = init_params(TINY_MODEL, seed + 1000, init_std=0.5)
        pairs = tiny_pairs(4, seed, equal_lengths=True)
        spans = [build_spans(len(p.chosen), len(p.rejected), 1.0, 1.0, SpanMode.SAME_INDEX, i) for i, p in enumerate(pairs)]
        grads = {}
        for method in (Method.DPO, Method.SGDPO):
            # live pilot: the training path, detached current policy
            tensors = policy.tensors(requires_grad=True)
            tr = batch_traces(tensors, TINY_MODEL, [p.prompt for p in pairs] * 2,
                              [p.chosen for p in pairs] + [p.rejected for p in pairs])
            ref_tr = reference_traces(ref, pairs)
            exs = [ExampleTraces(tr[i], tr[4 + i], ref_tr[i][0], ref_tr[i][1], spans[i]) for i in range(4)]
            loss = (dpo_loss if method is Method.DPO else sgdpo_loss)(exs, 0.1).loss
            ad.backward(loss)
            grads[method] = {k: t.grad for k, t in tensors.items()}
        grad_diff = max(np.abs(grads[Method.SGDPO][k] - 0.5 * grads[Method.DPO][k]).max() for k in grads[Method.DPO])

        cfg = TrainConfig(optimizer="sgd", batch_size=4, r1=1.0, r2=1.0, span_mode=SpanMode.SAME_INDEX,
                          po_lr=0.5, seed=seed)
        snaps: dict[str, list] = {"dpo": [], "sgdpo": []}
        po_train(policy, pairs, cfg.replace(method="sgdpo"), ref_params=ref, steps=steps,
                 on_step=lambda s, p: snaps["sgdpo"].append(p.copy()))
        po_train(policy, pairs, cfg.replace(method="dpo", po_lr=cfg.po_lr / 2), ref_params=ref, steps=steps,
                 on_step=lambda s, p: snaps["dpo"].append(p.copy()))
        traj_diff = max(
            np.abs(a.arrays[k] - b.arrays[k]).max()
            for a, b in zip(snaps["sgdpo"], snaps["dpo"])
            for k in a.arrays
        )
        moved = max(np.abs(snaps["dpo"][-1].arrays[k] - policy.arrays[k]).max() for k in policy.arrays)
        ok = grad_diff < 1e-10 and traj_diff < 1e-8 and moved > 1e-6 and len(snaps["dpo"]) == steps
        return ok, (f"max |g_sgdpo - g_dpo/2| {grad_diff:.1e}; {steps}-step trajectory diff {traj_diff:.1e} "
                    f"(params moved {moved:.1e})")

    return _timed("SGDPO/DPO equivalence limit (r=1, same index)", run)


def run_all(out_dir: str | Path) -> list[CheckResult]:
    return [
        closed_form_gradients(),
        ratio_identities(),
        pilot_monotonicity(),
        f_z_laws(),
        model_gradient_check(),
        equivalence_limit(),
        chosen_gradient_enlarged(),
        dpo_field_csv(out_dir),
    ]
