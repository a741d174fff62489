"""Greedy autoregressive decoding, answer metrics and across-seed bootstrap CIs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import EMPTY_PLAN, HookPlan, ModelState, forward
from .rng import ANALYSIS_SEED
from .taskgen import CANONICAL, PROMPT_LEN, TOKEN_ID, TaskExample, render_tokens

EVAL_BATCH = 512


def prompt_ids(examples: Sequence[TaskExample], perm=CANONICAL) -> np.ndarray:
    return np.array([render_tokens(ex, perm, include_answer=False).ids for ex in examples], dtype=np.int64)


def target_ids(examples: Sequence[TaskExample]) -> np.ndarray:
    return np.array([ex.answer_digits for ex in examples], dtype=np.int64)


def greedy_decode(
    state: ModelState,
    prompts: np.ndarray,
    plan: HookPlan = EMPTY_PLAN,
    emit_end: bool = True,
    batch_size: int = EVAL_BATCH,
) -> np.ndarray:
    """Decode answer digits (and the end token) greedily from O-terminated prompts.

    ``prompts`` is (n, 10). Returns (n, 3) token ids, or (n, 2) without the
    end token. ``np.argmax`` breaks ties toward the lowest token id. The same
    plan is applied on every step; ``plan.kv_overrides`` vectors with a
    leading batch axis must cover all ``n`` rows.
    """
    prompts = np.asarray(prompts)
    if prompts.ndim != 2 or prompts.shape[1] != PROMPT_LEN:
        raise ValueError(f"prompts must be (n, {PROMPT_LEN}), got {prompts.shape}")
    steps = 3 if emit_end else 2
    out = np.empty((len(prompts), steps), dtype=np.int64)
    for lo in range(0, len(prompts), batch_size):
        sl = slice(lo, lo + batch_size)
        p = _slice_plan(plan, sl, len(prompts))
        seq = prompts[sl]
        for s in range(steps):
            logits, _ = forward(state, seq, p)
            tok = logits.data[:, -1, :].argmax(axis=-1)
            out[sl, s] = tok
            seq = np.concatenate([seq, tok[:, None]], axis=1)
    return out


def _slice_plan(plan: HookPlan, sl: slice, n: int) -> HookPlan:
    if not plan.kv_overrides:
        return plan
    ovs = []
    for ov in plan.kv_overrides:
        v = np.asarray(ov.vector)
        if v.ndim == 2:
            if v.shape[0] != n:
                raise ValueError(f"override vectors cover {v.shape[0]} rows, batch has {n}")
            v = v[sl]
        ovs.append(type(ov)(ov.layer, ov.key_pos, ov.rows, v))
    return HookPlan(plan.captures, plan.logit_masks, tuple(ovs))


@dataclass
class EvalResult:
    examples: list[TaskExample]
    predicted: np.ndarray   # (n, 2) token ids
    targets: np.ndarray     # (n, 2) digit values

    @property
    def digit_match(self) -> np.ndarray:
        return self.predicted == self.targets

    @property
    def exact_match(self) -> np.ndarray:
        return self.digit_match.all(axis=1)

    @property
    def exact_accuracy(self) -> float:
        return 100.0 * float(self.exact_match.mean()) if len(self.examples) else float("nan")

    @property
    def digit_accuracy(self) -> tuple[float, float]:
        m = self.digit_match.mean(axis=0) * 100.0
        return float(m[0]), float(m[1])

    def summary(self) -> dict:
        d1, d2 = self.digit_accuracy
        return {"n": len(self.examples), "exact_accuracy": self.exact_accuracy,
                "digit1_accuracy": d1, "digit2_accuracy": d2}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["example_id", "n", "b", "d", "target", "predicted", "exact", "digit1", "digit2"])
            for i, ex in enumerate(self.examples):
                pred = "".join(_tok_str(t) for t in self.predicted[i])
                dm = self.digit_match[i]
                w.writerow([i, ex.n, ex.b, ex.d, f"{ex.answer:02d}", pred, int(dm.all()), int(dm[0]), int(dm[1])])


def _tok_str(t: int) -> str:
    return str(t) if t < 10 else "?"


def evaluate(state: ModelState, examples: Sequence[TaskExample], plan: HookPlan = EMPTY_PLAN) -> EvalResult:
    examples = list(examples)
    pred = greedy_decode(state, prompt_ids(examples), plan, emit_end=False)
    return EvalResult(examples, pred, target_ids(examples))


def exact_accuracy(state: ModelState, examples: Sequence[TaskExample], plan: HookPlan = EMPTY_PLAN) -> float:
    return evaluate(state, examples, plan).exact_accuracy


def bootstrap_ci(
    seed_values: Sequence[float],
    resamples: int = 100_000,
    rng_seed: int = ANALYSIS_SEED,
    level: float = 95.0,
) -> tuple[float, float, float]:
    """Mean and two-sided percentile-bootstrap CI over per-seed means.

    Percentiles use the nearest-rank (inverted CDF) rule.
    """
    vals = np.asarray(seed_values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("bootstrap_ci needs at least one value")
    g = np.random.default_rng(rng_seed)
    idx = g.integers(0, vals.size, size=(resamples, vals.size))
    means = vals[idx].mean(axis=1)
    tail = (100.0 - level) / 2
    lo, hi = np.percentile(means, [tail, 100.0 - tail], method="inverted_cdf")
    return float(vals.mean()), float(lo), float(hi)


def format_ci(mean: float, lo: float, hi: float) -> str:
    return f"{mean:.2f} [{lo:.2f}, {hi:.2f}]"
