"""Linear probes for the closed-form intermediates of digit extraction.

Depth indexing: depth 0 is the input residual (embeddings), depth k >= 1 is
the residual after block k-1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .evalkit import EVAL_BATCH, prompt_ids
from .model import HookPlan, ModelState, forward
from .rng import ANALYSIS_SEED
from .taskgen import POS, PROMPT_LEN, PROMPT_STREAMS, TaskExample

TARGETS = ("B_pow_D", "N_over_BpowD", "floor_N_over_BpowD", "answer_mod")
PROBE_STREAMS = PROMPT_STREAMS + ("O[0]", "O[1]")
RIDGE = 1e-8


def target_values(examples: Sequence[TaskExample], kind: str) -> np.ndarray:
    n = np.array([e.n for e in examples], dtype=np.float64)
    b = np.array([e.b for e in examples], dtype=np.float64)
    d = np.array([e.d for e in examples], dtype=np.float64)
    bd = b**d
    if kind == "B_pow_D":
        return bd
    if kind == "N_over_BpowD":
        return n / bd
    if kind == "floor_N_over_BpowD":
        return np.floor(n / bd)
    if kind == "answer_mod":
        return np.array([(e.n // e.b**e.d) % e.b for e in examples], dtype=np.float64)
    raise ValueError(f"unknown probe target {kind!r}")


def target_matrix(examples: Sequence[TaskExample]) -> np.ndarray:
    return np.stack([target_values(examples, k) for k in TARGETS], axis=1)


@dataclass
class ActivationTable:
    """Residual activations per (stream, depth); rows align with ``examples``."""

    examples: list[TaskExample]
    n_depths: int
    data: dict[tuple[str, int], np.ndarray]

    def __getitem__(self, key: tuple[str, int]) -> np.ndarray:
        return self.data[key]


def collect_activations(state: ModelState, examples: Sequence[TaskExample],
                        batch_size: int = EVAL_BATCH) -> ActivationTable:
    """Capture every probed stream at every depth, autoregressively.

    Prompt streams and O[0] come from the prompt pass; O[1] comes from a
    second pass conditioned on the greedily generated first digit.
    """
    examples = list(examples)
    depths = state.config.n_layers + 1
    prompts = prompt_ids(examples)
    prompt_plan = HookPlan(captures=frozenset((dp, p) for dp in range(depths) for p in range(PROMPT_LEN)))
    o1 = POS["O[1]"]
    second_plan = HookPlan(captures=frozenset((dp, o1) for dp in range(depths)))
    W = state.config.width
    data = {(s, dp): np.empty((len(examples), W), dtype=np.float32) for s in PROBE_STREAMS for dp in range(depths)}
    for lo in range(0, len(examples), batch_size):
        sl = slice(lo, lo + batch_size)
        logits, caps = forward(state, prompts[sl], prompt_plan)
        for s in PROMPT_STREAMS + ("O[0]",):
            for dp in range(depths):
                data[(s, dp)][sl] = caps[(dp, POS[s])]
        first = logits.data[:, -1, :].argmax(axis=-1)
        seq = np.concatenate([prompts[sl], first[:, None]], axis=1)
        _, caps2 = forward(state, seq, second_plan)
        for dp in range(depths):
            data[("O[1]", dp)][sl] = caps2[(dp, o1)]
    return ActivationTable(examples, depths, data)


@dataclass
class ProbeFit:
    mean_r2: np.ndarray      # (targets,)
    fold_r2: np.ndarray      # (folds, targets)
    degenerate: np.ndarray   # (targets,) bool: some held-out fold had constant y


def fold_indices(n: int, folds: int = 5, fold_seed: int = ANALYSIS_SEED) -> list[np.ndarray]:
    order = np.random.default_rng(fold_seed).permutation(n)
    return np.array_split(order, folds)


def fit_probe_cv(X: np.ndarray, y: np.ndarray, folds: int = 5, fold_seed: int = ANALYSIS_SEED) -> ProbeFit:
    """Shuffled k-fold CV R^2 of least squares with intercept.

    Columns are standardised with the training fold's mean and std only;
    zero-variance columns are centred but not scaled. ``y`` may hold several
    targets as columns; each is scored against its held-out fold mean. A
    held-out fold with constant ``y`` scores 0 and sets ``degenerate``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(y, dtype=np.float64)
    single = Y.ndim == 1
    if single:
        Y = Y[:, None]
    n = len(X)
    if n < folds:
        raise ValueError(f"need at least {folds} rows, got {n}")
    r2 = np.zeros((folds, Y.shape[1]))
    degenerate = np.zeros(Y.shape[1], dtype=bool)
    for f, test_idx in enumerate(fold_indices(n, folds, fold_seed)):
        train_mask = np.ones(n, dtype=bool)
        train_mask[test_idx] = False
        Xtr, Ytr = X[train_mask], Y[train_mask]
        mu = Xtr.mean(axis=0)
        sd = Xtr.std(axis=0)
        sd[sd == 0] = 1.0
        Ztr = np.hstack([np.ones((len(Xtr), 1)), (Xtr - mu) / sd])
        Zte = np.hstack([np.ones((len(test_idx), 1)), (X[test_idx] - mu) / sd])
        G = Ztr.T @ Ztr
        G[np.arange(1, len(G)), np.arange(1, len(G))] += RIDGE
        w = np.linalg.solve(G, Ztr.T @ Ytr)
        Yte = Y[test_idx]
        ss_res = ((Yte - Zte @ w) ** 2).sum(axis=0)
        ss_tot = ((Yte - Yte.mean(axis=0)) ** 2).sum(axis=0)
        bad = ss_tot == 0
        degenerate |= bad
        r2[f] = np.where(bad, 0.0, 1.0 - ss_res / np.where(bad, 1.0, ss_tot))
    fit = ProbeFit(r2.mean(axis=0), r2, degenerate)
    if single:
        fit = ProbeFit(fit.mean_r2[:1], fit.fold_r2[:, :1], fit.degenerate[:1])
    return fit


def raw_scalar_features(examples: Sequence[TaskExample]) -> np.ndarray:
    return np.array([(e.n, e.b, e.d) for e in examples], dtype=np.float64)


def raw_scalar_baseline(examples: Sequence[TaskExample], kind: str | None = None) -> dict[str, float]:
    """CV R^2 of each target regressed on raw (n, b, d)."""
    fit = fit_probe_cv(raw_scalar_features(examples), target_matrix(examples))
    out = {k: float(r) for k, r in zip(TARGETS, fit.mean_r2)}
    return out if kind is None else {kind: out[kind]}


def gap_closed(r2_trained: float, r2_init: float) -> float:
    """Percent of the init-to-ceiling R^2 gap closed by training, clamped at 0.

    Returns NaN when the initial probe is already saturated (R^2 >= 1).
    """
    if r2_init >= 1.0:
        return float("nan")
    return 100.0 * max(0.0, (r2_trained - r2_init) / (1.0 - r2_init))


@dataclass
class ProbeRow:
    stream: str
    depth: int
    target: str
    fold_r2: list[float]
    mean_r2: float
    degenerate: bool
    init_r2: float | None = None
    gap_closed: float | None = None


def probe_all(table: ActivationTable, init_table: ActivationTable | None = None) -> list[ProbeRow]:
    Y = target_matrix(table.examples)
    rows = []
    for s in PROBE_STREAMS:
        for dp in range(table.n_depths):
            fit = fit_probe_cv(table[(s, dp)], Y)
            ifit = fit_probe_cv(init_table[(s, dp)], Y) if init_table is not None else None
            for ti, t in enumerate(TARGETS):
                row = ProbeRow(s, dp, t, [float(x) for x in fit.fold_r2[:, ti]], float(fit.mean_r2[ti]),
                               bool(fit.degenerate[ti]))
                if ifit is not None:
                    row.init_r2 = float(ifit.mean_r2[ti])
                    row.gap_closed = gap_closed(row.mean_r2, row.init_r2)
                rows.append(row)
    return rows


def write_probe_csv(rows: Sequence[ProbeRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# depth 0 = input residual; depth k = post-block k-1\n")
        w = csv.writer(fh)
        w.writerow(["stream", "depth", "target", "fold1", "fold2", "fold3", "fold4", "fold5",
                    "mean_r2", "init_r2", "gap_closed", "flag"])
        for r in rows:
            gc = "" if r.gap_closed is None else ("saturated" if np.isnan(r.gap_closed) else f"{r.gap_closed:.4f}")
            w.writerow([r.stream, r.depth, r.target, *(f"{x:.6f}" for x in r.fold_r2), f"{r.mean_r2:.6f}",
                        "" if r.init_r2 is None else f"{r.init_r2:.6f}", gc,
                        "constant_target" if r.degenerate else ""])


def read_probe_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
