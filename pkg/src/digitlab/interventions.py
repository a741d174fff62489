"""Attention ablation of the D_ones -> output route and key/value route patching."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evalkit import EVAL_BATCH, exact_accuracy, greedy_decode, prompt_ids, target_ids
from .model import HookPlan, KVOverride, ModelState, forward
from .rng import ANALYSIS_SEED
from .taskgen import POS, TaskExample

D_ONES = POS["D_ones"]
O0, O1 = POS["O[0]"], POS["O[1]"]
OUTPUT_ROWS = (O0, O1)


def ablation_plan(layers: Iterable[int]) -> HookPlan:
    """Mask O[0]->D_ones and O[1]->D_ones attention logits at ``layers``."""
    return HookPlan().with_masks((l, q, D_ONES) for l in sorted(layers) for q in OUTPUT_ROWS)


def run_ablation(state: ModelState, layers: Iterable[int], examples: Sequence[TaskExample]) -> float:
    return exact_accuracy(state, examples, ablation_plan(layers))


def sweep_sets(n_layers: int, direction: str) -> list[tuple[int, ...]]:
    if direction == "forward":
        return [tuple(range(k + 1)) for k in range(n_layers)]
    if direction == "reverse":
        return [tuple(range(n_layers - 1 - k, n_layers)) for k in range(n_layers)]
    if direction == "full":
        return [(), tuple(range(n_layers))]
    raise ValueError(f"unknown sweep direction {direction!r}")


def sweep(state: ModelState, direction: str, examples: Sequence[TaskExample]) -> list[tuple[tuple[int, ...], float]]:
    return [(layers, run_ablation(state, layers, examples)) for layers in sweep_sets(state.config.n_layers, direction)]


# -- patching --------------------------------------------------------------------

@dataclass(frozen=True)
class PatchPair:
    source: TaskExample
    donor: TaskExample
    field: str                      # which of N, B, D differs
    layers: tuple[int, ...]


def _differing_field(a: TaskExample, b: TaskExample) -> str | None:
    diff = [f for f, x, y in (("N", a.n, b.n), ("B", a.b, b.b), ("D", a.d, b.d)) if x != y]
    return diff[0] if len(diff) == 1 else None


def build_pairs_layer1(test: Sequence[TaskExample], layer: int = 1) -> list[PatchPair]:
    """All ordered pairs sharing (n, b) with different d and different answers."""
    groups: dict[tuple[int, int], list[TaskExample]] = defaultdict(list)
    for ex in sorted(test):
        groups[(ex.n, ex.b)].append(ex)
    pairs = []
    for key in sorted(groups):
        g = groups[key]
        for s in g:
            for d in g:
                if s.d != d.d and s.answer != d.answer:
                    pairs.append(PatchPair(s, d, "D", (layer,)))
    return pairs


def build_pairs_fullroute(
    test: Sequence[TaskExample],
    clean_correct: dict[tuple[int, int, int], bool],
    n_layers: int,
    rng_seed: int = ANALYSIS_SEED,
) -> dict[str, list[PatchPair]]:
    """One donor per field (N, B, D) for every clean-correct source.

    Donors come from the same split, differ from the source in exactly that
    field and have a different answer. Sources missing a donor for any field
    are dropped from all three conditions.
    """
    test = sorted(test)
    by_bd: dict = defaultdict(list)
    by_nd: dict = defaultdict(list)
    by_nb: dict = defaultdict(list)
    for ex in test:
        by_bd[(ex.b, ex.d)].append(ex)
        by_nd[(ex.n, ex.d)].append(ex)
        by_nb[(ex.n, ex.b)].append(ex)
    g = np.random.default_rng(rng_seed)
    layers = tuple(range(n_layers))
    out: dict[str, list[PatchPair]] = {"N": [], "B": [], "D": []}
    for src in test:
        if not clean_correct.get(src.key, False):
            continue
        cands = {
            "N": [e for e in by_bd[(src.b, src.d)] if e.n != src.n and e.answer != src.answer],
            "B": [e for e in by_nd[(src.n, src.d)] if e.b != src.b and e.answer != src.answer],
            "D": [e for e in by_nb[(src.n, src.b)] if e.d != src.d and e.answer != src.answer],
        }
        if not all(cands.values()):
            continue
        for f in ("N", "B", "D"):
            donor = cands[f][int(g.integers(len(cands[f])))]
            out[f].append(PatchPair(src, donor, f, layers))
    return out


def donor_residuals(state: ModelState, donors: Sequence[TaskExample], layers: Sequence[int],
                    batch_size: int = EVAL_BATCH) -> dict[int, np.ndarray]:
    """Residual entering each layer at the donor's D_ones position: {layer: (n, width)}."""
    prompts = prompt_ids(donors)
    plan = HookPlan(captures=frozenset((l, D_ONES) for l in layers))
    out = {l: np.empty((len(donors), state.config.width), dtype=np.float32) for l in layers}
    for lo in range(0, len(donors), batch_size):
        _, caps = forward(state, prompts[lo:lo + batch_size], plan)
        for l in layers:
            out[l][lo:lo + batch_size] = caps[(l, D_ONES)]
    return out


def patch_plan(layers: Sequence[int], vectors: dict[int, np.ndarray]) -> HookPlan:
    return HookPlan().with_overrides(KVOverride(l, D_ONES, OUTPUT_ROWS, vectors[l]) for l in layers)


def run_patch(state: ModelState, pairs: Sequence[PatchPair]) -> list[str]:
    """Classify each patched generation as source-match, donor-match or neither.

    Pairs are grouped by their layer set and decoded in batches.
    """
    outcomes: list[str] = [""] * len(pairs)
    groups: dict[tuple[int, ...], list[int]] = defaultdict(list)
    for i, p in enumerate(pairs):
        groups[p.layers].append(i)
    for layers, idx in groups.items():
        sources = [pairs[i].source for i in idx]
        donors = [pairs[i].donor for i in idx]
        vecs = donor_residuals(state, donors, layers)
        pred = greedy_decode(state, prompt_ids(sources), patch_plan(layers, vecs), emit_end=False)
        src_t, don_t = target_ids(sources), target_ids(donors)
        for j, i in enumerate(idx):
            if (pred[j] == src_t[j]).all():
                outcomes[i] = "source-match"
            elif (pred[j] == don_t[j]).all():
                outcomes[i] = "donor-match"
            else:
                outcomes[i] = "neither"
    return outcomes


def outcome_rates(outcomes: Sequence[str]) -> dict[str, float]:
    n = len(outcomes)
    if n == 0:
        return {"n": 0, "source_exact": float("nan"), "donor_exact": float("nan"), "neither": float("nan")}
    return {
        "n": n,
        "source_exact": 100.0 * sum(o == "source-match" for o in outcomes) / n,
        "donor_exact": 100.0 * sum(o == "donor-match" for o in outcomes) / n,
        "neither": 100.0 * sum(o == "neither" for o in outcomes) / n,
    }


def write_pairs_csv(pairs: Sequence[PatchPair], outcomes: Sequence[str], path: str | Path,
                    clean_correct: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_n", "source_b", "source_d", "source_answer", "donor_n", "donor_b", "donor_d",
                    "donor_answer", "field", "layers", "source_clean_correct", "outcome"])
        for p, o in zip(pairs, outcomes):
            cc = "" if clean_correct is None else int(clean_correct.get(p.source.key, False))
            w.writerow([p.source.n, p.source.b, p.source.d, f"{p.source.answer:02d}", p.donor.n, p.donor.b,
                        p.donor.d, f"{p.donor.answer:02d}", p.field, "-".join(map(str, p.layers)), cc, o])
