"""Greedy right-to-left sparse attention-route search.

A relation ``src -> dst`` is an attention route between two stream positions
regardless of layer; masking it over layers ``0..k`` sets the pre-softmax
logit of query ``dst`` on key ``src`` to -1e9 at those layers.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .evalkit import exact_accuracy
from .model import HookPlan, ModelState
from .taskgen import POS, PROMPT_STREAMS, TaskExample

log = logging.getLogger(__name__)

OUTPUTS = ("O[0]", "O[1]")
FIRST_DROPS = (0.01, 0.02, 0.05)
LATER_FRACS = (0.10, 0.20, 0.30)
DEFAULT_THRESHOLDS = (0.02, 0.20)

Relation = tuple[str, str]


def candidate_sources(dst: str) -> list[str]:
    """Admissible sources for a destination, in canonical order."""
    if dst == "O[0]":
        return list(PROMPT_STREAMS)
    if dst == "O[1]":
        return list(PROMPT_STREAMS) + ["O[0]"]
    if dst in PROMPT_STREAMS:
        return list(PROMPT_STREAMS[:POS[dst]])
    raise ValueError(f"{dst!r} is not a circuit destination")


def relation_edges(rel: Relation, layers: Sequence[int]) -> list[tuple[int, int, int]]:
    src, dst = rel
    return [(l, POS[dst], POS[src]) for l in layers]


def retained_prefix(acc_at: Callable[[int], float], baseline: float, max_depth: int,
                    first_drop: float, later_frac: float) -> int | None:
    """Apply the retention rule to a lazily evaluated prefix-ablation curve.

    ``acc_at(k)`` is accuracy (as a fraction) with layers 0..k masked. The
    relation is retained at the first k whose drop from ``baseline`` exceeds
    ``first_drop``; it then extends while each further prefix adds a drop
    larger than ``later_frac`` times that first drop, stopping after two
    consecutive failed extensions. Returns k* or None.
    """
    k = 0
    first = None
    while k <= max_depth:
        drop = baseline - acc_at(k)
        if drop > first_drop:
            first = drop
            break
        k += 1
    if first is None:
        return None
    best = k
    prev = acc_at(k)
    fails = 0
    for j in range(k + 1, max_depth + 1):
        acc = acc_at(j)
        if prev - acc > later_frac * first:
            best = j
            fails = 0
        else:
            fails += 1
            if fails == 2:
                break
        prev = acc
    return best


def scan_relation(scorer: "PrefixScorer", rel: Relation, max_depth: int,
                  thresholds: tuple[float, float] = DEFAULT_THRESHOLDS) -> int | None:
    """Retained prefix depth of one route; each probe masks only ``rel``."""
    return retained_prefix(lambda j: scorer(rel, j), scorer.baseline, max_depth, *thresholds)


@dataclass
class CircuitSpec:
    n_layers: int
    thresholds: tuple[float, float]
    relations: dict[Relation, int] = field(default_factory=dict)      # rel -> k*
    provenance: dict[Relation, str] = field(default_factory=dict)     # rel -> downstream stream
    destinations: dict[str, int] = field(default_factory=dict)        # scanned dst -> max depth
    baseline: float | None = None
    seed: int | None = None

    @property
    def relation_set(self) -> frozenset[Relation]:
        return frozenset(self.relations)

    def candidate_relations(self) -> list[Relation]:
        return [(s, d) for d in self.destinations for s in candidate_sources(d)]

    @property
    def layer_edges(self) -> int:
        return sum(k + 1 for k in self.relations.values())

    def fractions(self) -> dict[str, float]:
        cands = self.candidate_relations()
        cand_edges = sum(self.destinations[d] + 1 for _, d in cands)
        return {
            "retained_relations": len(self.relations),
            "candidate_relations": len(cands),
            "relation_fraction": 100.0 * len(self.relations) / len(cands) if cands else float("nan"),
            "retained_layer_edges": self.layer_edges,
            "candidate_layer_edges": cand_edges,
            "layer_edge_fraction": 100.0 * self.layer_edges / cand_edges if cand_edges else float("nan"),
        }

    def to_json(self) -> dict:
        return {
            "format": "digitlab.circuit/1",
            "n_layers": self.n_layers,
            "thresholds": {"first_drop": self.thresholds[0], "later_frac": self.thresholds[1]},
            "seed": self.seed,
            "baseline_val_accuracy": self.baseline,
            "destinations": self.destinations,
            "relations": [
                {"source": s, "destination": d, "layers": [0, k], "via": self.provenance.get((s, d), d)}
                for (s, d), k in sorted(self.relations.items(), key=lambda kv: (POS[kv[0][1]], POS[kv[0][0]]))
            ],
            "summary": self.fractions(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CircuitSpec":
        th = obj["thresholds"]
        spec = cls(obj["n_layers"], (th["first_drop"], th["later_frac"]), seed=obj.get("seed"),
                   baseline=obj.get("baseline_val_accuracy"))
        spec.destinations = {k: int(v) for k, v in obj["destinations"].items()}
        for r in obj["relations"]:
            rel = (r["source"], r["destination"])
            spec.relations[rel] = int(r["layers"][1])
            spec.provenance[rel] = r.get("via", r["destination"])
        return spec

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CircuitSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


class PrefixScorer:
    """Validation accuracy (fraction) under single-relation prefix masks, memoised.

    Holds only the validation examples, so discovery cannot see the test split.
    """

    def __init__(self, state: ModelState, val: Sequence[TaskExample]):
        self.state = state
        self.val = list(val)
        self.cache: dict[tuple[Relation, int], float] = {}
        self._baseline: float | None = None
        self.evaluations = 0

    @property
    def baseline(self) -> float:
        if self._baseline is None:
            self._baseline = exact_accuracy(self.state, self.val) / 100.0
        return self._baseline

    def __call__(self, rel: Relation, k: int) -> float:
        key = (rel, k)
        if key not in self.cache:
            plan = HookPlan().with_masks(relation_edges(rel, range(k + 1)))
            self.cache[key] = exact_accuracy(self.state, self.val, plan) / 100.0
            self.evaluations += 1
        return self.cache[key]


def greedy_search(scorer: PrefixScorer, thresholds: tuple[float, float] = DEFAULT_THRESHOLDS,
                  seed: int | None = None) -> CircuitSpec:
    """Grow the circuit backward from the two output streams.

    Destinations are processed right to left (descending position), so every
    downstream relation that could retain a stream has been scanned before
    the stream itself is scanned as a destination; its scan depth is then the
    largest k* among those relations.
    """
    L = scorer.state.config.n_layers
    spec = CircuitSpec(L, thresholds, seed=seed, baseline=scorer.baseline)
    depth = {d: L - 1 for d in OUTPUTS}
    heap = [(-POS[d], d) for d in OUTPUTS]
    heapq.heapify(heap)
    seen = set(OUTPUTS)
    while heap:
        _, dst = heapq.heappop(heap)
        spec.destinations[dst] = depth[dst]
        for src in candidate_sources(dst):
            rel = (src, dst)
            k = scan_relation(scorer, rel, depth[dst], thresholds)
            if k is None:
                continue
            spec.relations[rel] = k
            spec.provenance[rel] = dst
            log.info("retained %s -> %s layers 0-%d", src, dst, k)
            if src in OUTPUTS:
                continue
            depth[src] = max(depth.get(src, -1), k)
            if src not in seen:
                seen.add(src)
                heapq.heappush(heap, (-POS[src], src))
    return spec


def kept_only_plan(spec: CircuitSpec) -> HookPlan:
    """Mask every admissible incoming route of each scanned destination outside its retained prefix."""
    edges = []
    for dst in spec.destinations:
        for src in candidate_sources(dst):
            k = spec.relations.get((src, dst), -1)
            edges += relation_edges((src, dst), range(k + 1, spec.n_layers))
    return HookPlan().with_masks(edges)


def kept_only_eval(state: ModelState, spec: CircuitSpec, test: Sequence[TaskExample]) -> float:
    return exact_accuracy(state, test, kept_only_plan(spec))


def iou(sets: Sequence[frozenset]) -> float:
    union = frozenset().union(*sets)
    if not union:
        return 100.0
    inter = frozenset.intersection(*map(frozenset, sets))
    return 100.0 * len(inter) / len(union)


def overlap_stats(specs: Sequence[CircuitSpec]) -> dict:
    if len(specs) < 2:
        raise ValueError("overlap needs at least two circuits")
    sets = [s.relation_set for s in specs]
    shared = frozenset.intersection(*sets)
    union = frozenset().union(*sets)
    return {
        "iou": iou(sets),
        "n_shared": len(shared),
        "n_union": len(union),
        "shared": [
            {"source": s, "destination": d, "layers_per_seed": [spec.relations[(s, d)] for spec in specs]}
            for s, d in sorted(shared, key=lambda r: (POS[r[1]], POS[r[0]]))
        ],
        "not_shared": sorted(f"{s}->{d}" for s, d in union - shared),
    }


def threshold_sweep(scorer: PrefixScorer, seed: int | None = None) -> list[CircuitSpec]:
    """Greedy searches over the 3x3 threshold grid, sharing one accuracy cache."""
    return [greedy_search(scorer, (f, g), seed=seed) for f, g in itertools.product(FIRST_DROPS, LATER_FRACS)]


def sweep_overlap(sweep_specs: Sequence[CircuitSpec], shared: frozenset) -> dict:
    """Compare each threshold-specific relation set with a reference shared set."""
    rows = []
    for sp in sweep_specs:
        rs = sp.relation_set
        rows.append({
            "seed": sp.seed,
            "first_drop": sp.thresholds[0],
            "later_frac": sp.thresholds[1],
            "n_relations": len(rs),
            "iou_with_shared": iou([rs, shared]),
            "contains_all_shared": shared <= rs,
            "extra": sorted(f"{s}->{d}" for s, d in rs - shared),
        })
    return {
        "mean_overlap": float(np.mean([r["iou_with_shared"] for r in rows])) if rows else float("nan"),
        "contains_all": sum(r["contains_all_shared"] for r in rows),
        "checks": len(rows),
        "rows": rows,
    }


def write_edge_list(spec: CircuitSpec, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "destination", "first_layer", "last_layer", "via"])
        for r in spec.to_json()["relations"]:
            w.writerow([r["source"], r["destination"], r["layers"][0], r["layers"][1], r["via"]])


def write_sweep_csv(overlap: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "first_drop", "later_frac", "n_relations", "iou_with_shared", "contains_all_shared", "extra"])
        for r in overlap["rows"]:
            w.writerow([r["seed"], r["first_drop"], r["later_frac"], r["n_relations"],
                        f"{r['iou_with_shared']:.4f}", int(r["contains_all_shared"]), ";".join(r["extra"])])

