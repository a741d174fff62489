"""Task universe for base-digit extraction.

Each example asks for the coefficient of ``b**d`` in the base-``b`` expansion
of ``n``. Prompts look like ``N 255 B 16 D 0 O 15 E``: three tagged fields
(in any of six orders), the output marker, a two-digit answer and an end
token.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import rng as rng_mod

N_MAX = 999
B_MIN, B_MAX = 2, 30
D_CAP = 9

SEQ_LEN = 13
PROMPT_LEN = 10  # through the O marker

SYMBOLS: tuple[str, ...] = tuple("0123456789") + ("N", "B", "D", "O", "E")
TOKEN_ID = {s: i for i, s in enumerate(SYMBOLS)}
VOCAB_SIZE = len(SYMBOLS)

# Canonical layout: N_tag N_h N_t N_o B_tag B_t B_o D_tag D_o O d1 d2 E
STREAMS: tuple[str, ...] = (
    "N_tag", "N_hundreds", "N_tens", "N_ones",
    "B_tag", "B_tens", "B_ones",
    "D_tag", "D_ones",
    "O[0]", "O[1]", "O[2]", "E",
)
POS = {s: i for i, s in enumerate(STREAMS)}
PROMPT_STREAMS = STREAMS[:9]

_FIELD_STREAMS = {
    "N": ("N_tag", "N_hundreds", "N_tens", "N_ones"),
    "B": ("B_tag", "B_tens", "B_ones"),
    "D": ("D_tag", "D_ones"),
}

SPLITS = ("train", "validation", "test")


def extract_digit(n: int, b: int, d: int) -> int:
    """Coefficient of ``b**d`` in the base-``b`` expansion of ``n``."""
    if b < 2:
        raise ValueError(f"base must be >= 2, got {b}")
    if n < 0 or d < 0:
        raise ValueError(f"n and d must be non-negative, got n={n}, d={d}")
    return (n // b**d) % b


def highest_position(n: int, b: int) -> int:
    """Index of the most significant base-``b`` digit of ``n`` (0 for n < b)."""
    p = 0
    while n >= b ** (p + 1):
        p += 1
    return p


@dataclass(frozen=True, order=True)
class TaskExample:
    n: int
    b: int
    d: int
    answer: int
    in_range: bool = True

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.n, self.b, self.d)

    @property
    def answer_digits(self) -> tuple[int, int]:
        return divmod(self.answer, 10)

    def __str__(self) -> str:
        return f"N {self.n:03d} B {self.b:02d} D {self.d} O {self.answer:02d} E"


def make_example(n: int, b: int, d: int) -> TaskExample:
    in_range = d <= highest_position(n, b)
    return TaskExample(n, b, d, extract_digit(n, b, d) if in_range else 0, in_range)


def enumerate_examples() -> list[TaskExample]:
    """Every (n, b, d) query in the domain, sorted by (n, b, d).

    In-range positions run 0..p plus one out-of-range query at p+1 (answer 00).
    Queries with d > 9 are dropped, which only removes the out-of-range query
    for b=2, n >= 512.
    """
    out = []
    for n in range(N_MAX + 1):
        for b in range(B_MIN, B_MAX + 1):
            p = highest_position(n, b)
            for d in range(min(p + 1, D_CAP) + 1):
                out.append(make_example(n, b, d))
    return out


# -- field permutations ------------------------------------------------------

@dataclass(frozen=True)
class FieldPermutation:
    order: tuple[str, str, str] = ("N", "B", "D")

    def __post_init__(self):
        if sorted(self.order) != ["B", "D", "N"]:
            raise ValueError(f"not a permutation of N, B, D: {self.order}")

    @property
    def name(self) -> str:
        return "".join(self.order)


CANONICAL = FieldPermutation()
PERMUTATIONS: tuple[FieldPermutation, ...] = tuple(
    FieldPermutation(p) for p in itertools.permutations(("N", "B", "D"))
)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    labels: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, label: str) -> int:
        return self.labels.index(label)

    def text(self) -> str:
        return " ".join(SYMBOLS[i] for i in self.ids)


def _field_tokens(example: TaskExample, name: str) -> list[str]:
    if name == "N":
        return ["N", *f"{example.n:03d}"]
    if name == "B":
        return ["B", *f"{example.b:02d}"]
    return ["D", str(example.d)]


def render_tokens(
    example: TaskExample,
    perm: FieldPermutation = CANONICAL,
    include_answer: bool = True,
) -> TokenSequence:
    if not 0 <= example.d <= D_CAP:
        raise ValueError(f"d must be a single character, got {example.d}")
    syms: list[str] = []
    labels: list[str] = []
    for f in perm.order:
        syms += _field_tokens(example, f)
        labels += _FIELD_STREAMS[f]
    syms.append("O")
    labels.append("O[0]")
    if include_answer:
        syms += [*f"{example.answer:02d}", "E"]
        labels += ["O[1]", "O[2]", "E"]
    return TokenSequence(tuple(TOKEN_ID[s] for s in syms), tuple(labels))


def parse_tokens(ids: Sequence[int]) -> tuple[int, int, int, int | None]:
    """Recover (n, b, d, answer) from a rendered sequence in any field order.

    ``answer`` is None when the sequence stops at the O marker.
    """
    syms = [SYMBOLS[i] for i in ids]
    o = syms.index("O")
    vals = {}
    i = 0
    widths = {"N": 3, "B": 2, "D": 1}
    while i < o:
        tag = syms[i]
        w = widths[tag]
        vals[tag] = int("".join(syms[i + 1:i + 1 + w]))
        i += 1 + w
    answer = int("".join(syms[o + 1:o + 3])) if len(syms) >= o + 3 else None
    return vals["N"], vals["B"], vals["D"], answer


# -- splits ------------------------------------------------------------------

@dataclass(frozen=True)
class SplitInfo:
    seed: int
    val_n: frozenset[int]
    test_n: frozenset[int]
    val_b: frozenset[int]
    test_b: frozenset[int]
    policy: str = "by_NB_intersection"
    fractions: dict = field(default_factory=lambda: {"n": 0.10, "b": 0.20}, compare=False)

    def to_json(self) -> dict:
        return {
            "format": "digitlab.split_info/1",
            "seed": self.seed,
            "policy": self.policy,
            "fractions": self.fractions,
            "val_n": sorted(self.val_n),
            "test_n": sorted(self.test_n),
            "val_b": sorted(self.val_b),
            "test_b": sorted(self.test_b),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitInfo":
        return cls(
            seed=int(obj["seed"]),
            val_n=frozenset(obj["val_n"]),
            test_n=frozenset(obj["test_n"]),
            val_b=frozenset(obj["val_b"]),
            test_b=frozenset(obj["test_b"]),
            policy=obj.get("policy", "by_NB_intersection"),
            fractions=obj.get("fractions", {"n": 0.10, "b": 0.20}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SplitInfo":
        return cls.from_json(json.loads(Path(path).read_text()))


def make_split(seed: int) -> SplitInfo:
    """Sample held-out N and B values from the seed's split stream.

    Takes 10% of the 1000 N values and 20% of the 29 bases (rounded down)
    for each of validation and test.
    """
    g = rng_mod.stream(seed, "split")
    ns = g.permutation(N_MAX + 1)
    bs = g.permutation(range(B_MIN, B_MAX + 1))
    k_n = int(0.10 * (N_MAX + 1))
    k_b = int(0.20 * (B_MAX - B_MIN + 1))
    return SplitInfo(
        seed=seed,
        val_n=frozenset(int(x) for x in ns[:k_n]),
        test_n=frozenset(int(x) for x in ns[k_n:2 * k_n]),
        val_b=frozenset(int(x) for x in bs[:k_b]),
        test_b=frozenset(int(x) for x in bs[k_b:2 * k_b]),
    )


def assign_split(example: TaskExample, info: SplitInfo) -> str:
    if example.n in info.val_n and example.b in info.val_b:
        return "validation"
    if example.n in info.test_n and example.b in info.test_b:
        return "test"
    return "train"


def split_examples(
    info: SplitInfo, examples: Iterable[TaskExample] | None = None
) -> dict[str, list[TaskExample]]:
    out: dict[str, list[TaskExample]] = {s: [] for s in SPLITS}
    for ex in enumerate_examples() if examples is None else examples:
        out[assign_split(ex, info)].append(ex)
    return out


def write_dataset(examples: Iterable[TaskExample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(f"{ex}\n")


def read_dataset(path: str | Path) -> list[TaskExample]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        ids = [TOKEN_ID[c] for c in line.replace(" ", "")]
        n, b, d, _ = parse_tokens(ids)
        out.append(make_example(n, b, d))
    return out
