"""GPT-style decoder-only transformer with declarative intervention hooks.

Blocks are pre-norm: ``x + attn(ln1(x))`` then ``x + ff(ln2(x))``, with a
final layer norm before an untied unembedding. Residual depths are numbered
0 (embeddings) through ``n_layers`` (after the last block); the residual
*entering* block ``L`` is depth ``L``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .taskgen import SEQ_LEN, VOCAB_SIZE

MASK_VALUE = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 10
    width: int = 384
    n_heads: int = 12
    ff_width: int = 1536
    dropout: float = 0.01
    max_len: int = SEQ_LEN
    vocab_size: int = VOCAB_SIZE
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.width % self.n_heads:
            raise ValueError(f"width {self.width} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        return cls(**obj)


COMPANION = ModelConfig(n_layers=5)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    W, F = cfg.width, cfg.ff_width
    shapes = {"tok_emb": (cfg.vocab_size, W), "pos_emb": (cfg.max_len, W)}
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1.g": (W,), p + "ln1.b": (W,),
            p + "attn.wq": (W, W), p + "attn.bq": (W,),
            p + "attn.wk": (W, W), p + "attn.bk": (W,),
            p + "attn.wv": (W, W), p + "attn.bv": (W,),
            p + "attn.wo": (W, W), p + "attn.bo": (W,),
            p + "ln2.g": (W,), p + "ln2.b": (W,),
            p + "ff.w1": (W, F), p + "ff.b1": (F,),
            p + "ff.w2": (F, W), p + "ff.b2": (W,),
        })
    shapes.update({"lnf.g": (W,), "lnf.b": (W,), "unembed.w": (W, cfg.vocab_size), "unembed.b": (cfg.vocab_size,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, T.Tensor]:
    """normal(0, 0.02) weights, zero biases/shifts, unit layer-norm scales."""
    g = rng_mod.stream(seed, "init")
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = g.normal(0.0, INIT_STD, size=shape)
        params[name] = T.Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, T.Tensor]
    init_seed: int
    meta: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, cfg: ModelConfig, seed: int) -> "ModelState":
        return cls(cfg, init_params(cfg, seed), seed, {"trained_epochs": 0})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "ModelState":
        params = {k: T.Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return ModelState(self.config, params, self.init_seed, dict(self.meta))


# -- hook plans ------------------------------------------------------------------

@dataclass(frozen=True)
class KVOverride:
    """Route query ``rows`` at ``layer`` to K/V projected from ``vector``
    instead of the residual at ``key_pos``.

    ``vector`` is the replacement residual entering ``layer``: shape (width,)
    or (batch, width).
    """

    layer: int
    key_pos: int
    rows: tuple[int, ...]
    vector: np.ndarray = field(compare=False, repr=False)


@dataclass(frozen=True)
class HookPlan:
    captures: frozenset = frozenset()          # {(depth, pos)}
    logit_masks: tuple = ()                    # ((layer, q, k, value), ...)
    kv_overrides: tuple = ()                   # (KVOverride, ...)

    @property
    def is_passive(self) -> bool:
        return not self.logit_masks and not self.kv_overrides

    def with_captures(self, points: Iterable[tuple[int, int]]) -> "HookPlan":
        return HookPlan(self.captures | frozenset(points), self.logit_masks, self.kv_overrides)

    def with_masks(self, edges: Iterable[tuple[int, int, int]], value: float = MASK_VALUE) -> "HookPlan":
        new = tuple((l, q, k, value) for l, q, k in edges)
        return HookPlan(self.captures, self.logit_masks + new, self.kv_overrides)

    def with_overrides(self, overrides: Iterable[KVOverride]) -> "HookPlan":
        return HookPlan(self.captures, self.logit_masks, self.kv_overrides + tuple(overrides))

    def validate(self, cfg: ModelConfig) -> None:
        for depth, pos in self.captures:
            if not (0 <= depth <= cfg.n_layers and 0 <= pos < cfg.max_len):
                raise ValueError(f"capture point out of range: depth={depth}, pos={pos}")
        for l, q, k, _ in self.logit_masks:
            if not (0 <= l < cfg.n_layers and 0 <= q < cfg.max_len and 0 <= k < cfg.max_len):
                raise ValueError(f"mask out of range: layer={l}, q={q}, k={k}")
        for ov in self.kv_overrides:
            if not (0 <= ov.layer < cfg.n_layers and 0 <= ov.key_pos < cfg.max_len):
                raise ValueError(f"override out of range: layer={ov.layer}, key={ov.key_pos}")
            for r in ov.rows:
                if not r < cfg.max_len:
                    raise ValueError(f"override row {r} out of range")
                if r < ov.key_pos:
                    raise ValueError(f"override row {r} precedes key position {ov.key_pos} (non-causal)")
            if np.shape(ov.vector)[-1] != cfg.width:
                raise ValueError(f"override vector width {np.shape(ov.vector)} != {cfg.width}")


EMPTY_PLAN = HookPlan()


def residual_capture_points(cfg: ModelConfig) -> list[tuple[int, str]]:
    pts = [(0, "input residual (token + position embedding)")]
    pts += [(l + 1, f"post-block {l}") for l in range(cfg.n_layers)]
    return pts


# -- forward ---------------------------------------------------------------------

def _layer_masks(plan: HookPlan, n_layers: int, seq: int, dtype) -> list[np.ndarray]:
    causal = np.triu(np.full((seq, seq), MASK_VALUE, dtype=dtype), k=1)
    masks = [causal] * n_layers
    for l, q, k, v in plan.logit_masks:
        # entries for positions not yet generated are inert on this step
        if q >= seq or k >= seq:
            continue
        if masks[l] is causal:
            masks[l] = causal.copy()
        masks[l][q, k] += v
    return masks


def _attention(state: ModelState, x: T.Tensor, l: int, mask: np.ndarray,
               overrides: list[KVOverride], train: bool, drop_rng) -> T.Tensor:
    cfg = state.config
    P = state.params
    p = f"blocks.{l}."
    B, S, W = x.shape
    H, Dh = cfg.n_heads, cfg.head_dim

    h = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"], cfg.ln_eps)

    def heads(name: str) -> T.Tensor:
        y = T.add(T.matmul(h, P[p + "attn.w" + name]), P[p + "attn.b" + name])
        return T.transpose(T.reshape(y, (B, S, H, Dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scale = 1.0 / np.sqrt(Dh)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)

    active = [ov for ov in overrides if ov.key_pos < S]
    patches = []
    if active:
        if scores.requires_grad:
            raise RuntimeError("kv overrides are analysis-only and cannot be recorded on a tape")
        for ov in active:
            rows = [r for r in ov.rows if r < S]
            if not rows:
                continue
            rep = np.asarray(ov.vector, dtype=x.dtype)
            rep = np.broadcast_to(rep, (B, W)) if rep.ndim == 1 else rep
            hr = T.layer_norm(T.Tensor(rep), P[p + "ln1.g"], P[p + "ln1.b"], cfg.ln_eps).data
            kr = (hr @ P[p + "attn.wk"].data + P[p + "attn.bk"].data).reshape(B, H, Dh)
            vr = (hr @ P[p + "attn.wv"].data + P[p + "attn.bv"].data).reshape(B, H, Dh)
            for r in rows:
                scores.data[:, :, r, ov.key_pos] = (q.data[:, :, r, :] * kr).sum(-1) * scores.dtype.type(scale)
            patches.append((rows, ov.key_pos, vr))

    att = T.softmax(scores, mask)
    att = T.dropout(att, cfg.dropout, drop_rng, train)
    out = T.matmul(att, v)
    for rows, kp, vr in patches:
        delta = vr - v.data[:, :, kp, :]
        for r in rows:
            out.data[:, :, r, :] += att.data[:, :, r, kp, None] * delta
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, S, W))
    return T.add(T.matmul(out, P[p + "attn.wo"]), P[p + "attn.bo"])


def _feedforward(state: ModelState, x: T.Tensor, l: int, train: bool, drop_rng) -> T.Tensor:
    cfg = state.config
    P = state.params
    p = f"blocks.{l}."
    h = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"], cfg.ln_eps)
    h = T.gelu(T.add(T.matmul(h, P[p + "ff.w1"]), P[p + "ff.b1"]))
    h = T.add(T.matmul(h, P[p + "ff.w2"]), P[p + "ff.b2"])
    return T.dropout(h, cfg.dropout, drop_rng, train)


def forward(
    state: ModelState,
    ids: np.ndarray,
    plan: HookPlan = EMPTY_PLAN,
    train: bool = False,
    drop_rng: np.random.Generator | None = None,
) -> tuple[T.Tensor, dict[tuple[int, int], np.ndarray]]:
    """Run the model on a (batch, seq) id array.

    Returns logits (batch, seq, vocab) and the requested captures as
    ``{(depth, pos): (batch, width) array}``. Plan entries that reference
    positions beyond the current sequence length are inert, so one plan can
    drive every step of autoregressive decoding.
    """
    cfg = state.config
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] > cfg.max_len:
        raise ValueError(f"ids must be (batch, seq<= {cfg.max_len}), got {ids.shape}")
    if train and cfg.dropout > 0 and drop_rng is None:
        raise ValueError("training forward needs a dropout rng")
    plan.validate(cfg)
    P = state.params
    B, S = ids.shape

    x = T.add(T.embedding(P["tok_emb"], ids), T.embedding(P["pos_emb"], np.arange(S)))
    caps: dict[tuple[int, int], np.ndarray] = {}

    def capture(depth: int, arr: np.ndarray):
        for d, pos in plan.captures:
            if d == depth and pos < S:
                caps[(d, pos)] = arr[:, pos, :].copy()

    capture(0, x.data)
    masks = _layer_masks(plan, cfg.n_layers, S, x.dtype)
    by_layer: dict[int, list[KVOverride]] = {}
    for ov in plan.kv_overrides:
        by_layer.setdefault(ov.layer, []).append(ov)
    for l in range(cfg.n_layers):
        x = T.add(x, _attention(state, x, l, masks[l], by_layer.get(l, []), train, drop_rng))
        x = T.add(x, _feedforward(state, x, l, train, drop_rng))
        capture(l + 1, x.data)
    x = T.layer_norm(x, P["lnf.g"], P["lnf.b"], cfg.ln_eps)
    logits = T.add(T.matmul(x, P["unembed.w"]), P["unembed.b"])
    return logits, caps


def logits_np(state: ModelState, ids: np.ndarray, plan: HookPlan = EMPTY_PLAN) -> np.ndarray:
    return forward(state, ids, plan)[0].data
