import csv

import numpy as np
import pytest

from conftest import TINY
from digitlab import tensor as T
from digitlab.checkpoint import load_state, read_container, save_state, write_container
from digitlab.model import logits_np
from digitlab.optim import AdamW, linear_warmup_lr, warmup_steps
from digitlab.taskgen import CANONICAL, enumerate_examples, make_example, make_split, render_tokens
from digitlab import trainer
from digitlab.trainer import (LOSS_POSITIONS, TrainConfig, batch_loss, expand_training_set, rebuild_at_init,
                              train)


# -- optimiser -------------------------------------------------------------------

def one_param(x0, g):
    p = T.Tensor(np.array([x0]), requires_grad=True, dtype=np.float64)
    p.grad = np.array([g])
    return p


def test_adamw_decay_is_decoupled():
    # zero gradient: only the decay moves the weight, and the moments stay zero
    p = one_param(1.0, 0.0)
    opt = AdamW({"w": p}, lr=0.1, weight_decay=0.1)
    opt.step()
    assert p.data[0] == pytest.approx(0.99, abs=1e-15)
    assert opt.m["w"][0] == 0 and opt.v["w"][0] == 0
    # an L2-coupled optimiser would have taken a full normalised step to 0.9 here


def test_adamw_first_step_analytic():
    p = one_param(1.0, 0.5)
    opt = AdamW({"w": p}, lr=0.1, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1)
    opt.step()
    assert p.data[0] == pytest.approx(0.99 - 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-14)


def test_warmup_endpoints():
    total = 338 * 1000
    w = warmup_steps(total, 0.05)
    assert w == 16_900
    assert linear_warmup_lr(0, 5e-4, w) == pytest.approx(5e-4 / w)
    assert linear_warmup_lr(w - 1, 5e-4, w) == 5e-4
    assert linear_warmup_lr(10 * w, 5e-4, w) == 5e-4
    lrs = [linear_warmup_lr(s, 5e-4, w) for s in range(0, w, 997)]
    assert all(a < b for a, b in zip(lrs, lrs[1:]))


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path, tiny_state):
    st = tiny_state.copy()
    st.meta = {"best_epoch": 3, "note": "x"}
    save_state(st, tmp_path / "a.ckpt")
    back = load_state(tmp_path / "a.ckpt")
    assert back.config == st.config and back.init_seed == st.init_seed and back.meta == st.meta
    for k, v in st.params.items():
        assert back.params[k].data.dtype == v.data.dtype
        np.testing.assert_array_equal(back.params[k].data, v.data)
    save_state(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_container_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        read_container(tmp_path / "bad")
    write_container(tmp_path / "ok", {"k": 1}, {"a": np.arange(5, dtype=np.int16)})
    h, arrs = read_container(tmp_path / "ok")
    assert h["k"] == 1 and arrs["a"].dtype == np.int16


# -- trainer pieces --------------------------------------------------------------

def test_expansion():
    ex = make_example(255, 16, 0)
    rows = expand_training_set([ex])
    assert rows.shape == (6, 13)
    assert len({tuple(r) for r in rows}) == 6
    assert (rows[:, 10:] == rows[0, 10:]).all()
    assert tuple(rows[0]) == render_tokens(ex, CANONICAL).ids
    assert expand_training_set([ex, make_example(3, 2, 1)]).shape == (12, 13)


def test_rebuild_at_init_deterministic():
    a, b = rebuild_at_init(42, TINY), rebuild_at_init(42, TINY)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_loss_counts_only_answer_and_end(tiny_state):
    ids = np.array([render_tokens(make_example(255, 16, 0)).ids, render_tokens(make_example(7, 3, 2)).ids])
    logits = logits_np(tiny_state, ids[:, :12])
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    want = -np.mean([logp[i, p, ids[i, p + 1]] for i in range(2) for p in LOSS_POSITIONS])
    assert float(batch_loss(tiny_state, ids).data) == pytest.approx(want, rel=1e-5)
    assert LOSS_POSITIONS == (9, 10, 11)


@pytest.fixture(scope="module")
def small_universe():
    info = make_split(0)
    ns = set(sorted(info.val_n)[:15]) | set(range(0, 1000, 97))
    bs = set(sorted(info.val_b)[:3]) | {2, 10}
    return [e for e in enumerate_examples() if e.n in ns and e.b in bs]


def _tiny_cfg(epochs):
    return TrainConfig(epochs=epochs, batch_size=128, micro_batch=64, log_every=0)


def test_training_is_deterministic_and_resumable(tmp_path, small_universe, monkeypatch):
    a = train(0, _tiny_cfg(2), TINY, tmp_path / "a", examples=small_universe)

    # interrupt run b during its second validation pass, then resume it
    real = trainer.exact_accuracy
    calls = []

    def flaky(*args, **kw):
        calls.append(1)
        if len(calls) == 2:
            raise KeyboardInterrupt
        return real(*args, **kw)

    monkeypatch.setattr(trainer, "exact_accuracy", flaky)
    with pytest.raises(KeyboardInterrupt):
        train(0, _tiny_cfg(2), TINY, tmp_path / "b", examples=small_universe)
    monkeypatch.setattr(trainer, "exact_accuracy", real)
    b1 = load_state(tmp_path / "b" / "best.ckpt")
    b = train(0, _tiny_cfg(2), TINY, tmp_path / "b", examples=small_universe)
    ma = (tmp_path / "a" / "metrics.csv").read_text()
    mb = (tmp_path / "b" / "metrics.csv").read_text()
    strip = lambda s: [r[:4] for r in csv.reader(s.splitlines())]
    assert strip(ma) == strip(mb)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    rows = list(csv.DictReader(ma.splitlines()))
    assert len(rows) == 2
    assert a.meta["best_val_exact_accuracy"] >= max(float(r["val_exact_accuracy"]) for r in rows) - 1e-3
    init = load_state(tmp_path / "a" / "init.ckpt")
    ref = rebuild_at_init(0, TINY)
    for k in ref.params:
        np.testing.assert_array_equal(init.params[k].data, ref.params[k].data)
    assert b1.meta["trained_epochs"] == 1


def test_training_reduces_loss(tmp_path, small_universe):
    train(0, TrainConfig(epochs=4, batch_size=128, micro_batch=128, log_every=0, lr=3e-3), TINY,
          tmp_path / "r", examples=small_universe)
    rows = list(csv.DictReader((tmp_path / "r" / "metrics.csv").read_text().splitlines()))
    assert float(rows[-1]["train_loss"]) < float(rows[0]["train_loss"])


def test_full_size_ten_layer_smoke():
    """A few optimiser steps of the full-width 10-layer model on a handful of sequences."""
    from digitlab.model import ModelConfig
    state = rebuild_at_init(0, ModelConfig())
    opt = AdamW(state.params, lr=5e-4)
    ids = expand_training_set([make_example(255, 16, 0), make_example(999, 30, 1)])
    losses = []
    for step in range(3):
        opt.zero_grad()
        with T.Tape() as tape:
            loss = batch_loss(state, ids, train=True, drop_rng=np.random.default_rng(step))
        tape.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    assert all(np.isfinite(losses)) and losses[-1] < losses[0]
