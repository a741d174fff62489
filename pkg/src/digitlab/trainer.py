"""Training loop: permutation-expanded batches, AdamW, best-validation checkpoint."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import rng as rng_mod
from . import tensor as T
from .evalkit import exact_accuracy
from .model import ModelConfig, ModelState, forward
from .optim import AdamW, linear_warmup_lr, warmup_steps
from .taskgen import PERMUTATIONS, PROMPT_LEN, SplitInfo, TaskExample, make_split, render_tokens, split_examples

log = logging.getLogger(__name__)

SEEDS = (0, 42, 1337)
# logits at these positions predict answer digit 1, answer digit 2 and E
LOSS_POSITIONS = (PROMPT_LEN - 1, PROMPT_LEN, PROMPT_LEN + 1)

BEST_CKPT = "best.ckpt"
INIT_CKPT = "init.ckpt"
RESUME_CKPT = "train_state.ckpt"
METRICS_CSV = "metrics.csv"
SPLIT_JSON = "split_info.json"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    warmup_fraction: float = 0.05
    batch_size: int = 2048
    epochs: int = 1000
    # gradient is accumulated over micro-batches of this size, in order
    micro_batch: int = 512
    log_every: int = 20
    # stop once validation exact accuracy reaches this (percent); None = run all epochs
    target_val_accuracy: float | None = None


def expand_training_set(examples: Sequence[TaskExample]) -> np.ndarray:
    """Render each example under all six field orders: (6 * len, 13) ids."""
    rows = [render_tokens(ex, perm).ids for ex in examples for perm in PERMUTATIONS]
    return np.array(rows, dtype=np.int64).reshape(-1, 13)


def rebuild_at_init(seed: int, model_cfg: ModelConfig) -> ModelState:
    return ModelState.initial(model_cfg, seed)


def batch_loss(state: ModelState, ids: np.ndarray, train: bool = False, drop_rng=None) -> T.Tensor:
    """Teacher-forced mean cross-entropy over the answer digits and the end token."""
    inputs = ids[:, :-1]
    logits, _ = forward(state, inputs, train=train, drop_rng=drop_rng)
    pos = np.array(LOSS_POSITIONS)
    weights = np.zeros(inputs.shape, dtype=np.float32)
    weights[:, pos] = 1.0
    return T.cross_entropy(logits, ids[:, 1:], weights)


def _save_resume(path: Path, state: ModelState, opt: AdamW, epoch: int, step: int, history: list) -> None:
    header = {
        "format": "digitlab.train_state/1",
        "config": state.config.to_json(),
        "init_seed": state.init_seed,
        "epoch": epoch,
        "step": step,
        "opt_t": opt.t,
        "history": history,
        "meta": state.meta,
    }
    arrays = {"p." + k: v for k, v in state.arrays().items()}
    arrays.update(opt.state_arrays())
    checkpoint.write_container(path, header, arrays)


def train(
    seed: int,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir: str | Path,
    examples: Sequence[TaskExample] | None = None,
    resume: bool = True,
) -> ModelState:
    """Train one seed and return its best-validation state.

    Writes ``split_info.json``, ``init.ckpt``, ``best.ckpt``, ``metrics.csv``
    and a resumable ``train_state.ckpt`` into ``out_dir``. ``examples``
    restricts the task universe (tests and smoke runs).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    info = make_split(seed)
    info.save(out / SPLIT_JSON)
    splits = split_examples(info, examples)
    train_ids = expand_training_set(splits["train"])
    val = splits["validation"]
    n = len(train_ids)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total = steps_per_epoch * train_cfg.epochs
    warm = warmup_steps(total, train_cfg.warmup_fraction)

    state = rebuild_at_init(seed, model_cfg)
    checkpoint.save_state(state, out / INIT_CKPT)
    opt = AdamW(state.params, train_cfg.lr, train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)

    history: list[dict] = []
    start_epoch, step = 0, 0
    rpath = out / RESUME_CKPT
    if resume and rpath.exists():
        header, arrays = checkpoint.read_container(rpath)
        for k, p in state.params.items():
            p.data = arrays["p." + k].copy()
        opt.load_state_arrays(arrays, header["opt_t"])
        start_epoch, step, history = header["epoch"], header["step"], header["history"]
        log.info("resumed %s at epoch %d (step %d)", out, start_epoch, step)

    best_acc = max((h["val_exact_accuracy"] for h in history), default=-1.0)
    meta_common = {
        "seed": seed,
        "train_config": asdict(train_cfg),
        "steps_per_epoch": steps_per_epoch,
        "warmup_steps": warm,
        "n_train_sequences": n,
        "n_validation": len(val),
        "universe": "full" if examples is None else f"subset:{len(list(examples))}",
    }

    for epoch in range(start_epoch, train_cfg.epochs):
        if train_cfg.target_val_accuracy is not None and best_acc >= train_cfg.target_val_accuracy:
            break
        t0 = time.time()
        order = rng_mod.stream(seed, "shuffle", epoch).permutation(n)
        loss_sum, loss_count = 0.0, 0
        for bi in range(steps_per_epoch):
            idx = order[bi * train_cfg.batch_size:(bi + 1) * train_cfg.batch_size]
            lr = linear_warmup_lr(step, train_cfg.lr, warm)
            opt.zero_grad()
            batch_loss_val = 0.0
            for mi, lo in enumerate(range(0, len(idx), train_cfg.micro_batch)):
                mb = train_ids[idx[lo:lo + train_cfg.micro_batch]]
                drop = rng_mod.stream(seed, "dropout", step, mi)
                with T.Tape() as tape:
                    loss = batch_loss(state, mb, train=True, drop_rng=drop)
                    scaled = T.scale(loss, len(mb) / len(idx))
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
                tape.backward(scaled)
                batch_loss_val += float(loss.data) * len(mb) / len(idx)
            opt.step(lr)
            loss_sum += batch_loss_val
            loss_count += 1
            step += 1
            if train_cfg.log_every and step % train_cfg.log_every == 0:
                log.info("epoch %d step %d/%d loss %.4f lr %.2e (%.1fs)", epoch, bi + 1,
                         steps_per_epoch, batch_loss_val, lr, time.time() - t0)
        val_acc = exact_accuracy(state, val)
        rec = {"epoch": epoch, "train_loss": loss_sum / max(loss_count, 1), "val_exact_accuracy": val_acc,
               "lr": linear_warmup_lr(step - 1, train_cfg.lr, warm), "seconds": time.time() - t0}
        history.append(rec)
        log.info("epoch %d done: loss %.4f val exact %.2f%% (%.0fs)", epoch, rec["train_loss"], val_acc, rec["seconds"])
        if val_acc > best_acc:
            best_acc = val_acc
            state.meta = {**meta_common, "best_epoch": epoch, "best_val_exact_accuracy": val_acc,
                          "trained_epochs": epoch + 1}
            checkpoint.save_state(state, out / BEST_CKPT)
        _write_metrics(out / METRICS_CSV, history)
        _save_resume(rpath, state, opt, epoch + 1, step, history)

    (out / "train_log.json").write_text(json.dumps({**meta_common, "history": history}, indent=1) + "\n")
    return checkpoint.load_state(out / BEST_CKPT)


def _write_metrics(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_exact_accuracy", "lr"])
        for h in history:
            w.writerow([h["epoch"], f"{h['train_loss']:.6f}", f"{h['val_exact_accuracy']:.4f}", f"{h['lr']:.6e}"])


def load_run(run_dir: str | Path) -> tuple[ModelState, SplitInfo]:
    run = Path(run_dir)
    return checkpoint.load_state(run / BEST_CKPT), SplitInfo.load(run / SPLIT_JSON)
