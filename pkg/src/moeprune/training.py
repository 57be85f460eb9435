"""Plain cross-entropy pretraining for the toy teacher, plus perplexity
evaluation over non-overlapping windows."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .calibration import corpus_tokens, nonoverlapping_windows
from .errors import InputError, NumericalError
from .model import MoEModel, ce_loss, forward_pass, make_param_vars, model_forward
from .numerics import SeededRng
from .optim import Adam, cosine_lr

__all__ = ["train_model", "evaluate_perplexity", "batch_ce_graph"]


def batch_ce_graph(model: MoEModel, batch: list[np.ndarray],
                   masks: dict[str, np.ndarray] | None = None):
    """Mean next-token CE over a batch of equal-length windows, on one tape."""
    tape = ag.Tape()
    params = make_param_vars(model, tape, masks)
    terms = []
    for seq in batch:
        tr = forward_pass(model, seq, tape=tape, params=params)
        ce = ag.cross_entropy(
            ag.gather_rows(tr.logits, np.arange(len(seq) - 1)),
            np.asarray(seq[1:], dtype=np.intp),
        )
        terms.append(ag.scale(ce, 1.0 / len(batch)))
    loss = terms[0]
    for t in terms[1:]:
        loss = ag.add(loss, t)
    return loss, params[0], tape


def train_model(
    model: MoEModel,
    corpus: bytes | str,
    steps: int,
    batch_size: int = 8,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> tuple[MoEModel, list[dict]]:
    """Adam + cosine CE training on randomly offset windows. Deterministic per
    seed. Aborts on a non-finite loss."""
    toks = corpus_tokens(corpus)
    seq_len = model.config.seq_len
    if toks.size < seq_len + 1:
        raise InputError(f"corpus has {toks.size} tokens; need more than seq_len={seq_len}")
    out = model.copy()
    if steps == 0:
        return out, []
    rng = SeededRng(seed)
    opt = Adam(out.params)
    log = []
    for step in range(steps):
        offsets = np.asarray(rng.integers(0, toks.size - seq_len + 1, size=batch_size))
        batch = [toks[o : o + seq_len] for o in offsets]
        loss, leaves, tape = batch_ce_graph(out, batch)
        value = float(loss.value[0, 0])
        if not math.isfinite(value):
            raise NumericalError(f"non-finite training loss at step {step}: {value}")
        tape.backward(loss)
        lr = cosine_lr(step, steps, learning_rate)
        opt.step({n: v.grad for n, v in leaves.items()}, lr)
        log.append({"step": step, "lr": lr, "loss": value})
    return out, log


def evaluate_perplexity(model: MoEModel, corpus: bytes | str) -> tuple[float, int]:
    """exp(mean next-token CE) over non-overlapping seq_len windows (tail
    dropped). Returns (perplexity, predicted token count)."""
    windows = nonoverlapping_windows(corpus, model.config.seq_len)
    total_ce = 0.0
    total_tokens = 0
    for w in windows:
        res = model_forward(model, w)
        n = w.size - 1
        total_ce += ce_loss(res.logits[:-1], w[1:]) * n
        total_tokens += n
    return math.exp(total_ce / total_tokens), total_tokens
