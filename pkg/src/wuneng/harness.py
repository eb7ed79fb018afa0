"""Synthetic tasks, Adam training loop, evaluation, distillation losses.

Three probe tasks, all pure functions of a seeded generator:

    copy           payload, delimiter, payload again; loss on the echo span
    assoc_recall   key-value pairs then a query key; loss on the final answer
    perm_compose   a word over the 120 permutations of 5 elements; loss on
                   the token of their left-to-right composition

Training is plain Adam on masked next-token cross-entropy. With the
unembedding zero-initialized the step-0 loss is ln(vocab) exactly.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ModelParams, lift, model_forward, named_params
from .numerics import NumericOverflow, Rng, ShapeError

TASKS = ("copy", "assoc_recall", "perm_compose")

PERMS5 = tuple(itertools.permutations(range(5)))  # lexicographic, 120 tokens
PERM_VOCAB = len(PERMS5)


@dataclass
class TaskSample:
    input_ids: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray


@dataclass
class TrainConfig:
    task: str = "copy"
    steps: int = 1000
    batch: int = 32
    seq_len: int = 32
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.steps < 0 or self.batch < 1 or self.seq_len < 2:
            raise ValueError("steps must be >= 0, batch >= 1, seq_len >= 2")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def gen_copy(rng: Rng, seq_len: int, vocab: int) -> TaskSample:
    """Echo task. Inputs are ``p_0..p_{m-1} D p_0..p_{m-2}`` with m = seq_len/2;
    the targets continue the repeat and only the echo span is scored."""
    if seq_len % 2 != 0 or seq_len < 4:
        raise ValueError(f"copy needs an even seq_len >= 4, got {seq_len}")
    if vocab < 4:
        raise ValueError(f"copy needs vocab >= 4 (one delimiter), got {vocab}")
    m = seq_len // 2
    delim = vocab - 1
    payload = [rng.randint(vocab - 1) for _ in range(m)]
    full = payload + [delim] + payload
    return TaskSample(
        input_ids=np.array(full[:-1], dtype=np.int64),
        target_ids=np.array(full[1:], dtype=np.int64),
        loss_mask=np.array([0] * m + [1] * m, dtype=np.int64),
    )


def gen_assoc_recall(rng: Rng, n_pairs: int, vocab: int) -> TaskSample:
    """Key-value recall. Keys are distinct; the answer to the trailing query
    is scored at the final position only."""
    if n_pairs < 1:
        raise ValueError("assoc_recall needs at least one pair")
    if vocab < n_pairs + 1:
        raise ValueError(
            f"assoc_recall needs vocab >= n_pairs + 1, got vocab={vocab}, "
            f"n_pairs={n_pairs}")
    keys = []
    while len(keys) < n_pairs:
        cand = rng.randint(vocab)
        if cand not in keys:
            keys.append(cand)
    values = [rng.randint(vocab) for _ in range(n_pairs)]
    pick = rng.randint(n_pairs)
    seq = []
    for k, v in zip(keys, values):
        seq.extend((k, v))
    full = seq + [keys[pick], values[pick]]
    n = len(full) - 1
    mask = np.zeros(n, dtype=np.int64)
    mask[-1] = 1
    target = np.array(full[1:], dtype=np.int64)
    target[:-1] = 0  # masked out; keep the payload deterministic
    return TaskSample(
        input_ids=np.array(full[:-1], dtype=np.int64),
        target_ids=target,
        loss_mask=mask,
    )


def compose_left_to_right(perm_tokens) -> int:
    """Token of the composition that applies the sequence's perms in order."""
    acc = tuple(range(5))
    for tok in perm_tokens:
        p = PERMS5[tok]
        acc = tuple(p[acc[i]] for i in range(5))
    return PERMS5.index(acc)


def gen_perm_compose(rng: Rng, n_perms: int) -> TaskSample:
    """State-tracking task over the permutation group of 5 elements."""
    if n_perms < 1:
        raise ValueError("perm_compose needs at least one permutation")
    tokens = [rng.randint(PERM_VOCAB) for _ in range(n_perms)]
    target = np.zeros(n_perms, dtype=np.int64)
    target[-1] = compose_left_to_right(tokens)
    mask = np.zeros(n_perms, dtype=np.int64)
    mask[-1] = 1
    return TaskSample(
        input_ids=np.array(tokens, dtype=np.int64),
        target_ids=target,
        loss_mask=mask,
    )


def gen_sample(task: str, rng: Rng, seq_len: int, vocab: int) -> TaskSample:
    if task == "copy":
        return gen_copy(rng, seq_len, vocab)
    if task == "assoc_recall":
        return gen_assoc_recall(rng, (seq_len - 2) // 2, vocab)
    if task == "perm_compose":
        if vocab < PERM_VOCAB:
            raise ValueError(
                f"perm_compose needs vocab >= {PERM_VOCAB}, got {vocab}")
        return gen_perm_compose(rng, seq_len)
    raise ValueError(f"unknown task {task!r}")


def make_batch(task: str, rng: Rng, batch: int, seq_len: int, vocab: int):
    """Stack ``batch`` fresh samples into [batch, n] id/target/mask arrays."""
    samples = [gen_sample(task, rng, seq_len, vocab) for _ in range(batch)]
    return (np.stack([s.input_ids for s in samples]),
            np.stack([s.target_ids for s in samples]),
            np.stack([s.loss_mask for s in samples]))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, values: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in values.items()},
                   v={k: np.zeros_like(a) for k, a in values.items()},
                   step=0)


def adam_step(values: dict, grads: dict, st: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new values, new state)."""
    if set(values) != set(grads):
        raise ValueError("parameter and gradient name sets differ")
    t = st.step + 1
    new_vals, new_m, new_v = {}, {}, {}
    for name, theta in values.items():
        g = grads[name]
        if theta.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape "
                             f"{theta.shape} for {name}")
        m = beta1 * st.m[name] + (1.0 - beta1) * g
        v = beta2 * st.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(update)):
            raise ArithmeticError(f"non-finite Adam update for {name}")
        new_vals[name] = theta - update
        new_m[name] = m
        new_v[name] = v
    return new_vals, AdamState(m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    loss: float
    acc: float
    ms: float


class TrainDiverged(RuntimeError):
    """Loss went non-finite; ``last_good_step`` is the final healthy step."""

    def __init__(self, step: int, last_good_step: int):
        super().__init__(f"training diverged at step {step} "
                         f"(last good step: {last_good_step})")
        self.step = step
        self.last_good_step = last_good_step


def masked_accuracy(logits: np.ndarray, targets: np.ndarray,
                    mask: np.ndarray) -> float:
    hits = (np.argmax(logits, axis=-1) == targets) & (mask > 0)
    return float(hits.sum() / mask.sum())


def train(params: ModelParams, cfg: TrainConfig, on_step=None) -> list[StepRecord]:
    """Adam-train ``params`` in place; returns the per-step metric records.

    The loss recorded for step s is measured before that step's update, so
    record 0 reflects the freshly initialized model. Fully deterministic
    given the config seed.
    """
    vocab = params.config.vocab_size
    lifted = lift(params)
    leaves = dict(named_params(lifted))
    adam = AdamState.zeros_like({k: v.value for k, v in leaves.items()})
    data_rng = Rng(cfg.seed)
    records = []
    for step in range(cfg.steps):
        started = time.perf_counter()
        tokens, targets, mask = make_batch(cfg.task, data_rng.split(), cfg.batch,
                                           cfg.seq_len, vocab)
        try:
            logits = model_forward(tokens, lifted)
            loss = ad.masked_cross_entropy(logits, targets, mask)
        except NumericOverflow as e:
            raise TrainDiverged(step, last_good_step=step - 1) from e
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainDiverged(step, last_good_step=step - 1)
        acc = masked_accuracy(logits.value, targets, mask)
        ad.backward(loss)
        values = {k: v.value for k, v in leaves.items()}
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                 for k, v in leaves.items()}
        new_vals, adam = adam_step(values, grads, adam, cfg.lr,
                                   cfg.beta1, cfg.beta2, cfg.adam_eps)
        for name, leaf in leaves.items():
            leaf.value[...] = new_vals[name]
            leaf.grad = None
        ms = (time.perf_counter() - started) * 1000.0
        record = StepRecord(step=step, loss=loss_val, acc=acc, ms=ms)
        records.append(record)
        if on_step is not None:
            on_step(record)
    return records


def evaluate(params: ModelParams, task: str, n_samples: int, seq_len: int,
             seed: int = 0):
    """Masked loss and accuracy over fresh seeded samples; returns (loss, acc)."""
    if n_samples < 1:
        raise ValueError("evaluation needs at least one sample")
    rng = Rng(seed)
    tokens, targets, mask = make_batch(task, rng, n_samples, seq_len,
                                       params.config.vocab_size)
    logits = model_forward(tokens, params)
    loss = float(ad.val(ad.masked_cross_entropy(logits, targets, mask)))
    return loss, masked_accuracy(ad.val(logits), targets, mask)


# ---------------------------------------------------------------------------
# distillation losses
# ---------------------------------------------------------------------------

def align_loss(h_teacher: np.ndarray, h_student: np.ndarray) -> float:
    """Per-position Euclidean gap scaled by 1/sqrt(d), averaged over positions."""
    h_teacher = np.asarray(h_teacher, dtype=np.float64)
    h_student = np.asarray(h_student, dtype=np.float64)
    if h_teacher.shape != h_student.shape:
        raise ShapeError(f"hidden shapes differ: {h_teacher.shape} vs "
                         f"{h_student.shape}")
    d = h_teacher.shape[-1]
    gaps = np.linalg.norm(h_teacher - h_student, axis=-1) * d**-0.5
    return float(np.mean(gaps))


def token_kl(teacher_logits: np.ndarray, student_logits: np.ndarray) -> float:
    """Mean per-position KL(teacher || student), computed in log space."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError(f"logit shapes differ: {t.shape} vs {s.shape}")

    def log_softmax(z):
        zmax = np.max(z, axis=-1, keepdims=True)
        return z - zmax - np.log(np.sum(np.exp(z - zmax), axis=-1, keepdims=True))

    log_p = log_softmax(t)
    log_q = log_softmax(s)
    kl = np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)
    return float(np.mean(kl))
