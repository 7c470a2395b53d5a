"""Draft-head training via self-distillation from the frozen backbone.

The corpus is a seeded stochastic grammar over the toy vocabulary; ids 0-3
are reserved control tokens (sequence start/end and thinking-block markers).
Distillation targets are hard: the backbone's own greedy continuations.
Training touches head parameters only, with a decoupled-weight-decay
adaptive optimizer and cosine learning-rate decay.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M

BOS_TOKEN = 0
EOS_TOKEN = 1
THINK_START_TOKEN = 2
THINK_END_TOKEN = 3
SPECIAL_TOKENS = (BOS_TOKEN, EOS_TOKEN, THINK_START_TOKEN, THINK_END_TOKEN)


class TrainingDiverged(RuntimeError):
    def __init__(self, step):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class DistillSample:
    prompt: list
    continuation: list  # greedy backbone output, the hard targets
    special_tokens_present: frozenset = frozenset()


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 1
    lambdas: tuple = ()  # empty -> 0.8**k per head
    n_heads: int = 3
    preserve_special: bool = True
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1 or self.n_heads < 1:
            raise ValueError("hyperparameters must be positive")
        if not self.lambdas:
            self.lambdas = tuple(0.8 ** k for k in range(1, self.n_heads + 1))
        if len(self.lambdas) != self.n_heads:
            raise ValueError("need one lambda per head")


def default_lambdas(n_heads):
    return tuple(0.8 ** k for k in range(1, n_heads + 1))


def generate_corpus(vocab_size, n_samples, seed=0, min_len=6, max_len=24):
    """Seeded synthetic prompts from a small stochastic grammar.

    Each sequence is BOS, content drawn from a 4-way-branching successor
    table, an optional thinking block, then EOS.  Content ids live in
    [4, vocab_size).
    """
    if vocab_size < 16:
        raise ValueError("vocab too small for the grammar")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    n_content = vocab_size - 4
    successors = rng.integers(0, n_content, size=(n_content, 4)) + 4
    out = []
    for _ in range(n_samples):
        body_len = int(rng.integers(min_len, max_len + 1))
        tok = int(rng.integers(4, vocab_size))
        seq = [BOS_TOKEN, tok]
        think_at = int(rng.integers(1, body_len)) if rng.random() < 0.3 else -1
        for i in range(body_len - 1):
            if i == think_at:
                seq.append(THINK_START_TOKEN)
            elif i == think_at + 2 and think_at >= 0:
                seq.append(THINK_END_TOKEN)
            tok = int(successors[tok - 4, rng.integers(0, 4)])
            seq.append(tok)
        seq.append(EOS_TOKEN)
        out.append(seq)
    return out


def build_distill_set(bundle, prompts, n_samples, preserve_special=True,
                      max_continuation=32):
    """Greedy-decode the backbone on each prompt to get hard targets.

    With preserve_special=False all reserved control tokens are filtered out
    of the continuations (the degraded ablation setting)."""
    if not prompts:
        raise ValueError("empty prompt set")
    from .engine import generate_autoregressive

    samples = []
    for prompt in prompts[:n_samples]:
        cont, _ = generate_autoregressive(bundle, prompt, max_continuation)
        present = frozenset(t for t in cont if t in SPECIAL_TOKENS)
        if not preserve_special:
            cont = [t for t in cont if t not in SPECIAL_TOKENS]
        samples.append(DistillSample(list(prompt), cont, present))
    return samples


def _sample_positions(bundle, sample):
    """(hidden states, target matrix) for one sample.

    Positions start at the last prompt token so every target is a token the
    backbone generated itself; targets[i, k] is the token k+1 steps ahead,
    -1 where the sequence ends first."""
    seq = list(sample.prompt) + list(sample.continuation)
    k_heads = len(bundle.heads)
    start = len(sample.prompt) - 1
    n_pos = len(seq) - start - 2  # head 1 needs a token two steps ahead
    if n_pos <= 0:
        return None
    hs = M.hidden_states(bundle, seq)[start:start + n_pos]
    targets = np.full((n_pos, k_heads), -1, dtype=np.int64)
    for i in range(n_pos):
        p = start + i
        for k in range(k_heads):
            if p + k + 2 < len(seq):
                targets[i, k] = seq[p + k + 2]
    return hs, targets


def _collect_dataset(bundle, samples):
    hs_list, tg_list = [], []
    for s in samples:
        pair = _sample_positions(bundle, s)
        if pair is not None:
            hs_list.append(pair[0])
            tg_list.append(pair[1])
    if not hs_list:
        raise ValueError("no usable training positions in the sample set")
    return np.concatenate(hs_list), np.concatenate(tg_list)


class AdamW:
    """Decoupled weight decay Adam over a list of parameter arrays."""

    def __init__(self, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr_scale=1.0):
        self.t += 1
        lr = self.lr * lr_scale
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p)


def train_heads(bundle, samples, config: TrainConfig):
    """Train the draft heads on distillation samples; backbone untouched.

    Returns (bundle, loss_curve).  Cosine-decays the learning rate to 10%
    of its initial value over the run.  Raises TrainingDiverged on a
    non-finite loss.
    """
    if not samples:
        raise ValueError("empty sample set")
    if len(bundle.heads) != config.n_heads:
        raise ValueError(f"bundle has {len(bundle.heads)} heads, config says {config.n_heads}")
    hs, targets = _collect_dataset(bundle, samples)
    if all(l == 0 for l in config.lambdas):
        return bundle, []  # nothing to optimize; leave parameters untouched
    rng = np.random.default_rng(config.seed)
    params = [a for head in bundle.heads for a in (head["w"], head["b"])]
    opt = AdamW(params, config.learning_rate, config.weight_decay)
    n = hs.shape[0]
    steps_per_epoch = max(1, (n + config.batch_size - 1) // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    losses = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            if idx.size == 0:
                continue
            try:
                loss, grads = M.head_loss(bundle, hs[idx], targets[idx], config.lambdas)
            except ValueError:
                continue  # batch without any valid target position
            if not np.isfinite(loss):
                raise TrainingDiverged(step)
            flat = [g for pair in grads for g in pair]
            # cosine decay to 10% of the base learning rate
            scale = 0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * step / max(1, total_steps - 1)))
            opt.step(flat, lr_scale=scale)
            losses.append(loss)
            step += 1
    return bundle, losses


def eval_head_accuracy(bundle, samples):
    """Top-1 accuracy per head: argmax of head k vs the token k+1 steps ahead."""
    if not samples:
        raise ValueError("empty eval set")
    hs, targets = _collect_dataset(bundle, samples)
    acc = np.full(len(bundle.heads), np.nan)
    for k, head in enumerate(bundle.heads):
        valid = targets[:, k] >= 0
        if not valid.any():
            continue
        x = hs[valid]
        u = x @ head["w"].T + head["b"]
        logits = (x + u / (1.0 + np.exp(-u))) @ bundle.w_out
        acc[k] = float(np.mean(np.argmax(logits, axis=1) == targets[valid, k]))
    return acc
