"""Decode loops: greedy autoregressive baseline and the speculative step.

One speculative step is draft -> candidate-buffer gather -> masked tree pass
-> greedy verification -> table-lookup path retrieval -> KV compaction.
Acceptance is strict greedy matching (a child is accepted iff its token is
the argmax at its parent node), which makes speculative output token-for-token
identical to the autoregressive baseline.

Counting convention: accepted_len is the number of committed tree nodes per
step, root included, so it lies in [1, K+1]; the argmax at the deepest
accepted node seeds the next step's root.  Total emitted tokens equal the sum
of accepted_len over steps (up to budget truncation at the final step).
"""

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import model as M


@dataclass
class StepOutcome:
    accepted_len: int
    chosen_path_row: int
    emitted_tokens: list
    bonus_token: int  # argmax at the deepest accepted node; next step's root
    truncated: bool = False
    step_time_s: float = 0.0


@dataclass
class ShapeAudit:
    """Records the multiset of tensor shapes touched in each speculative step."""

    steps: list = field(default_factory=list)
    _current: Counter = field(default_factory=Counter)

    def begin_step(self):
        self._current = Counter()

    def record(self, name, shape):
        self._current[(name, tuple(shape))] += 1

    def end_step(self):
        self.steps.append(self._current)

    def uniform(self):
        return len(set(frozenset(c.items()) for c in self.steps)) <= 1


@dataclass
class RetrievalAudit:
    """Counts data-dependent (token-value) branches in the retrieval path.

    The zero-copy contract is that path extraction is one table-row lookup
    plus gathers, so this counter must stay at zero."""

    token_branches: int = 0


def generate_autoregressive(bundle, prompt, max_new_tokens, eos_token=None):
    """Greedy baseline; returns (tokens, per-step seconds)."""
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    tokens = []
    times = []
    if max_new_tokens <= 0:
        return tokens, times
    cache = M.KvCache(bundle.config, dtype=bundle.dtype)
    logits, _ = M.forward_prefill(bundle, prompt, cache)
    nxt = int(np.argmax(logits))
    tokens.append(nxt)
    while len(tokens) < max_new_tokens and not (eos_token is not None and nxt == eos_token):
        t0 = time.perf_counter()
        logits, _ = M.forward_decode_one(bundle, nxt, cache)
        nxt = int(np.argmax(logits))
        tokens.append(nxt)
        times.append(time.perf_counter() - t0)
    return tokens, times


def topk_tokens(logits, k):
    """Token ids of the k largest logits, rank order, ties to the lower id."""
    order = np.argsort(-logits, kind="stable")
    return order[:k]


def draft_candidates(bundle, h_last, base_logits, spec):
    """Fill the flat candidate buffer: [root argmax, head-1 top-k, head-2 top-k, ...]."""
    buf = np.empty(1 + sum(spec.topk_per_head), dtype=np.int64)
    buf[0] = int(np.argmax(base_logits))
    head_logits = M.head_predict(bundle, h_last)
    off = 1
    for k, width in enumerate(spec.topk_per_head):
        buf[off:off + width] = topk_tokens(head_logits[k], width)
        off += width
    return buf


def assemble_tree_tokens(candidate_buffer, buffers):
    """Map the flat candidate buffer onto tree node order (pure gather)."""
    return np.asarray(candidate_buffer)[buffers.tree_indices]


def verify_and_accept(tree_logits, tree_tokens, buffers):
    """Greedy verification over the static retrieval table.

    For each path row, children are accepted while their token equals the
    argmax at their parent node; the row with the most accepted nodes wins,
    ties to the lowest row index.
    """
    argmax_at = np.argmax(tree_logits, axis=1)
    best_row, best_count = 0, 1
    for row in range(buffers.retrieve_indices.shape[0]):
        count = 1  # root always accepted
        nodes = buffers.retrieve_indices[row]
        for d in range(1, nodes.shape[0]):
            node = nodes[d]
            if node < 0:
                break
            if tree_tokens[node] == argmax_at[nodes[d - 1]]:
                count += 1
            else:
                break
        if count > best_count:
            best_row, best_count = row, count
    accepted = buffers.retrieve_indices[best_row, :best_count]
    deepest = int(accepted[-1])
    return StepOutcome(
        accepted_len=best_count,
        chosen_path_row=best_row,
        emitted_tokens=[int(tree_tokens[n]) for n in accepted],
        bonus_token=int(argmax_at[deepest]),
    )


def retrieve_path(chosen_row, buffers, audit=None):
    """Node indices of a path row: one table lookup plus a sentinel-drop gather.

    No branching on token values happens here (audited by RetrievalAudit);
    the sentinel mask depends only on the static tree topology.
    """
    row = buffers.retrieve_indices[chosen_row]
    return row[row >= 0]


def commit_accepted(cache, accepted_node_indices, buffers):
    """Compact the accepted scratch rows into committed cache slots.

    Row for the node at acceptance depth d moves to logical_len + d; sources
    are visited in increasing node index so the in-place gather never clobbers
    a pending source.  Scratch contents are unspecified afterwards.
    """
    base = cache.logical_len
    n = len(accepted_node_indices)
    if base + n > cache.capacity:
        raise M.CapacityError("commit would overflow the KV cache")
    for d, node in enumerate(accepted_node_indices):
        node = int(node)
        if node != d:
            cache.k[:, base + d] = cache.k[:, base + node]
            cache.v[:, base + d] = cache.v[:, base + node]
    cache.logical_len = base + n
    return cache


def generate_speculative(bundle, buffers, prompt, max_new_tokens, eos_token=None,
                         drafter=None, shape_hook=None, retrieval_audit=None):
    """Speculative greedy decoding; returns (tokens, [StepOutcome], per-step seconds).

    `drafter` defaults to draft_candidates; it can be swapped (e.g. for an
    oracle drafter in tests) and must honour the same buffer layout.
    """
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    from .tree import TreeSpec

    spec = TreeSpec(buffers.topk_per_head,
                    [p for p in buffers.node_paths if p])
    if drafter is None:
        drafter = draft_candidates
    t_nodes = buffers.n_nodes
    cache = M.KvCache(bundle.config, scratch_slots=t_nodes, dtype=bundle.dtype)
    logits, h = M.forward_prefill(bundle, prompt, cache)
    tokens = []
    outcomes = []
    times = []
    while len(tokens) < max_new_tokens:
        t0 = time.perf_counter()
        if shape_hook is not None:
            shape_hook.begin_step()
        candidate_buf = drafter(bundle, h, logits, spec)
        tree_tokens = assemble_tree_tokens(candidate_buf, buffers)
        tree_logits, tree_hidden = M.forward_tree(bundle, tree_tokens, buffers, cache,
                                                  hook=shape_hook)
        outcome = verify_and_accept(tree_logits, tree_tokens, buffers)
        path_nodes = retrieve_path(outcome.chosen_path_row, buffers, audit=retrieval_audit)
        accepted_nodes = path_nodes[:outcome.accepted_len]
        if shape_hook is not None:
            shape_hook.record("candidate_buffer", candidate_buf.shape)
            shape_hook.record("retrieve_row", buffers.retrieve_indices[outcome.chosen_path_row].shape)
            shape_hook.end_step()
        commit_accepted(cache, accepted_nodes, buffers)

        emit = list(outcome.emitted_tokens)
        stop = False
        if eos_token is not None and eos_token in emit:
            emit = emit[:emit.index(eos_token) + 1]
            stop = True
        if len(tokens) + len(emit) > max_new_tokens:
            emit = emit[:max_new_tokens - len(tokens)]
            outcome.truncated = True
            stop = True
        outcome.emitted_tokens = emit
        tokens.extend(emit)
        outcome.step_time_s = time.perf_counter() - t0
        times.append(outcome.step_time_s)
        outcomes.append(outcome)
        if stop:
            break
        deepest = int(accepted_nodes[-1])
        logits = tree_logits[deepest]
        h = tree_hidden[deepest]
    return tokens, outcomes, times
