import numpy as np
import pytest

from specdec import engine, model, tree

SMALL_CONFIG = model.ModelConfig(
    n_layers=2, d_model=32, n_q_heads=4, n_kv_heads=2, d_ff=64,
    vocab_size=64, max_seq_len=512, n_draft_heads=3)


@pytest.fixture
def small_config():
    return SMALL_CONFIG


@pytest.fixture
def small_bundle():
    return model.init_bundle(SMALL_CONFIG, seed=42, head_init="random")


@pytest.fixture
def default_buffers():
    return tree.compile_tree(tree.default_tree(3))


@pytest.fixture
def example_spec():
    # topk [2, 1] with paths (0), (1), (0, 0): four nodes, two leaves
    return tree.TreeSpec([2, 1], {(0,), (1,), (0, 0)})


def make_bundle(seed, config=SMALL_CONFIG, head_init="random"):
    return model.init_bundle(config, seed=seed, head_init=head_init)


def prompt_for(seed, n=6, vocab=SMALL_CONFIG.vocab_size):
    return [int(t) for t in np.random.default_rng(seed).integers(0, vocab, size=n)]


def oracle_drafter(bundle, prompt, total_len):
    """Drafter that always proposes the true greedy continuation.

    Relies on full acceptance every step (guaranteed by construction when the
    tree is a chain) to track how many tokens have been emitted so far.
    """
    seq, _ = engine.generate_autoregressive(bundle, prompt, total_len + 8)
    state = {"emitted": 0}

    def drafter(b, h, base_logits, spec):
        width = sum(spec.topk_per_head)
        buf = np.empty(1 + width, dtype=np.int64)
        pos = state["emitted"]
        buf[0] = seq[pos] if pos < len(seq) else 0
        off = 1
        for k, w in enumerate(spec.topk_per_head):
            target = seq[pos + k + 1] if pos + k + 1 < len(seq) else 0
            buf[off:off + w] = target
            off += w
        state["emitted"] = pos + len(spec.topk_per_head) + 1
        return buf

    return drafter


def anti_oracle_drafter(bundle, prompt, total_len, vocab):
    """Drafter whose head candidates are always wrong (accepts only the root)."""
    seq, _ = engine.generate_autoregressive(bundle, prompt, total_len + 8)
    state = {"emitted": 0}

    def drafter(b, h, base_logits, spec):
        width = sum(spec.topk_per_head)
        buf = np.empty(1 + width, dtype=np.int64)
        pos = state["emitted"]
        buf[0] = seq[pos] if pos < len(seq) else 0
        off = 1
        for k, w in enumerate(spec.topk_per_head):
            truth = seq[pos + k + 1] if pos + k + 1 < len(seq) else 0
            buf[off:off + w] = (truth + 1) % vocab
            off += w
        state["emitted"] = pos + 1  # only the root commits each step
        return buf

    return drafter
