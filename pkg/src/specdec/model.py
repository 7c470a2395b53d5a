"""Toy decoder-only transformer backbone plus K residual draft heads.

The backbone is a structural miniature of a GQA decoder: pre-norm RMS
layers, rotary positions, SiLU FFN, untied output projection.  Every forward
path processes one token at a time through identical tensor shapes, so a
tree-masked verification pass is bit-identical to the equivalent sequential
decode (see kernels.py for the ordering contract).

Head k maps the final hidden state h to logits over the token K positions
ahead: out_proj(h + silu(W_k h + b_k)).  Backbone arrays are frozen
(read-only) after construction; training touches head parameters only.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .kernels import attend_token


class CapacityError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_q_heads: int = 8
    n_kv_heads: int = 2  # preserves the 4:1 Q:KV grouping of the full-scale model
    d_ff: int = 344
    vocab_size: int = 512
    max_seq_len: int = 2048
    n_draft_heads: int = 3

    def __post_init__(self):
        for name, v in asdict(self).items():
            if int(v) < 1:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError("n_q_heads must be divisible by n_kv_heads")
        if self.d_model % self.n_q_heads:
            raise ValueError("d_model must be divisible by n_q_heads")
        if (self.d_model // self.n_q_heads) % 2:
            raise ValueError("head dim must be even for rotary pairs")

    @property
    def d_head(self):
        return self.d_model // self.n_q_heads


_LAYER_KEYS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_up", "w_down")
_RMS_EPS = 1e-6
_ROPE_THETA = 10000.0


class ModelBundle:
    """Frozen backbone arrays + trainable draft-head arrays."""

    def __init__(self, config, embed, layers, final_norm, w_out, heads):
        self.config = config
        self.embed = embed
        self.layers = layers
        self.final_norm = final_norm
        self.w_out = w_out
        self.heads = heads  # list of {"w": (d, d), "b": (d,)}
        d_h = config.d_head
        self.inv_freq = _ROPE_THETA ** (-np.arange(0, d_h, 2, dtype=np.float64) / d_h)
        self.inv_freq.setflags(write=False)
        for a in self.backbone_arrays():
            a.setflags(write=False)

    @property
    def dtype(self):
        return self.embed.dtype

    def backbone_arrays(self):
        yield self.embed
        for layer in self.layers:
            for key in _LAYER_KEYS:
                yield layer[key]
        yield self.final_norm
        yield self.w_out

    def backbone_fingerprint(self):
        import hashlib

        h = hashlib.sha256()
        for a in self.backbone_arrays():
            h.update(a.tobytes())
        return h.hexdigest()


def init_bundle(config, seed=0, head_init="zero", dtype=np.float64):
    """Seeded random backbone; heads start at zero (mirroring the backbone's
    next-token distribution) unless head_init="random"."""
    rng = np.random.default_rng(seed)
    c = config
    scale = 0.02

    def mat(*shape):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    layers = []
    for _ in range(c.n_layers):
        layers.append({
            "attn_norm": np.ones(c.d_model, dtype=dtype),
            "wq": mat(c.d_model, c.n_q_heads * c.d_head),
            "wk": mat(c.d_model, c.n_kv_heads * c.d_head),
            "wv": mat(c.d_model, c.n_kv_heads * c.d_head),
            "wo": mat(c.n_q_heads * c.d_head, c.d_model),
            "ffn_norm": np.ones(c.d_model, dtype=dtype),
            "w_up": mat(c.d_model, c.d_ff),
            "w_down": mat(c.d_ff, c.d_model),
        })
    heads = []
    for _ in range(c.n_draft_heads):
        if head_init == "zero":
            heads.append({"w": np.zeros((c.d_model, c.d_model), dtype=dtype),
                          "b": np.zeros(c.d_model, dtype=dtype)})
        elif head_init == "random":
            heads.append({"w": mat(c.d_model, c.d_model), "b": np.zeros(c.d_model, dtype=dtype)})
        else:
            raise ValueError(f"unknown head_init {head_init!r}")
    return ModelBundle(c, mat(c.vocab_size, c.d_model), layers,
                       np.ones(c.d_model, dtype=dtype), mat(c.d_model, c.vocab_size), heads)


class KvCache:
    """Per-layer K/V store with a committed prefix and tree scratch slack.

    Rows [0, logical_len) are committed; a tree pass writes its T rows at
    [logical_len, logical_len + T) and the engine compacts the accepted ones.
    The arrays never reallocate during a run.
    """

    def __init__(self, config, scratch_slots=0, dtype=np.float64):
        self.capacity = config.max_seq_len + scratch_slots
        shape = (config.n_layers, self.capacity, config.n_kv_heads, config.d_head)
        self.k = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.logical_len = 0


def _rmsnorm(x, g):
    return x * (g / np.sqrt(np.mean(x * x) + _RMS_EPS))


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _rope_inplace(m, pos, inv_freq, dtype):
    ang = pos * inv_freq
    cos = np.cos(ang).astype(dtype)
    sin = np.sin(ang).astype(dtype)
    e = m[:, 0::2].copy()
    o = m[:, 1::2].copy()
    m[:, 0::2] = e * cos - o * sin
    m[:, 1::2] = e * sin + o * cos


_ONE_VIS = np.ones(1, dtype=np.uint8)


def _token_pass(bundle, token, pos, cache, n_ctx, blk_start, n_blk, vis_row, write_row,
                want_logits=True):
    c = bundle.config
    scale = 1.0 / math.sqrt(c.d_head)
    x = bundle.embed[token].copy()
    for li, layer in enumerate(bundle.layers):
        xn = _rmsnorm(x, layer["attn_norm"])
        q = (xn @ layer["wq"]).reshape(c.n_q_heads, c.d_head)
        k = (xn @ layer["wk"]).reshape(c.n_kv_heads, c.d_head)
        v = (xn @ layer["wv"]).reshape(c.n_kv_heads, c.d_head)
        _rope_inplace(q, pos, bundle.inv_freq, bundle.dtype)
        _rope_inplace(k, pos, bundle.inv_freq, bundle.dtype)
        cache.k[li, write_row] = k
        cache.v[li, write_row] = v
        attn = np.empty((c.n_q_heads, c.d_head), dtype=bundle.dtype)
        attend_token(q, cache.k[li], cache.v[li], n_ctx, blk_start, n_blk, vis_row, scale, attn)
        x = x + attn.reshape(-1) @ layer["wo"]
        xn2 = _rmsnorm(x, layer["ffn_norm"])
        x = x + _silu(xn2 @ layer["w_up"]) @ layer["w_down"]
    h = _rmsnorm(x, bundle.final_norm)
    logits = h @ bundle.w_out if want_logits else None
    return logits, h


def _check_tokens(bundle, token_ids):
    v = bundle.config.vocab_size
    for t in token_ids:
        if not 0 <= int(t) < v:
            raise ValueError(f"token id {t} outside vocab of size {v}")


def forward_prefill(bundle, token_ids, cache):
    """Run the prompt through an empty cache; returns (logits, hidden) at the
    last position.  Implemented as sequential single-token passes so that it
    is exactly the repeated-decode computation."""
    if cache.logical_len != 0:
        raise ValueError("forward_prefill requires an empty cache")
    if len(token_ids) == 0:
        raise ValueError("empty prompt")
    if len(token_ids) > bundle.config.max_seq_len:
        raise CapacityError(f"prompt of {len(token_ids)} exceeds max_seq_len")
    _check_tokens(bundle, token_ids)
    logits = h = None
    for i, t in enumerate(token_ids):
        logits, h = _token_pass(bundle, int(t), i, cache, i, i, 1, _ONE_VIS, i)
        cache.logical_len = i + 1
    return logits, h


def forward_decode_one(bundle, token_id, cache):
    """Append one committed token; returns (logits, hidden) for it."""
    if cache.logical_len < 1:
        raise ValueError("decode requires a non-empty cache")
    if cache.logical_len + 1 > cache.capacity:
        raise CapacityError("KV cache full")
    _check_tokens(bundle, [token_id])
    pos = cache.logical_len
    logits, h = _token_pass(bundle, int(token_id), pos, cache, pos, pos, 1, _ONE_VIS, pos)
    cache.logical_len += 1
    return logits, h


def forward_tree(bundle, tree_token_ids, buffers, cache, hook=None):
    """Verify a tree of T candidate tokens in one masked pass.

    Node i sits at position logical_len + depth[i], attends to the whole
    committed prefix plus its tree ancestors, and leaves its K/V in the
    scratch rows [logical_len, logical_len + T).  logical_len is unchanged;
    committing accepted rows is the engine's job.
    """
    t = buffers.n_nodes
    if len(tree_token_ids) != t:
        raise ValueError(f"expected {t} tree tokens, got {len(tree_token_ids)}")
    ctx = cache.logical_len
    if ctx + t > cache.capacity:
        raise CapacityError("tree pass would overflow the KV cache")
    _check_tokens(bundle, tree_token_ids)
    c = bundle.config
    vis = np.ascontiguousarray(buffers.attn_mask.astype(np.uint8))
    logits = np.empty((t, c.vocab_size), dtype=bundle.dtype)
    hidden = np.empty((t, c.d_model), dtype=bundle.dtype)
    for i in range(t):
        lg, h = _token_pass(bundle, int(tree_token_ids[i]), ctx + int(buffers.node_depth[i]),
                            cache, ctx, ctx, t, vis[i], ctx + i)
        logits[i] = lg
        hidden[i] = h
    if hook is not None:
        hook.record("tree_tokens", (t,))
        hook.record("attn_mask", buffers.attn_mask.shape)
        hook.record("kv_cache", cache.k.shape)
        hook.record("tree_logits", logits.shape)
        hook.record("tree_hidden", hidden.shape)
    return logits, hidden


def hidden_states(bundle, token_ids):
    """Final-layer hidden state at every position of a teacher-forced pass."""
    cache = KvCache(bundle.config, dtype=bundle.dtype)
    _check_tokens(bundle, token_ids)
    out = np.empty((len(token_ids), bundle.config.d_model), dtype=bundle.dtype)
    for i, t in enumerate(token_ids):
        _, h = _token_pass(bundle, int(t), i, cache, i, i, 1, _ONE_VIS, i, want_logits=False)
        cache.logical_len = i + 1
        out[i] = h
    return out


def head_predict(bundle, h):
    """Logits of every draft head for one hidden state: (K, vocab)."""
    rows = []
    for head in bundle.heads:
        a = _silu(head["w"] @ h + head["b"])
        rows.append((h + a) @ bundle.w_out)
    return np.stack(rows)


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return z - m - np.log(e.sum(axis=-1, keepdims=True))


def head_loss(bundle, h_batch, targets, lambdas):
    """Decay-weighted cross-entropy over all heads, with analytic gradients.

    targets: (N, K) int array, -1 where the position has no token K steps
    ahead; such positions are excluded for that head.  Returns
    (scalar loss, [(dW, db)] per head).  Gradients cover head parameters
    only; the backbone is frozen.
    """
    h_batch = np.atleast_2d(h_batch)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    k_heads = len(bundle.heads)
    if targets.shape != (h_batch.shape[0], k_heads):
        raise ValueError(f"targets shape {targets.shape} != {(h_batch.shape[0], k_heads)}")
    if not (targets < bundle.config.vocab_size).all():
        raise ValueError("target token outside vocab")
    loss = 0.0
    grads = []
    any_valid = False
    for k, head in enumerate(bundle.heads):
        lam = float(lambdas[k])
        valid = targets[:, k] >= 0
        n = int(valid.sum())
        if n == 0 or lam == 0.0:
            if n > 0:
                any_valid = True
            grads.append((np.zeros_like(head["w"]), np.zeros_like(head["b"])))
            continue
        any_valid = True
        x = h_batch[valid]
        tgt = targets[valid, k]
        u = x @ head["w"].T + head["b"]
        sig = 1.0 / (1.0 + np.exp(-u))
        a = u * sig
        z = (x + a) @ bundle.w_out
        logp = _log_softmax(z)
        loss += lam * float(-logp[np.arange(n), tgt].mean())
        dz = np.exp(logp)
        dz[np.arange(n), tgt] -= 1.0
        dz *= lam / n
        da = dz @ bundle.w_out.T
        du = da * (sig * (1.0 + u * (1.0 - sig)))
        grads.append((du.T @ x, du.sum(axis=0)))
    if not any_valid:
        raise ValueError("no position has a valid target for any head")
    return loss, grads


# ---------------------------------------------------------------------------
# Checkpoint container: uint64 little-endian header length, JSON header with
# config + tensor table (name/shape/dtype/offset), then a flat little-endian
# IEEE-754 payload.

_DTYPE_TAGS = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


def _tensor_items(bundle):
    yield "embed", bundle.embed
    for i, layer in enumerate(bundle.layers):
        for key in _LAYER_KEYS:
            yield f"layers.{i}.{key}", layer[key]
    yield "final_norm", bundle.final_norm
    yield "w_out", bundle.w_out
    for k, head in enumerate(bundle.heads):
        yield f"heads.{k}.w", head["w"]
        yield f"heads.{k}.b", head["b"]


def save_bundle(bundle, path):
    tag = "<f8" if bundle.dtype == np.float64 else "<f4"
    table = []
    payload = bytearray()
    for name, arr in _tensor_items(bundle):
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": tag,
                      "offset": len(payload), "nbytes": len(raw)})
        payload += raw
    header = json.dumps({"format": "specdec-ckpt-v1", "config": asdict(bundle.config),
                         "tensors": table}).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_bundle(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack_from("<Q", raw, 0)
    try:
        header = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad header: {e}") from None
    if header.get("format") != "specdec-ckpt-v1":
        raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
    config = ModelConfig(**header["config"])
    payload = raw[8 + hlen:]
    tensors = {}
    for t in header["tensors"]:
        if t["dtype"] not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: unsupported dtype {t['dtype']}")
        buf = payload[t["offset"]:t["offset"] + t["nbytes"]]
        tensors[t["name"]] = np.frombuffer(buf, dtype=_DTYPE_TAGS[t["dtype"]]).reshape(t["shape"]).copy()
    try:
        layers = [{key: tensors[f"layers.{i}.{key}"] for key in _LAYER_KEYS}
                  for i in range(config.n_layers)]
        heads = [{"w": tensors[f"heads.{k}.w"], "b": tensors[f"heads.{k}.b"]}
                 for k in range(config.n_draft_heads)]
        return ModelBundle(config, tensors["embed"], layers, tensors["final_norm"],
                           tensors["w_out"], heads)
    except KeyError as e:
        raise CheckpointError(f"{path}: missing tensor {e}") from None
