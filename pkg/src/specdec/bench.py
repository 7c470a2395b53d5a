"""Benchmark harness: accept rate, overhead, speedup, and a static
arithmetic-intensity estimate for one decode step.

Definitions used throughout:
  AC            mean committed tokens per speculative step (root included),
                computed over non-truncated steps
  overhead      median speculative step latency / median autoregressive step
                latency, same prompt and length
  speedup_model AC / overhead (an arithmetic identity, asserted on every row)
  speedup_measured  wall-clock autoregressive time / speculative time
Timings use the monotonic clock with warmup iterations discarded.
"""

import csv
import logging
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine

log = logging.getLogger("specdec.bench")

_MIN_STEP_SECONDS = 10e-6


@dataclass
class RunMetrics:
    ac: float
    overhead: float
    speedup_measured: float
    speedup_model: float
    steps: int
    wall_s_spec: float
    wall_s_auto: float
    decode_len: int
    reps: int


@dataclass
class SweepConfig:
    lengths: list = field(default_factory=lambda: [128, 256, 512, 1024])
    prompt: list = field(default_factory=lambda: [4, 5, 6, 7])
    repetitions: int = 3
    warmup: int = 3
    seed: int = 0


def accept_rate(outcomes):
    """Mean accepted_len over steps, final budget-truncated step excluded."""
    counted = [o.accepted_len for o in outcomes if not o.truncated]
    if not counted:
        counted = [o.accepted_len for o in outcomes]
    return float(np.mean(counted))


def measure_run(bundle, buffers, prompt, decode_len, reps=3, warmup=1, drafter=None,
                max_rep_escalations=3):
    """Time matched speculative and autoregressive runs on one prompt.

    Escalates the rep count (doubling, up to max_rep_escalations times) when
    per-step latencies fall under the 10 microsecond timer-resolution floor.
    """
    for _ in range(max(0, warmup)):
        engine.generate_speculative(bundle, buffers, prompt, min(decode_len, 8), drafter=drafter)
        engine.generate_autoregressive(bundle, prompt, min(decode_len, 8))

    while True:
        spec_steps, auto_steps = [], []
        wall_spec = wall_auto = 0.0
        outcomes_all = []
        for _ in range(reps):
            t0 = time.perf_counter()
            _, outcomes, step_times = engine.generate_speculative(
                bundle, buffers, prompt, decode_len, drafter=drafter)
            wall_spec += time.perf_counter() - t0
            spec_steps += step_times
            outcomes_all += outcomes

            t0 = time.perf_counter()
            _, auto_times = engine.generate_autoregressive(bundle, prompt, decode_len)
            wall_auto += time.perf_counter() - t0
            auto_steps += auto_times

        t_spec = statistics.median(spec_steps)
        t_auto = statistics.median(auto_steps)
        if min(t_spec, t_auto) < _MIN_STEP_SECONDS and max_rep_escalations > 0:
            log.warning("per-step latency %.2e s under timer resolution; doubling reps to %d",
                        min(t_spec, t_auto), reps * 2)
            reps *= 2
            max_rep_escalations -= 1
            continue
        break

    ac = accept_rate(outcomes_all)
    overhead = t_spec / t_auto
    return RunMetrics(
        ac=ac,
        overhead=overhead,
        speedup_measured=wall_auto / wall_spec,
        speedup_model=ac / overhead,
        steps=len(outcomes_all),
        wall_s_spec=wall_spec,
        wall_s_auto=wall_auto,
        decode_len=decode_len,
        reps=reps,
    )


CSV_COLUMNS = ("length", "rep", "ac", "overhead", "speedup_measured", "speedup_model",
               "steps", "wall_ms_spec", "wall_ms_auto")


def sweep(bundle, buffers, config: SweepConfig, out_csv=None, drafter=None):
    """One row per (length, rep) plus an aggregate-median row per length."""
    if config.repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    for length in config.lengths:
        if length > bundle.config.max_seq_len:
            raise ValueError(f"decode length {length} exceeds max_seq_len")
    rows = []
    for length in config.lengths:
        per_rep = []
        for rep in range(config.repetitions):
            m = measure_run(bundle, buffers, config.prompt, length, reps=1,
                            warmup=config.warmup if rep == 0 else 0, drafter=drafter)
            per_rep.append(m)
            rows.append({"length": length, "rep": rep, "ac": m.ac, "overhead": m.overhead,
                         "speedup_measured": m.speedup_measured, "speedup_model": m.speedup_model,
                         "steps": m.steps, "wall_ms_spec": m.wall_s_spec * 1e3,
                         "wall_ms_auto": m.wall_s_auto * 1e3})
        rows.append({"length": length, "rep": "median",
                     "ac": statistics.median(m.ac for m in per_rep),
                     "overhead": statistics.median(m.overhead for m in per_rep),
                     "speedup_measured": statistics.median(m.speedup_measured for m in per_rep),
                     "speedup_model": statistics.median(m.speedup_model for m in per_rep),
                     "steps": statistics.median(m.steps for m in per_rep),
                     "wall_ms_spec": statistics.median(m.wall_s_spec for m in per_rep) * 1e3,
                     "wall_ms_auto": statistics.median(m.wall_s_auto for m in per_rep) * 1e3})
    medians = [r for r in rows if r["rep"] == "median"]
    overheads = [r["overhead"] for r in medians]
    if overheads != sorted(overheads):
        log.warning("overhead is not monotonically increasing across lengths: %s",
                    [round(o, 3) for o in overheads])
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows


def arithmetic_intensity(config, batch, context_len, bytes_per_element=2):
    """Closed-form OPS/Byte estimate for one decode step.

    FLOPs: 2 * parameter count * batch, plus an attention term of
    2 * context_len * d_model * batch per layer.  Bytes: one read of all
    parameters plus the per-layer KV-cache rows for the context.
    """
    if batch < 1 or context_len < 0:
        raise ValueError("batch must be >= 1 and context_len >= 0")
    c = config
    kv_dim = c.n_kv_heads * c.d_head
    per_layer = (c.d_model * c.n_q_heads * c.d_head + 2 * c.d_model * kv_dim
                 + c.n_q_heads * c.d_head * c.d_model
                 + 2 * c.d_model * c.d_ff + 2 * c.d_model)
    params = c.vocab_size * c.d_model + c.n_layers * per_layer + c.d_model + c.d_model * c.vocab_size

    weight_flops = 2.0 * params * batch
    attn_flops = 2.0 * context_len * c.d_model * batch * c.n_layers
    param_bytes = float(params * bytes_per_element)
    kv_bytes = float(c.n_layers * 2 * context_len * kv_dim * bytes_per_element)
    total_flops = weight_flops + attn_flops
    total_bytes = param_bytes + kv_bytes
    return {
        "intensity_ops_per_byte": total_flops / total_bytes,
        "weight_flops": weight_flops,
        "attention_flops": attn_flops,
        "param_bytes": param_bytes,
        "kv_cache_bytes": kv_bytes,
        "param_count": params,
    }
